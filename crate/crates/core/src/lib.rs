pub mod agent;
pub mod analysis;
pub mod diffcore;
pub mod env;
pub mod error;
pub mod experiments;
pub mod trainer;
pub mod run;
pub mod transcript;

pub use error::{Error, Result};
pub use agent::{AgentConfig, AgentParams};
pub use env::{Channel, GameState, Role, Sociality};
pub use experiments::{PairedSeedResult, PairedSummary};
pub use run::{execute, Experiment, RunConfig, RunSummary};
pub use transcript::{TranscriptRecord, TranscriptTurn};
