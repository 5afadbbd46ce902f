//! Minimal reverse-mode machinery for the agents and probe classifiers.
//!
//! Every layer has an explicit forward pass that returns (or stores) the
//! values its backward pass needs, and a backward pass that accumulates into a
//! gradient buffer of the layer's own type. A "tape" is simply the ordered list
//! of those caches kept by the caller.

mod adam;
mod checkpoint;
mod embedding;
pub mod heads;
mod linear;
mod lstm;
pub mod ops;
mod params;
mod real;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, StoredTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use embedding::Embedding;
pub use heads::{bernoulli_head, categorical_head, Bernoulli, Categorical, HeadSample};
pub use linear::Linear;
pub use lstm::{Lstm, LstmStep, SequenceGrads, StepGrads};
pub use params::Parameters;
pub(crate) use params::join;
pub use real::Real;
pub use tensor::Tensor;
