//! Post-hoc analysis of game transcripts and trained agents.

pub mod geometry;
pub mod probe;
pub mod ranks;
pub mod symbols;

pub use geometry::{embedding_geometry, two_means, whitened_pca, Geometry, ProjectedPoint};
pub use probe::{probe_suite, train_probe, ProbeConfig, ProbeDataset, ProbeExample, ProbeReport, ProbeSuite};
pub use ranks::{bigram_rank_correlation, bigram_spearman};
pub use symbols::{symbol_stats, BigramCounts, SymbolStats};
