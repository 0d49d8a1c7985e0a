//! Character-level language modelling harness.

pub mod corpus;
pub mod model;
pub mod train;

pub use corpus::{Batch, Batcher, CharCorpus, Split, SplitFractions, SymbolMode, Vocabulary};
pub use model::{LayerRank, Method, ModelConfig, RecurrentLM};
pub use train::{Phase, PruneConfig, SizeControl, StepMetrics, TargetBasis, TrainConfig, TrainState, Trainer};
