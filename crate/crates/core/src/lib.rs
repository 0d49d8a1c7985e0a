//! Factorized low-rank pruning with Hard Concrete gates.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod lm;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod tensor;

pub use bench::{bench_compacted, BenchOptions, BenchResult, LowRankKernel};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use controller::{AgpScheduler, LagrangianController, Violation};
pub use error::{Error, Result};
pub use gate::{GateConfig, HardConcreteGate, KeptValue};
pub use graph::{Graph, Param, Var};
pub use layers::{ColumnGatedLinear, CompactedLinear, FactorizedLinear, MaskMode, ParamCount};
pub use lm::{CharCorpus, Method, RecurrentLM, Split, Trainer};
pub use metrics::{MetricsWriter, Record};
pub use report::{PruneReport, SummaryRow};
pub use tensor::{Precision, Tensor};
