//! Run configuration, training, evaluation, checkpoints, cost sweeps and
//! ablations.

pub mod ablate;
pub mod bench;
pub mod checkpoint;
mod config;
mod eval;
mod model;
mod train;

pub use ablate::{ablate, AblationRow, Variant};
pub use bench::{run_bench, BenchPoint, BenchRow, BenchSettings};
pub use config::RunConfig;
pub use eval::{evaluate, prf, score, Counts, EvalReport, SPAN_TYPES};
pub use model::{LossVars, Model, SentenceGrads};
pub use train::{build_vocab, load_split, train, train_model, train_step, BatchStats, EpochLog, TrainLog, TrainOutcome};
