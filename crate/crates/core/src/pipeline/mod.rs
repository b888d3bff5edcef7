//! Dataset handling, training, checkpoints, evaluation and timing.

pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod latency;
pub mod train;

pub use checkpoint::Checkpoint;
pub use dataset::{Dataset, DatasetIndex, ImagePair, Split};
pub use eval::{evaluate, EvalReport};
pub use latency::{benchmark_latency, LatencyReport};
pub use train::{train, TrainConfig, Trainer, Variant};
