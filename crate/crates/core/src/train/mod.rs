//! SGD training, evaluation, run configuration and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod trainer;

pub use checkpoint::{Checkpoint, LoadOptions, MAGIC};
pub use config::{DataConfig, LossConfig, RunConfig, TrainConfig};
pub use optim::{sgd_step, SgdState};
pub use trainer::{
    epoch_log_csv, evaluate, evaluate_checkpoint, init_threads, initial_checkpoint, train, EpochLog, Evaluation,
    TrainOptions, TrainOutcome, EPOCH_LOG_HEADER,
};
