//! Optimization: Adam with clipping and schedules, checkpoints, the three
//! training stages and evaluation.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod optim;
pub mod stages;

pub use checkpoint::{config_hash, Checkpoint, CheckpointMeta};
pub use config::TrainConfig;
pub use eval::{evaluate, write_reports, EvalOptions, Estimator, ProbabilitySource};
pub use optim::{clip_grad_norm, Adam, EarlyStopping, Plateau};
pub use stages::{train, train_stage1, train_stage2, train_stage3, EpochRecord, TrainOutcome};
