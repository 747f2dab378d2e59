//! Optimization: AdamW, cosine schedule, class-weighted sampling and the
//! early-stopping training loop.

pub mod optim;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use optim::AdamW;
pub use sampler::weighted_sampler;
pub use schedule::cosine_lr;
pub use trainer::{evaluate, train, train_with, EpochRecord, Evaluation, History, TrainConfig};
