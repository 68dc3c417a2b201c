//! Desk-scale training and evaluation.

mod augment;
mod data;
mod log;
mod optim;
mod schedule;
mod train;

pub use augment::{mix_pairs, mixup, smooth_labels};
pub use data::{Dataset, DATASET_MAGIC};
pub use log::{EpochRecord, RunLog};
pub use optim::{AdamW, AdamWConfig, DecayPolicy, ADAM_BETAS, ADAM_EPS};
pub use schedule::{scaled_base_lr, LrSchedule, LR_PER_REFERENCE_BATCH, LR_REFERENCE_BATCH};
pub use train::{evaluate, train, EvalResult, TrainConfig};
