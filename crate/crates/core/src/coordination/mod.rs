//! Joint training of the sub-networks.
//!
//! Each iteration activates the smallest, the largest and two banded
//! intermediate ratios, runs them largest-first so every student's
//! distillation target already exists, accumulates all four gradients into
//! the shared buffers and takes a single optimizer step.

mod losses;
mod optim;
mod sampler;
mod trainer;

pub use losses::{ce_loss, kl_loss, softmax_rows, subnet_loss, LossTerms, SubnetRole};
pub use optim::AdamW;
pub use sampler::{RatioList, RngState, StableSampler, TeacherRef};
pub use trainer::{
    accumulate_step, pretrain_teacher, train_step, EpochStats, LossBundle, RatioStats, SubnetLoss, Teacher, TeacherEpoch,
    TrainConfig, Trainer,
};
