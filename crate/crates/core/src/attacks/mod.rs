//! Iterative L-infinity attacks on segmentation models: plain PGD, the
//! correctness-weighted first stage, the KL-weighted second stage, the
//! controller combining them, and momentum/translation/Nesterov gradient
//! transforms that compose with any of these.

mod config;
mod controller;
mod loss;
mod partition;
mod step;

pub use config::{segpgd_gamma, AttackConfig, Mode, StepSchedule, Transform};
pub use controller::{run_attack, run_attack_observed, segpgd_baseline, AdvResult, IterationLog, Stage};
pub use loss::{stage1_loss, stage1_weights, stage2_loss, stage2_weights, uniform_weights};
pub use partition::{partition_by_correctness, partition_by_kl, pixel_kl, KlMap, PixelPartition};
pub use step::{gaussian_kernel, gradient_transform, lookahead, pgd_step, step_size_schedule, TransformState};
