//! Training objectives, their gradients and the training loop.
//!
//! ADE trains a potential against a dynamics-embedded sampler on a shared
//! max-min objective. CD, PCD, score matching, NCE, MPF and a planar-flow
//! primal-dual (ADE with no dynamics layers) are provided as baselines.

mod ade;
mod baselines;
mod optim;
mod train;

pub use ade::{ade_grad_f, ade_grad_sampler, ade_loss, AdeBindings, AdeConfig, AdeTrace, GradientMode, Sampler};
pub use baselines::{
    cd_grad, mpf_loss, nce_loss, nce_objective, pcd_grad, sm_loss, CdConfig, CdTrace, MpfConfig, NoiseModel,
    ReplayBuffer,
};
pub use optim::{Adam, AdamConfig, Direction};
pub use train::{
    train, CheckpointReason, Collect, MetricsRow, Model, TrainObserver, Trainer, LANGEVIN_NOISE_STD, MODEL_STREAM,
    SAMPLER_STREAM, TRAIN_STREAM,
};
