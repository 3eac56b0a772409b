//! The DNE stage, progressive refinement, the vertex loss, synthetic data and
//! the training loop.
//!
//! One stage, in order:
//!
//! 1. `f_p` = features at `P(v, c)`, `f_r` = features at the regressed coordinates;
//! 2. `mu_2d = phi([f_p | f_r])`, `u <- u + eps_2d`;
//! 3. features at the updated `u` are voxelised with the current vertices and
//!    pooled into three views, `mu_3d = psi(views)`, `v <- v + eps_3d`;
//! 4. the camera is re-fitted to `(v, u)` by ridge regression.
//!
//! In training every stage propagates its mean path (`eps = mu`) to the next
//! stage and additionally draws `R` reparameterized samples that only enter
//! the loss.

mod data;
mod loss;
mod params;
mod stage;
mod train;

pub use data::{
    instance_seed, load_instance, make_dataset, make_synthetic_instance, save_instance, write_atomic, DataConfig, Instance,
    VAL_EVERY,
};
pub use loss::{loss_v, loss_v_grad, StageLossGrad, StageSamples};
pub use params::{DnePipelineParams, DneStageParams, PipelineConfig, StageSettings, TrainConfig};
pub use stage::{dne_stage, refine, Mode, RefinementState, StageOutput, StageTrace};
pub use train::{
    evaluate, evaluate_coarse, objective, objective_with_targets, split_dataset, train, write_log_csv, EpochLog, InstanceObjective,
    Metrics, LOG_HEADER,
};
