//! Training engine: objectives, Adam(W) with warmup + cosine, EMA, staged
//! plans with model surgery, and progressive patch schedules.

mod engine;
mod losses;
mod optim;
mod plan;

pub use engine::{
    read_log, run_plan, run_stage, select_best, smoothed, validation_psnr, BestRecord, LogRecord,
    PlanOutcome, TrainOptions, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG,
};
pub use losses::{
    loss_edge, loss_l1, loss_perceptual, loss_psnr, sobel_magnitude, total_loss, LossKind,
    LossTerm, LossValues, EDGE_EPS, PSNR_LOSS_MSE_FLOOR,
};
pub use optim::{
    cosine_lr, ema_update, lr_at, EmaState, Optimizer, OptimizerConfig, OptimizerKind,
};
pub use plan::{
    ipiu_plan, nafnet_baseline_plan, nafreplocal_desk_plan, nafreplocal_plan, restormerl_plan,
    sa_nafnet_plan, shipped_plans, PlanScale, RunOptions, ScheduleMode, Stage, StagePlan,
};
