//! Optimisation, learning-rate schedule, checkpoints and the training loop.

mod checkpoint;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION, MAGIC};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use schedule::{lr_schedule, LrSchedule, ScheduleUnit};
pub use trainer::{
    batch_gradients, evaluate, evaluate_degraded, extract_givs, l1_loss, restore_image, train_loop, Budget, LogRow,
    TrainConfig, TrainLog, TrainOutcome, Trainer, TOY_LR,
};
