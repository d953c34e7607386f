//! Optimizer, learning-rate schedule, training loop and ablation runner.

mod ablation;
mod adam;
mod schedule;
mod trainer;

pub use ablation::{ablation_csv, run_ablation, AblationResult, AblationRow, ABLATION_ROWS};
pub use adam::{Adam, AdamConfig};
pub use schedule::cosine_lr;
pub use trainer::{
    batch_gradient, dataset_loss, evaluate, input_of, log_csv, predict_lesion, train, train_from,
    EpochRecord, TrainConfig, TrainOutcome, LOG_HEADER,
};
