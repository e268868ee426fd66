//! Dice loss, Adam, schedule and stopping rules, data handling and the
//! training and evaluation loops.

mod config;
pub mod data;
pub mod loss;
mod optim;
mod trainer;

pub use config::TrainingConfig;
pub use data::{
    augment, generate_synthetic, load_dataset, save_dataset, split_indices, standardize,
    synthetic_dataset, Augmentation, LabeledVolume, REGIONS,
};
pub use loss::{binarize, dice_loss, dice_score, DEFAULT_DICE_EPSILON};
pub use optim::{early_stop, lr_at, moving_average, Adam};
pub use trainer::{
    evaluate, measure_step, read_metrics, train, train_split, training_step, EpochMetrics,
    StepStats, TrainOptions, TrainReport, CHECKPOINT_DIR, CONFIG_FILE, METRICS_FILE, THRESHOLD,
};
