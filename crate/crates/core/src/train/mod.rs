pub mod ablation;
pub mod losses;
pub mod optim;
pub mod trainer;

pub use ablation::{apply_ablation, AblationFlags, Wiring};
pub use losses::{ce_suffix_loss, info_nce, info_nce_var, total_loss, LossComponents, LossWeights};
pub use optim::AdamW;
pub use trainer::{build_model, Schedule, StepRecord, TrainConfig, TrainEvent, TrainState, Trainer, ValidationRecord};
