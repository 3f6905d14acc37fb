//! Losses, optimiser and the quantization-aware training loop.

mod losses;
mod optim;
mod trainer;

pub use losses::{l1_loss, lr_at, skt_loss, structure_map, total_loss, total_loss_value, warmup_active, NORM_EPS};
pub use optim::{adam_step, Adam, AdamConfig, AdamSlot};
pub use trainer::{
    gate_betas, pretrain, record_loss, teacher_features, train, EpochMetrics, LossRecord, LossSettings, NoObserver, PretrainConfig,
    StepInfo, TrainConfig, TrainObserver, TrainReport, CSV_HEADER,
};
