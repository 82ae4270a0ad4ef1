//! Domain-adaptive pre-training with soft-masked heads and contrastive
//! separation from general knowledge.

pub mod contrast;
pub mod optim;
pub mod train;

pub use contrast::{contrastive_loss, ContrastBatch};
pub use optim::{Optimizer, OptimizerKind};
pub use train::{
    da_train, da_train_step, full_representation, general_representation, install_soft_masks, masked_for_step,
    mlm_forward_loss, mlm_loss_from_trace, mlm_train_step, pretrain, DaTrainConfig, LogRow, MaskKind, MaskVariant,
    PretrainConfig, ResolvedMask, StepMetrics, TrainLog, LOG_HEADER,
};
