//! Contrastive training, optimization and negative construction.

pub mod adam;
pub mod loss;
pub mod mining;
pub mod negatives;
pub mod trainer;

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use loss::{contrastive_loss, contrastive_loss_value, joint_loss, joint_loss_value, sim};
pub use mining::{mine_hard_negatives, MiningQuery};
pub use negatives::{bm25_negatives, in_batch_negatives, TrainExample};
pub use trainer::{train, write_log, EpochLog, TrainConfig, TrainReport};
