//! Momentum-contrast self-supervised pretraining.
//!
//! A query encoder (backbone + projection head) is trained with the NTXent
//! contrastive loss against keys from a momentum-averaged copy of itself;
//! past keys fill a FIFO feature queue that supplies negatives. AdamW with a
//! one-cycle schedule drives optimization; early stopping watches the epoch
//! loss.

pub mod input;
mod loss;
mod optim;
mod queue;
mod state;
mod train;

pub use loss::ntxent_loss;
pub use optim::{one_cycle_lr, AdamW};
pub use queue::FeatureQueue;
pub use state::{momentum_update, EncoderParams, MoCoState};
pub use train::{pretrain, write_history_csv, EarlyStopper, EpochStats, PretrainConfig};
