//! Joint training loop with AU dropout and resumable checkpoints.

pub mod adamw;
pub mod data;
pub mod dropout;
pub mod run;

pub use adamw::{AdamW, AdamWConfig};
pub use data::PairData;
pub use dropout::{au_dropout, DropoutConfig};
pub use run::{
    batch_loss, summary_of, train, train_on, validation_loss, Batch, LogRecord, StepStats, TrainConfig, TrainOutcome,
    TrainSummary, Trainer, LOG_FILE, MODEL_FILE, STATE_FILE,
};
