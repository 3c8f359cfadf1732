//! The assembled tagger, its objective, optimizer, training loop,
//! evaluation and persistence.

pub mod checkpoint;
mod config;
mod experiment;
mod network;
mod optim;
mod train;

pub use config::{ModelConfig, Variant};
pub use experiment::{
    alignment_accuracy, run_comparison, AlignmentReport, ComparisonReport, VariantRun,
};
pub use network::{
    cosine, generation_term, overall_loss, BatchForward, BgaModel, MaskReport, SentenceTrace,
};
pub use optim::{learning_rate, AdamW, TrainConfig};
pub use train::{evaluate, fit, train_step, EpochRecord, LossRecord, Metrics, TrainOutcome};
