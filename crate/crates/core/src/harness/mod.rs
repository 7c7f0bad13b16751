//! Run configuration, the training loop, and dataset-level evaluation and
//! detection.

mod config;
mod evaluate;
mod optim;
mod train;

pub use config::{Decay, OptimizerConfig, PromptConfig, RunConfig, ScheduleConfig};
pub use evaluate::{detect, evaluate, write_detections, write_report, DetectionRecord, EvalOutput, EvalReport, TadReport};
pub use optim::{clip_global_norm, global_norm, AdamW};
pub use train::{artifact_paths, loss_and_gradients, train, LogRecord, TrainOptions, TrainOutcome};

#[cfg(test)]
mod tests;
