//! Optimization and the staged training pipeline.

pub mod adamw;
pub mod stages;

pub use adamw::{AdamW, AdamWConfig, StepReport};
pub use stages::{
    assemble, assemble_lm, compose_losses, run_stage, stage_spec, text_val_ce, verify_freeze,
    BatchLoss, FreezeReport, Model, StageReport, StageSpec, TaskSample,
};
