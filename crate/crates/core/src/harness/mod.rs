//! Run configuration, pipeline orchestration, artifacts and the CLI.

pub mod cli;
mod config;
mod pipeline;

pub use config::{RunConfig, KEYS};
pub use pipeline::{
    build_task, fit_encoders, fit_scorer, fit_warmup_normalizer, generate_data, init_actor, init_critic,
    load_trainer, pretrain, reward_context, save_trainer, MetricsWriter, Prepared, Workspace,
};
