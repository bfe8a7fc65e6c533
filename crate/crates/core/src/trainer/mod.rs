//! PPO fine-tuning with Pareto-filtered multi-reward groups.
//!
//! Each iteration picks one prompt, samples `K` groups of `N` sequences (group
//! `k` conditioned on reward token `k`), scores every sample on all channels,
//! keeps each group's non-dominated samples for the actor objective and
//! regresses the critic on all of them.

mod config;
mod eval;
mod losses;
mod metrics;
mod rollout;
mod update;

use std::time::Instant;

use rand::Rng;

pub use config::{Mode, PpoConfig};
pub use eval::{ablate_tokens, evaluate_condition, ConditionSummary};
pub use losses::{actor_loss, actor_loss_on, clipped_term, critic_loss, critic_loss_on};
pub use metrics::{csv_header, csv_preamble, metrics_csv, IterationMetrics};
pub use rollout::{
    advantages, collect_rollouts, sequence_kl, shaped_returns, standardize, RolloutBatch, SampleRecord,
};
pub use update::{actor_step_weights, ppo_update, TrainerState, UpdateStats};

use crate::error::Result;
use crate::rewards::RewardContext;
use crate::rng::{stream, Stage};

/// Prompt trained on at `iteration`.
pub fn prompt_for_iteration(seed: u64, iteration: u64, prompts: usize) -> usize {
    stream(seed, Stage::Prompt, iteration, 0).gen_range(0..prompts)
}

/// Runs one full iteration and advances `state.iteration`.
pub fn train_iteration(
    state: &mut TrainerState,
    ctx: &RewardContext,
    cfg: &PpoConfig,
    prompts: usize,
    seed: u64,
) -> Result<IterationMetrics> {
    let start = Instant::now();
    let it = state.iteration;
    let prompt_id = prompt_for_iteration(seed, it, prompts);
    let alpha = cfg.alpha_at(it);
    let batch = collect_rollouts(
        &state.actor,
        &state.reference,
        &state.critic,
        ctx,
        cfg,
        prompt_id,
        alpha,
        seed,
        it,
    )?;
    let stats = ppo_update(state, &batch, cfg, seed)?;
    state.iteration += 1;
    let k = ctx.channels();
    let n = batch.samples.len() as f64;
    let mut raw_mean = vec![0.0; k];
    let mut normalized_mean = vec![0.0; k];
    for s in &batch.samples {
        raw_mean.iter_mut().zip(&s.rewards.raw).for_each(|(a, b)| *a += b / n);
        normalized_mean.iter_mut().zip(&s.rewards.normalized).for_each(|(a, b)| *a += b / n);
    }
    Ok(IterationMetrics {
        iteration: it,
        prompt_id,
        raw_mean,
        normalized_mean,
        pareto_sizes: batch.pareto_sizes(),
        kl: batch.samples.iter().map(|s| s.kl).sum::<f64>() / n,
        actor_loss: stats.actor_loss,
        critic_loss: stats.critic_loss,
        rolled_back: stats.rolled_back,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Iterates until `cfg.iterations` have completed, calling `after` with the
/// state and metrics of every iteration (e.g. to write checkpoints).
pub fn train_loop(
    state: &mut TrainerState,
    ctx: &RewardContext,
    cfg: &PpoConfig,
    prompts: usize,
    seed: u64,
    mut after: impl FnMut(&TrainerState, &IterationMetrics) -> Result<()>,
) -> Result<Vec<IterationMetrics>> {
    cfg.validate()?;
    let mut history = Vec::new();
    while state.iteration < cfg.iterations as u64 {
        let m = train_iteration(state, ctx, cfg, prompts, seed)?;
        after(state, &m)?;
        history.push(m);
    }
    Ok(history)
}
