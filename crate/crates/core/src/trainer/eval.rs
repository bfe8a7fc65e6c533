use super::rollout::sequence_kl;
use crate::error::Result;
use crate::par;
use crate::policy::{Actor, PromptSpec, Reference};
use crate::rewards::RewardContext;
use crate::rng::{stream, Stage};

/// Mean rewards and KL of samples drawn under one conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSummary {
    /// Reward token used, `None` for the plain prompt.
    pub token: Option<usize>,
    pub raw_mean: Vec<f64>,
    pub normalized_mean: Vec<f64>,
    /// Mean over samples of the summed per-step KL to the reference.
    pub kl_mean: f64,
    pub samples: usize,
}

impl ConditionSummary {
    pub fn total_normalized(&self) -> f64 {
        self.normalized_mean.iter().sum()
    }
}

/// Samples `n_per_prompt` sequences per prompt. Draws depend only on
/// `(seed, prompt, index)`, so different conditionings share their random
/// numbers.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_condition(
    actor: &Actor,
    reference: &Reference,
    ctx: &RewardContext,
    prompts: usize,
    token: Option<usize>,
    alpha: f64,
    n_per_prompt: usize,
    temperature: f64,
    seed: u64,
) -> Result<ConditionSummary> {
    let jobs: Vec<(usize, usize)> = (0..prompts).flat_map(|p| (0..n_per_prompt).map(move |i| (p, i))).collect();
    let results = par::map_slice(&jobs, |&(p, i)| -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let spec = match token {
            Some(k) => PromptSpec::with_token(p, k, alpha),
            None => PromptSpec::plain(p),
        };
        let mut rng = stream(seed, Stage::Eval, p as u64, i as u64);
        let sample = actor.sample_sequence(&spec, temperature, &mut rng)?;
        let rv = ctx.compute_reward_vector(p, &sample.sequence)?;
        let kl = sequence_kl(actor, reference, &spec, &sample.sequence)?;
        Ok((rv.raw, rv.normalized, kl))
    });
    let k = ctx.channels();
    let mut raw = vec![0.0; k];
    let mut norm = vec![0.0; k];
    let mut kl = 0.0;
    let n = results.len();
    for r in results {
        let (rr, nn, kk) = r?;
        raw.iter_mut().zip(&rr).for_each(|(a, b)| *a += b);
        norm.iter_mut().zip(&nn).for_each(|(a, b)| *a += b);
        kl += kk;
    }
    let d = n.max(1) as f64;
    raw.iter_mut().for_each(|v| *v /= d);
    norm.iter_mut().for_each(|v| *v /= d);
    Ok(ConditionSummary {
        token,
        raw_mean: raw,
        normalized_mean: norm,
        kl_mean: kl / d,
        samples: n,
    })
}

/// One summary per reward token, then one for the plain prompt.
#[allow(clippy::too_many_arguments)]
pub fn ablate_tokens(
    actor: &Actor,
    reference: &Reference,
    ctx: &RewardContext,
    prompts: usize,
    alpha: f64,
    n_per_prompt: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<ConditionSummary>> {
    (0..ctx.channels())
        .map(Some)
        .chain([None])
        .map(|t| evaluate_condition(actor, reference, ctx, prompts, t, alpha, n_per_prompt, temperature, seed))
        .collect()
}
