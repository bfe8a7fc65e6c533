use super::config::{Mode, PpoConfig};
use crate::error::{Error, Result};
use crate::par;
use crate::pareto::pareto_mask;
use crate::policy::{Actor, Critic, PromptSpec, Reference, Sample, TokenSequence};
use crate::rewards::{RewardContext, RewardVector};
use crate::rng::{stream, Stage};

/// One sampled sequence with everything the update needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub group: usize,
    pub spec: PromptSpec,
    pub sample: Sample,
    pub ref_logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: RewardVector,
    /// Exact `Σ_t KL(π_θ(·|s_t) ‖ π_ref(·|s_t))` along the sequence.
    pub kl: f64,
    pub member: bool,
    /// Scalar reward placed on the End step.
    pub terminal: f64,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl SampleRecord {
    pub fn sequence(&self) -> &TokenSequence {
        &self.sample.sequence
    }

    /// 1 for steps the policy chose, 0 for a forced End.
    pub fn step_mask(&self) -> Vec<f64> {
        let n = self.sample.sequence.len();
        (0..n)
            .map(|t| if self.sample.forced_end && t + 1 == n { 0.0 } else { 1.0 })
            .collect()
    }
}

/// `K · N` samples for one prompt, stored group-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub prompt_id: usize,
    pub groups: usize,
    pub samples_per_group: usize,
    pub samples: Vec<SampleRecord>,
}

impl RolloutBatch {
    pub fn group(&self, k: usize) -> &[SampleRecord] {
        &self.samples[k * self.samples_per_group..(k + 1) * self.samples_per_group]
    }

    pub fn pareto_sizes(&self) -> Vec<usize> {
        (0..self.groups).map(|k| self.group(k).iter().filter(|s| s.member).count()).collect()
    }
}

/// Exact KL between the two models' next-symbol distributions, summed over
/// the steps of `seq`.
pub fn sequence_kl(actor: &Actor, reference: &Reference, spec: &PromptSpec, seq: &TokenSequence) -> Result<f64> {
    let a = actor.step_log_distributions(spec, seq)?;
    let r = reference.step_log_distributions(spec, seq)?;
    Ok(a.iter()
        .zip(&r)
        .map(|(la, lr)| la.iter().zip(lr).map(|(p, q)| p.exp() * (p - q)).sum::<f64>())
        .sum())
}

/// Per-step reward stream `−β·(logπ_old − logπ_ref)` (zero where `mask` is
/// 0) with `terminal` added on the last step, accumulated backwards with
/// discount `γ`.
pub fn shaped_returns(logp_old: &[f64], logp_ref: &[f64], mask: &[f64], terminal: f64, beta: f64, gamma: f64) -> Result<Vec<f64>> {
    let n = logp_old.len();
    if logp_ref.len() != n || mask.len() != n || n == 0 {
        return Err(Error::shape("shaped_returns", format!("{n} / {} / {}", logp_ref.len(), mask.len())));
    }
    let mut g = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let mut r = -beta * (logp_old[t] - logp_ref[t]) * mask[t];
        if t + 1 == n {
            r += terminal;
        }
        acc = r + gamma * acc;
        g[t] = acc;
    }
    Ok(g)
}

/// Raw advantages `G − V`.
pub fn advantages(returns: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    if returns.len() != values.len() {
        return Err(Error::shape("advantages", format!("{} vs {}", returns.len(), values.len())));
    }
    Ok(returns.iter().zip(values).map(|(g, v)| g - v).collect())
}

/// Shifts and scales all advantages of the batch to zero mean and unit
/// variance.
pub fn standardize(batch: &mut [Vec<f64>]) {
    let n: usize = batch.iter().map(Vec::len).sum();
    if n == 0 {
        return;
    }
    let mean = batch.iter().flatten().sum::<f64>() / n as f64;
    let var = batch.iter().flatten().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt().max(1e-8);
    for a in batch.iter_mut().flatten() {
        *a = (*a - mean) / sd;
    }
}

/// Samples `K` groups of `N` sequences for one prompt, scores them and marks
/// each group's non-dominated samples. Group `k` is conditioned on reward
/// token `k` blended with weight `alpha`.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    actor: &Actor,
    reference: &Reference,
    critic: &Critic,
    ctx: &RewardContext,
    cfg: &PpoConfig,
    prompt_id: usize,
    alpha: f64,
    seed: u64,
    iteration: u64,
) -> Result<RolloutBatch> {
    let (k_groups, n) = (cfg.groups, cfg.samples_per_group);
    if k_groups != ctx.channels() {
        return Err(Error::config("groups", "must equal the number of reward channels"));
    }
    let records = par::map_indices(k_groups * n, |j| -> Result<SampleRecord> {
        let group = j / n;
        let spec = PromptSpec::with_token(prompt_id, group, alpha);
        let mut rng = stream(seed, Stage::Rollout, iteration, j as u64);
        let sample = actor.sample_sequence(&spec, cfg.temperature, &mut rng)?;
        let ref_logprobs = reference.sequence_logprob(&spec, &sample.sequence)?;
        let values = critic.critic_values(&spec, &sample.sequence)?;
        let rewards = ctx.compute_reward_vector(prompt_id, &sample.sequence)?;
        let kl = sequence_kl(actor, reference, &spec, &sample.sequence)?;
        Ok(SampleRecord {
            group,
            spec,
            sample,
            ref_logprobs,
            values,
            rewards,
            kl,
            member: true,
            terminal: 0.0,
            returns: Vec::new(),
            advantages: Vec::new(),
        })
    });
    let mut samples = records.into_iter().collect::<Result<Vec<_>>>()?;
    for k in 0..k_groups {
        let group = &mut samples[k * n..(k + 1) * n];
        if cfg.mode == Mode::Pareto {
            let rows: Vec<Vec<f64>> = group.iter().map(|s| s.rewards.normalized.clone()).collect();
            let mask = pareto_mask(&rows)?;
            for (s, m) in group.iter_mut().zip(mask) {
                s.member = m;
            }
        }
        for s in group.iter_mut() {
            s.terminal = match cfg.mode {
                Mode::Pareto => s.rewards.normalized[k],
                Mode::WeightedSum => s.rewards.normalized.iter().sum::<f64>() / s.rewards.normalized.len() as f64,
            };
        }
    }
    let mut advs = Vec::with_capacity(samples.len());
    for s in samples.iter_mut() {
        let mask = s.step_mask();
        s.returns = shaped_returns(&s.sample.old_logprobs, &s.ref_logprobs, &mask, s.terminal, cfg.beta, cfg.gamma)?;
        advs.push(advantages(&s.returns, &s.values)?);
    }
    standardize(&mut advs);
    for (s, a) in samples.iter_mut().zip(advs) {
        s.advantages = a;
    }
    Ok(RolloutBatch {
        prompt_id,
        groups: k_groups,
        samples_per_group: n,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_summed_tail() {
        let old = [0.1, 0.1, 0.1];
        let zero = [0.0; 3];
        let g = shaped_returns(&old, &zero, &[1.0; 3], 1.0, 1.0, 1.0).unwrap();
        let want = [0.7, 0.8, 0.9];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let same = shaped_returns(&old, &old, &[1.0; 3], 2.5, 0.3, 1.0).unwrap();
        assert_eq!(same, vec![2.5; 3]);
    }

    #[test]
    fn standardized_mean_zero() {
        let mut a = vec![vec![1.0, 2.0], vec![5.0], vec![-3.0, 0.5, 0.25]];
        standardize(&mut a);
        let all: Vec<f64> = a.into_iter().flatten().collect();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        assert!(m.abs() < 1e-12);
    }
}
