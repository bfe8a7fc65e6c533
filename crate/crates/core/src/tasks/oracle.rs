use super::SyntheticTask;
use crate::error::Result;
use crate::par;
use crate::policy::{Actor, PromptSpec, TokenSequence};
use crate::rng::{stream, Stage};

/// Scores computed from the task's hidden structure only.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OracleScores {
    /// Fraction of samples identical to their prompt's canonical sequence.
    pub exact_match_rate: f64,
    /// Mean positional token agreement with the canonical sequence, over the
    /// longer of the two lengths.
    pub token_match_rate: f64,
    /// Mean hidden preference score.
    pub preference_mean: f64,
}

pub fn token_match(a: &TokenSequence, b: &TokenSequence) -> f64 {
    let n = a.len().max(b.len());
    let same = a.tokens().iter().zip(b.tokens()).filter(|(x, y)| x == y).count();
    same as f64 / n as f64
}

/// Samples `n_per_prompt` sequences for every prompt under the conditioning
/// `condition(prompt_id)` and scores them against the hidden oracles.
pub fn oracle_eval(
    actor: &Actor,
    task: &SyntheticTask,
    n_per_prompt: usize,
    temperature: f64,
    seed: u64,
    condition: impl Fn(usize) -> PromptSpec + Sync,
) -> Result<OracleScores> {
    let jobs: Vec<(usize, usize)> = (0..task.prompts())
        .flat_map(|p| (0..n_per_prompt).map(move |i| (p, i)))
        .collect();
    let rows = par::map_slice(&jobs, |&(p, i)| -> Result<(f64, f64, f64)> {
        let mut rng = stream(seed, Stage::Eval, p as u64, i as u64);
        let sample = actor.sample_sequence(&condition(p), temperature, &mut rng)?;
        let canon = task.canonical(p)?;
        let exact = f64::from(u8::from(&sample.sequence == canon));
        Ok((exact, token_match(&sample.sequence, canon), task.preference(&sample.sequence)))
    });
    let n = rows.len().max(1) as f64;
    let mut acc = OracleScores::default();
    for r in rows {
        let (e, t, p) = r?;
        acc.exact_match_rate += e;
        acc.token_match_rate += t;
        acc.preference_mean += p;
    }
    acc.exact_match_rate /= n;
    acc.token_match_rate /= n;
    acc.preference_mean /= n;
    Ok(acc)
}
