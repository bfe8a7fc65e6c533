//! The three reward channels and their per-channel min-max normalization.
//!
//! Channel order is fixed: adherence (prompt/sequence embedding distance),
//! quality (ground-truth/sequence embedding distance), preference (scorer
//! output). Normalized values of different channels are not comparable; the
//! only place they are combined is the weighted-sum baseline.

use crate::encoders::{sq_dist, EncoderSet, PreferenceScorer};
use crate::error::{Error, Result};
use crate::policy::TokenSequence;

pub const CHANNEL_NAMES: [&str; 3] = ["adherence", "quality", "preference"];

#[derive(Clone, Debug, PartialEq)]
pub struct RewardConfig {
    /// Weight of each encoder family in the embedding-distance channels.
    pub lambda: Vec<f64>,
    /// Number of channels used, taken in the fixed order above.
    pub channels: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: vec![1.0, 1.0],
            channels: 3,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=CHANNEL_NAMES.len()).contains(&self.channels) {
            return Err(Error::config("channels", "must be 2 or 3"));
        }
        if self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::config("lambda", "weights must be finite and non-negative"));
        }
        if !self.lambda.iter().any(|&l| l > 0.0) {
            return Err(Error::config("lambda", "at least one weight must be positive"));
        }
        Ok(())
    }
}

fn check_families(encoders: &EncoderSet, lambda: &[f64]) -> Result<()> {
    for (i, &l) in lambda.iter().enumerate() {
        if l > 0.0 && encoders.family(i).is_none() {
            return Err(Error::MissingArtifact(format!(
                "encoder family {i} has weight {l} but was not trained"
            )));
        }
    }
    Ok(())
}

/// `−Σ_i λ_i ‖f_{t,i} − f_{m,i}‖²`
pub fn reward_adherence(prompt_id: usize, seq: &TokenSequence, encoders: &EncoderSet, lambda: &[f64]) -> Result<f64> {
    check_families(encoders, lambda)?;
    let mut r = 0.0;
    for (i, &l) in lambda.iter().enumerate() {
        if l > 0.0 {
            let fam = encoders.family(i).expect("checked");
            r -= l * sq_dist(&fam.embed_prompt(prompt_id)?, &fam.embed_sequence(seq)?);
        }
    }
    Ok(r)
}

/// `−Σ_i λ_i ‖f_{gt,i} − f_{pred,i}‖²`
pub fn reward_quality(gt: &TokenSequence, pred: &TokenSequence, encoders: &EncoderSet, lambda: &[f64]) -> Result<f64> {
    check_families(encoders, lambda)?;
    let mut r = 0.0;
    for (i, &l) in lambda.iter().enumerate() {
        if l > 0.0 {
            let fam = encoders.family(i).expect("checked");
            r -= l * sq_dist(&fam.embed_sequence(gt)?, &fam.embed_sequence(pred)?);
        }
    }
    Ok(r)
}

pub fn reward_preference(seq: &TokenSequence, scorer: &PreferenceScorer) -> f64 {
    scorer.score(seq)
}

/// Per-channel `[min, max]` estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizerState {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl NormalizerState {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() || min.is_empty() {
            return Err(Error::InvalidArgument("normalizer bounds must be non-empty and aligned".into()));
        }
        for (k, (lo, hi)) in min.iter().zip(&max).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "channel {k}: bounds [{lo}, {hi}] need min < max"
                )));
            }
        }
        Ok(Self { min, max })
    }

    pub fn channels(&self) -> usize {
        self.min.len()
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    /// `(r − min_k) / (max_k − min_k)`, extended linearly outside the range.
    pub fn normalize(&self, r: f64, k: usize) -> f64 {
        (r - self.min[k]) / (self.max[k] - self.min[k])
    }

    pub fn normalize_all(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().enumerate().map(|(k, &r)| self.normalize(r, k)).collect()
    }
}

/// Nearest-rank percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Bounds at the 5th and 95th percentiles of each channel's samples.
pub fn fit_normalizer(samples: &[Vec<f64>]) -> Result<NormalizerState> {
    let mut min = Vec::with_capacity(samples.len());
    let mut max = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("channel {k}: non-finite warmup reward")));
        }
        let lo = if s.is_empty() { f64::NAN } else { percentile(s, 5.0) };
        let hi = if s.is_empty() { f64::NAN } else { percentile(s, 95.0) };
        if !(lo < hi) {
            let distinct = {
                let mut v = s.clone();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v.len()
            };
            return Err(Error::InvalidArgument(format!(
                "channel {k} ({}) is constant over {} warmup samples ({distinct} distinct values); cannot normalize",
                CHANNEL_NAMES.get(k).unwrap_or(&"?"),
                s.len()
            )));
        }
        min.push(lo);
        max.push(hi);
    }
    NormalizerState::new(min, max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardVector {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Everything needed to score a sampled sequence. Prompt and ground-truth
/// embeddings are computed once up front.
#[derive(Clone, Debug)]
pub struct RewardContext {
    config: RewardConfig,
    encoders: EncoderSet,
    scorer: PreferenceScorer,
    ground_truth: Vec<TokenSequence>,
    prompt_embs: Vec<Vec<Vec<f64>>>,
    gt_embs: Vec<Vec<Vec<f64>>>,
    normalizer: Option<NormalizerState>,
}

impl RewardContext {
    pub fn new(
        config: RewardConfig,
        encoders: EncoderSet,
        scorer: PreferenceScorer,
        ground_truth: Vec<TokenSequence>,
    ) -> Result<Self> {
        config.validate()?;
        check_families(&encoders, &config.lambda)?;
        let mut prompt_embs = Vec::new();
        let mut gt_embs = Vec::new();
        for i in 0..config.lambda.len() {
            match encoders.family(i) {
                Some(fam) if config.lambda[i] > 0.0 => {
                    prompt_embs.push((0..ground_truth.len()).map(|p| fam.embed_prompt(p)).collect::<Result<_>>()?);
                    gt_embs.push(ground_truth.iter().map(|s| fam.embed_sequence(s)).collect::<Result<_>>()?);
                }
                _ => {
                    prompt_embs.push(Vec::new());
                    gt_embs.push(Vec::new());
                }
            }
        }
        Ok(Self {
            config,
            encoders,
            scorer,
            ground_truth,
            prompt_embs,
            gt_embs,
            normalizer: None,
        })
    }

    pub fn config(&self) -> &RewardConfig {
        &self.config
    }

    pub fn encoders(&self) -> &EncoderSet {
        &self.encoders
    }

    pub fn scorer(&self) -> &PreferenceScorer {
        &self.scorer
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn normalizer(&self) -> Option<&NormalizerState> {
        self.normalizer.as_ref()
    }

    pub fn set_normalizer(&mut self, state: NormalizerState) -> Result<()> {
        if state.channels() != self.config.channels {
            return Err(Error::InvalidArgument(format!(
                "normalizer has {} channels, rewards have {}",
                state.channels(),
                self.config.channels
            )));
        }
        self.normalizer = Some(state);
        Ok(())
    }

    /// Raw channel values in the fixed channel order.
    pub fn raw_rewards(&self, prompt_id: usize, seq: &TokenSequence) -> Result<Vec<f64>> {
        if prompt_id >= self.ground_truth.len() {
            return Err(Error::InvalidArgument(format!("prompt {prompt_id} has no ground-truth sequence")));
        }
        let mut adherence = 0.0;
        let mut quality = 0.0;
        for (i, &l) in self.config.lambda.iter().enumerate() {
            if l > 0.0 {
                let e = self.encoders.family(i).expect("checked at construction").embed_sequence(seq)?;
                adherence -= l * sq_dist(&self.prompt_embs[i][prompt_id], &e);
                quality -= l * sq_dist(&self.gt_embs[i][prompt_id], &e);
            }
        }
        let all = [adherence, quality, self.scorer.score(seq)];
        Ok(all[..self.config.channels].to_vec())
    }

    pub fn compute_reward_vector(&self, prompt_id: usize, seq: &TokenSequence) -> Result<RewardVector> {
        let norm = self
            .normalizer
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact("reward normalizer has not been fitted".into()))?;
        let raw = self.raw_rewards(prompt_id, seq)?;
        let normalized = norm.normalize_all(&raw);
        Ok(RewardVector { raw, normalized })
    }
}
