use rand::seq::SliceRandom;
use rand::Rng;

use super::features::FeatureTransform;
use super::losses::preference_loss_on;
use super::PreferencePair;
use crate::error::{Error, Result};
use crate::numerics::{kernels, AdamWConfig, AdamWState, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::policy::TokenSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            feature_dim: 48,
            hidden: 32,
            epochs: 60,
            batch_size: 64,
            lr: 5e-3,
        }
    }
}

/// `C(g(seq))`: the fixed feature transform followed by a one-hidden-layer
/// scalar network.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceScorer {
    transform: FeatureTransform,
    store: ParameterStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl PreferenceScorer {
    pub fn new<R: Rng>(transform: FeatureTransform, hidden: usize, rng: &mut R) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::config("scorer_hidden", "must be positive"));
        }
        let d = transform.dim();
        let mut s = ParameterStore::new();
        let w1 = s.add_uniform("scorer.w1", d, hidden, 1.0 / (d as f64).sqrt(), rng);
        let b1 = s.add_constant("scorer.b1", 1, hidden, 0.0);
        let w2 = s.add_uniform("scorer.w2", hidden, 1, 1.0 / (hidden as f64).sqrt(), rng);
        let b2 = s.add_constant("scorer.b2", 1, 1, 0.0);
        Ok(Self {
            transform,
            store: s,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// A scorer whose output layer is zero, so every sequence scores 0.
    pub fn zeroed<R: Rng>(transform: FeatureTransform, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut s = Self::new(transform, hidden, rng)?;
        let w2 = s.w2;
        s.store.slice_mut(w2).iter_mut().for_each(|v| *v = 0.0);
        Ok(s)
    }

    pub fn transform(&self) -> &FeatureTransform {
        &self.transform
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn output_bias_id(&self) -> ParamId {
        self.b2
    }

    pub fn score_features(&self, x: &[f64]) -> f64 {
        let s = &self.store;
        let hidden = s.spec(self.b1).cols;
        let mut h = s.slice(self.b1).to_vec();
        kernels::matmul_acc(x, s.slice(self.w1), &mut h, 1, x.len(), hidden);
        h.iter_mut().for_each(|v| *v = v.tanh());
        kernels::dot(&h, s.slice(self.w2)) + s.slice(self.b2)[0]
    }

    pub fn score(&self, seq: &TokenSequence) -> f64 {
        self.score_features(&self.transform.apply(seq))
    }

    /// Scores for a `B × d_g` feature matrix as a `B × 1` column.
    pub fn scores_on(&self, tape: &mut Tape, store: &ParameterStore, features: Var) -> Result<Var> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(features, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }

    /// Mean preference loss over `pairs` with parameters read from `store`.
    pub fn pair_loss_on(&self, tape: &mut Tape, store: &ParameterStore, pairs: &[&PreferencePair]) -> Result<Var> {
        let (better, worse) = self.feature_batches(pairs)?;
        let fb = tape.constant(better);
        let fw = tape.constant(worse);
        let sb = self.scores_on(tape, store, fb)?;
        let sw = self.scores_on(tape, store, fw)?;
        preference_loss_on(tape, sb, sw)
    }

    fn feature_batches(&self, pairs: &[&PreferencePair]) -> Result<(Tensor, Tensor)> {
        let d = self.transform.dim();
        let mut b = Vec::with_capacity(pairs.len() * d);
        let mut w = Vec::with_capacity(pairs.len() * d);
        for p in pairs {
            b.extend(self.transform.apply(&p.better));
            w.extend(self.transform.apply(&p.worse));
        }
        Ok((Tensor::new(pairs.len(), d, b)?, Tensor::new(pairs.len(), d, w)?))
    }

    /// Fraction of pairs with `score(better) > score(worse)`.
    pub fn pairwise_accuracy(&self, pairs: &[PreferencePair]) -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        let hits = pairs.iter().filter(|p| self.score(&p.better) > self.score(&p.worse)).count();
        hits as f64 / pairs.len() as f64
    }
}

/// Minimizes the mean preference loss with shuffled minibatches.
pub fn train_preference_scorer<R: Rng>(
    pairs: &[PreferencePair],
    transform: FeatureTransform,
    cfg: &ScorerConfig,
    rng: &mut R,
) -> Result<PreferenceScorer> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no preference pairs".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("scorer_batch_size", "must be positive"));
    }
    let mut scorer = PreferenceScorer::new(transform, cfg.hidden, rng)?;
    let mut opt = AdamWState::new(
        AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        },
        &scorer.store,
    );
    let mut order: Vec<&PreferencePair> = pairs.iter().collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let loss = scorer.pair_loss_on(&mut tape, &scorer.store, batch)?;
            let grads = tape.backward(loss)?;
            scorer.store.zero_grads();
            grads.accumulate_into(scorer.store.grads_mut());
            opt.step(&mut scorer.store)?;
        }
    }
    Ok(scorer)
}
