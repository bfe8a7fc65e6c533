use rand::seq::SliceRandom;
use rand::Rng;

use super::losses::{contrastive_loss_on, infonce_loss_on};
use super::PairedExample;
use crate::error::{Error, Result};
use crate::numerics::{kernels, AdamWConfig, AdamWState, ParamId, ParameterStore, Tape, Var};
use crate::policy::TokenSequence;

/// Which loss a family of encoders was trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Margin-based contrastive loss on unnormalized embeddings.
    Margin,
    /// Symmetric InfoNCE on L2-normalized embeddings with learnable τ.
    InfoNce,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Margin => "margin",
            LossKind::InfoNce => "infonce",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Width of the prompt and token embedding tables.
    pub embed_dim: usize,
    pub hidden: usize,
    /// Output embedding width `d_e`.
    pub out_dim: usize,
    pub margin: f64,
    pub tau_init: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            out_dim: 32,
            margin: 1.0,
            tau_init: 0.07,
            epochs: 40,
            batch_size: 32,
            lr: 3e-3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.out_dim == 0 {
            return Err(Error::config("encoder_dims", "must be positive"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::config("margin", "must be positive"));
        }
        if !(self.tau_init > 0.0) {
            return Err(Error::config("tau_init", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("encoder_batch_size", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Tower {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// A prompt encoder and a sequence encoder sharing an output space.
/// InfoNCE families report L2-normalized embeddings, matching the space
/// their loss compares in.
///
/// Prompt: embedding lookup → Linear → tanh → Linear. Sequence: token
/// embeddings mean-pooled over every position (End included) → Linear →
/// tanh → Linear.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderFamily {
    kind: LossKind,
    store: ParameterStore,
    prompt_table: ParamId,
    token_table: ParamId,
    prompt_tower: Tower,
    seq_tower: Tower,
    log_tau: ParamId,
    margin: f64,
    prompts: usize,
    total_tokens: usize,
}

impl EncoderFamily {
    pub fn new<R: Rng>(kind: LossKind, prompts: usize, codebook_size: usize, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let total_tokens = codebook_size + 2;
        let mut s = ParameterStore::new();
        let prompt_table = s.add_uniform("prompt_table", prompts, cfg.embed_dim, 1.0, rng);
        let token_table = s.add_uniform("token_table", total_tokens, cfg.embed_dim, 1.0, rng);
        let mut tower = |s: &mut ParameterStore, name: &str| Tower {
            w1: s.add_uniform(&format!("{name}.w1"), cfg.embed_dim, cfg.hidden, 1.0 / (cfg.embed_dim as f64).sqrt(), rng),
            b1: s.add_constant(&format!("{name}.b1"), 1, cfg.hidden, 0.0),
            w2: s.add_uniform(&format!("{name}.w2"), cfg.hidden, cfg.out_dim, 1.0 / (cfg.hidden as f64).sqrt(), rng),
            b2: s.add_constant(&format!("{name}.b2"), 1, cfg.out_dim, 0.0),
        };
        let prompt_tower = tower(&mut s, "prompt_ff");
        let seq_tower = tower(&mut s, "sequence_ff");
        let log_tau = s.add_constant("log_tau", 1, 1, cfg.tau_init.ln());
        Ok(Self {
            kind,
            store: s,
            prompt_table,
            token_table,
            prompt_tower,
            seq_tower,
            log_tau,
            margin: cfg.margin,
            prompts,
            total_tokens,
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn tau(&self) -> f64 {
        self.store.slice(self.log_tau)[0].exp()
    }

    pub fn out_dim(&self) -> usize {
        self.store.spec(self.prompt_tower.b2).cols
    }

    fn tower_on(&self, tape: &mut Tape, store: &ParameterStore, t: &Tower, x: Var) -> Result<Var> {
        let w1 = tape.param(store, t.w1);
        let b1 = tape.param(store, t.b1);
        let w2 = tape.param(store, t.w2);
        let b2 = tape.param(store, t.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }

    fn tower_plain(&self, t: &Tower, x: &[f64]) -> Vec<f64> {
        let s = &self.store;
        let hidden = s.spec(t.b1).cols;
        let out_dim = s.spec(t.b2).cols;
        let mut h = s.slice(t.b1).to_vec();
        kernels::matmul_acc(x, s.slice(t.w1), &mut h, 1, x.len(), hidden);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let mut o = s.slice(t.b2).to_vec();
        kernels::matmul_acc(&h, s.slice(t.w2), &mut o, 1, hidden, out_dim);
        o
    }

    fn check_prompt(&self, id: usize) -> Result<()> {
        if id >= self.prompts {
            return Err(Error::InvalidArgument(format!("unknown prompt id {id}")));
        }
        Ok(())
    }

    /// `B × d_e` prompt embeddings.
    pub fn prompt_embedding_on(&self, tape: &mut Tape, store: &ParameterStore, ids: &[usize]) -> Result<Var> {
        for &id in ids {
            self.check_prompt(id)?;
        }
        let table = tape.param(store, self.prompt_table);
        let x = tape.gather_rows(table, ids)?;
        self.tower_on(tape, store, &self.prompt_tower, x)
    }

    /// `B × d_e` sequence embeddings.
    pub fn sequence_embedding_on(&self, tape: &mut Tape, store: &ParameterStore, seqs: &[&TokenSequence]) -> Result<Var> {
        let table = tape.param(store, self.token_table);
        let mut pooled = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let rows = tape.gather_rows(table, seq.tokens())?;
            pooled.push(tape.mean_rows(rows)?);
        }
        let x = tape.concat_rows(&pooled)?;
        self.tower_on(tape, store, &self.seq_tower, x)
    }

    /// Embedding of the expected token distribution: `probs` is `n × total`
    /// with one row per position; the pooled input is `mean_i probs_i · E`.
    pub fn soft_sequence_embedding_on(&self, tape: &mut Tape, probs: Var) -> Result<Var> {
        let frozen = {
            let mut s = self.store.clone();
            s.freeze();
            s
        };
        let table = tape.param(&frozen, self.token_table);
        let mixed = tape.matmul(probs, table)?;
        let pooled = tape.mean_rows(mixed)?;
        let out = self.tower_on(tape, &frozen, &self.seq_tower, pooled)?;
        Ok(match self.kind {
            LossKind::Margin => out,
            LossKind::InfoNce => tape.l2_normalize_rows(out),
        })
    }

    fn finish(&self, mut v: Vec<f64>) -> Vec<f64> {
        if self.kind == LossKind::InfoNce {
            let n = kernels::dot(&v, &v).sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    pub fn embed_prompt(&self, id: usize) -> Result<Vec<f64>> {
        self.check_prompt(id)?;
        let d = self.store.spec(self.prompt_table).cols;
        let row = &self.store.slice(self.prompt_table)[id * d..(id + 1) * d];
        Ok(self.finish(self.tower_plain(&self.prompt_tower, row)))
    }

    pub fn embed_sequence(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let d = self.store.spec(self.token_table).cols;
        let table = self.store.slice(self.token_table);
        let mut pooled = vec![0.0; d];
        for &t in seq.tokens() {
            if t >= self.total_tokens {
                return Err(Error::InvalidSequence(format!("token {t} outside vocabulary")));
            }
            for (p, v) in pooled.iter_mut().zip(&table[t * d..(t + 1) * d]) {
                *p += v;
            }
        }
        let n = seq.len() as f64;
        pooled.iter_mut().for_each(|v| *v /= n);
        Ok(self.finish(self.tower_plain(&self.seq_tower, &pooled)))
    }

    fn loss_on(&self, tape: &mut Tape, store: &ParameterStore, batch: &[&PairedExample]) -> Result<Var> {
        let ids: Vec<usize> = batch.iter().map(|e| e.prompt_id).collect();
        let seqs: Vec<&TokenSequence> = batch.iter().map(|e| &e.sequence).collect();
        let ft = self.prompt_embedding_on(tape, store, &ids)?;
        let fm = self.sequence_embedding_on(tape, store, &seqs)?;
        match self.kind {
            LossKind::Margin => {
                let labels: Vec<bool> = batch.iter().map(|e| e.matched).collect();
                contrastive_loss_on(tape, ft, fm, &labels, self.margin)
            }
            LossKind::InfoNce => {
                let lt = tape.param(store, self.log_tau);
                infonce_loss_on(tape, ft, fm, lt)
            }
        }
    }
}

impl EncoderFamily {
    /// Batch loss under this family's objective, reading parameters from
    /// `store` (which must share this family's layout).
    pub fn batch_loss_on(&self, tape: &mut Tape, store: &ParameterStore, batch: &[&PairedExample]) -> Result<Var> {
        self.loss_on(tape, store, batch)
    }
}

/// The two trained encoder families. A family is absent when its training
/// data was degenerate.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSet {
    pub families: Vec<Option<EncoderFamily>>,
}

impl EncoderSet {
    pub const KINDS: [LossKind; 2] = [LossKind::Margin, LossKind::InfoNce];

    pub fn family(&self, i: usize) -> Option<&EncoderFamily> {
        self.families.get(i).and_then(Option::as_ref)
    }
}

/// Trains one family per loss kind. Margin batches are drawn from all
/// examples; InfoNCE batches hold one positive per distinct prompt.
pub fn train_encoders<R: Rng>(
    examples: &[PairedExample],
    prompts: usize,
    codebook_size: usize,
    cfg: &EncoderConfig,
    rng: &mut R,
) -> Result<EncoderSet> {
    cfg.validate()?;
    let positives: Vec<&PairedExample> = examples.iter().filter(|e| e.matched).collect();
    let has_neg = examples.iter().any(|e| !e.matched);
    let mut families = Vec::with_capacity(2);
    for kind in EncoderSet::KINDS {
        let mut fam = EncoderFamily::new(kind, prompts, codebook_size, cfg, rng)?;
        let trained = match kind {
            LossKind::Margin if positives.is_empty() || !has_neg => {
                log::warn!("paired data has a single label; skipping the margin encoder family");
                None
            }
            LossKind::InfoNce if positives.is_empty() => {
                log::warn!("paired data has no positives; skipping the InfoNCE encoder family");
                None
            }
            LossKind::Margin => {
                let all: Vec<&PairedExample> = examples.iter().collect();
                fit(&mut fam, cfg, rng, |rng| {
                    let mut order = all.clone();
                    order.shuffle(rng);
                    order.chunks(cfg.batch_size).map(<[_]>::to_vec).collect()
                })?;
                Some(fam)
            }
            LossKind::InfoNce => {
                let mut by_prompt: Vec<Vec<&PairedExample>> = vec![Vec::new(); prompts];
                for e in &positives {
                    by_prompt[e.prompt_id].push(e);
                }
                let present: Vec<usize> = (0..prompts).filter(|&p| !by_prompt[p].is_empty()).collect();
                let steps = positives.len().div_ceil(present.len().min(cfg.batch_size).max(1));
                fit(&mut fam, cfg, rng, |rng| {
                    (0..steps)
                        .map(|_| {
                            let mut ps = present.clone();
                            ps.shuffle(rng);
                            ps.truncate(cfg.batch_size);
                            ps.iter().map(|&p| *by_prompt[p].choose(rng).expect("non-empty")).collect()
                        })
                        .collect()
                })?;
                Some(fam)
            }
        };
        families.push(trained);
    }
    Ok(EncoderSet { families })
}

fn fit<'a, R: Rng>(
    fam: &mut EncoderFamily,
    cfg: &EncoderConfig,
    rng: &mut R,
    mut batches: impl FnMut(&mut R) -> Vec<Vec<&'a PairedExample>>,
) -> Result<()> {
    let mut opt = AdamWState::new(
        AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        },
        &fam.store,
    );
    for _ in 0..cfg.epochs {
        for batch in batches(rng) {
            let mut tape = Tape::new();
            let loss = fam.loss_on(&mut tape, &fam.store, &batch)?;
            let grads = tape.backward(loss)?;
            fam.store.zero_grads();
            grads.accumulate_into(fam.store.grads_mut());
            opt.step(&mut fam.store)?;
        }
    }
    Ok(())
}

/// Fraction of prompts whose nearest sequence embedding (squared distance)
/// belongs to one of their own positives. `candidates` pairs a source prompt
/// with a sequence.
pub fn retrieval_top1(fam: &EncoderFamily, candidates: &[(usize, TokenSequence)]) -> Result<f64> {
    let embs: Vec<Vec<f64>> = candidates.iter().map(|(_, s)| fam.embed_sequence(s)).collect::<Result<_>>()?;
    let mut prompts: Vec<usize> = candidates.iter().map(|(p, _)| *p).collect();
    prompts.sort_unstable();
    prompts.dedup();
    let mut hits = 0;
    for &p in &prompts {
        let q = fam.embed_prompt(p)?;
        let best = embs
            .iter()
            .enumerate()
            .map(|(i, e)| (i, sq_dist(&q, e)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("non-empty candidates");
        if candidates[best].0 == p {
            hits += 1;
        }
    }
    Ok(hits as f64 / prompts.len().max(1) as f64)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
