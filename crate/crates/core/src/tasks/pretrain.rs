use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoders::EncoderSet;
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, AdamWState, Tape, Tensor};
use crate::par;
use crate::policy::{Actor, PromptSpec, TokenSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the alignment term; 0 gives plain teacher-forced
    /// cross-entropy.
    pub w_align: f64,
    /// Batches per recorded loss point.
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
            w_align: 0.1,
            log_every: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    /// Mean batch loss over each window of `log_every` batches.
    pub loss_history: Vec<f64>,
}

/// Loss of one corpus sequence: summed next-token cross-entropy scaled by
/// `ce_scale`, plus `align_scale · Σ_f ‖E_f(expected tokens) − E_f(prompt)‖²`
/// over the available encoder families.
fn sequence_loss(
    actor: &Actor,
    encoders: Option<&EncoderSet>,
    prompt_id: usize,
    seq: &TokenSequence,
    ce_scale: f64,
    align_scale: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let spec = PromptSpec::plain(prompt_id);
    let prefix = &seq.tokens()[..seq.len() - 1];
    let logits = actor.decoder().forward_spec_with(&mut tape, actor.store(), &spec, prefix)?;
    let ce = tape.cross_entropy(logits, seq.tokens())?;
    let mut loss = tape.scale(ce, ce_scale * seq.len() as f64);
    if align_scale != 0.0 {
        if let Some(set) = encoders {
            let probs = tape.softmax_rows(logits);
            for fam in set.families.iter().flatten() {
                let target = tape.constant(Tensor::row(fam.embed_prompt(prompt_id)?));
                let soft = fam.soft_sequence_embedding_on(&mut tape, probs)?;
                let d = tape.squared_error(soft, target)?;
                let d = tape.scale(d, align_scale);
                loss = tape.add(loss, d)?;
            }
        }
    }
    let value = tape.value(loss).data()[0];
    let mut grads = vec![0.0; actor.store().len()];
    tape.backward(loss)?.accumulate_into(&mut grads);
    Ok((value, grads))
}

/// Teacher-forced pretraining on `(prompt_id, sequence)` pairs.
pub fn pretrain_actor<R: Rng>(
    actor: &mut Actor,
    corpus: &[(usize, TokenSequence)],
    encoders: Option<&EncoderSet>,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty pretraining corpus".into()));
    }
    if cfg.batch_size == 0 || cfg.log_every == 0 {
        return Err(Error::config("pretrain_batch_size", "batch size and log interval must be positive"));
    }
    let mut opt = AdamWState::new(
        AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        },
        actor.store(),
    );
    let mut report = PretrainReport::default();
    let mut window = Vec::with_capacity(cfg.log_every);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let tokens: usize = batch.iter().map(|&i| corpus[i].1.len()).sum();
            let ce_scale = 1.0 / tokens as f64;
            let align_scale = cfg.w_align / batch.len() as f64;
            let snapshot = &*actor;
            let results = par::map_slice(batch, |&i| {
                let (p, s) = &corpus[i];
                sequence_loss(snapshot, encoders, *p, s, ce_scale, align_scale)
            });
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (l, g) = r?;
                loss += l;
                grads.push(g);
            }
            let total = par::sum_buffers(actor.store().len(), grads);
            let store = actor.store_mut();
            store.zero_grads();
            store.accumulate_grads(&total)?;
            opt.step(store)?;
            window.push(loss);
            if window.len() == cfg.log_every {
                report.loss_history.push(window.iter().sum::<f64>() / window.len() as f64);
                window.clear();
            }
        }
    }
    Ok(report)
}

/// Fraction of teacher-forced steps whose argmax prediction equals the
/// target token.
pub fn next_token_accuracy(actor: &Actor, data: &[(usize, TokenSequence)]) -> Result<f64> {
    let per_seq = par::map_slice(data, |(p, s)| -> Result<(usize, usize)> {
        let rows = actor.step_logits(&PromptSpec::plain(*p), s)?;
        let hits = rows
            .iter()
            .zip(s.tokens())
            .filter(|(r, &t)| {
                let best = r
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                best == t
            })
            .count();
        Ok((hits, s.len()))
    });
    let (mut hits, mut total) = (0, 0);
    for r in per_seq {
        let (h, n) = r?;
        hits += h;
        total += n;
    }
    Ok(hits as f64 / total.max(1) as f64)
}
