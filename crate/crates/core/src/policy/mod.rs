//! Actor, critic and frozen reference over a token codebook.
//!
//! Both networks share the [`Decoder`] backbone: position 0 of the context
//! holds the prompt embedding, position `i > 0` holds token `i − 1`, and
//! output row `i` predicts token `i`. The critic reads its value for step `t`
//! from the same row, i.e. from the state before token `t` is emitted.

mod config;
mod decoder;
mod vocab;

pub use config::ModelConfig;
pub use decoder::{DecodeState, Decoder, PromptSpec};
pub use vocab::{TokenSequence, Vocabulary};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{kernels, ParameterStore, Tape, Var};

/// A sampled sequence together with its per-step log-probabilities at
/// temperature 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sequence: TokenSequence,
    pub old_logprobs: Vec<f64>,
    /// True when End was appended because the length limit was reached.
    pub forced_end: bool,
}

/// Autoregressive policy over `total` symbols. A frozen clone serves as the
/// reference model.
#[derive(Clone, Debug, PartialEq)]
pub struct Actor {
    decoder: Decoder,
}

/// The reference model is an actor whose parameters never receive gradients.
pub type Reference = Actor;

impl Actor {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let total = config.codebook_size + 2;
        let head_std = 1.0 / (config.d_model as f64).sqrt();
        Ok(Self {
            decoder: Decoder::new(config, total, head_std, rng)?,
        })
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Decoder {
        &mut self.decoder
    }

    pub fn store(&self) -> &ParameterStore {
        self.decoder.store()
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        self.decoder.store_mut()
    }

    pub fn config(&self) -> &ModelConfig {
        self.decoder.config()
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.decoder.vocab()
    }

    /// Deep copy with gradients disabled.
    pub fn clone_frozen(&self) -> Reference {
        let mut copy = self.clone();
        copy.decoder.store_mut().freeze();
        copy
    }

    pub fn is_frozen(&self) -> bool {
        !self.store().is_trainable()
    }

    /// Logits matrix with one row per context position.
    pub fn actor_logits(&self, spec: &PromptSpec, prefix: &[usize]) -> Result<Vec<Vec<f64>>> {
        let prompt = self.decoder.embed_prompt(spec)?;
        let out = self.decoder.forward(&prompt, prefix)?;
        Ok((0..out.rows()).map(|r| out.row_slice(r).to_vec()).collect())
    }

    /// Teacher-forced logits rows for every step of `seq`, computed with the
    /// incremental decoder used for sampling.
    pub fn step_logits(&self, spec: &PromptSpec, seq: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        self.check_sequence(seq)?;
        let prompt = self.decoder.embed_prompt(spec)?;
        let mut state = self.decoder.start_decode(&prompt)?;
        let mut rows = Vec::with_capacity(seq.len());
        for (t, &tok) in seq.tokens().iter().enumerate() {
            rows.push(state.step()?);
            if t + 1 < seq.len() {
                state.push(tok)?;
            }
        }
        Ok(rows)
    }

    /// Per-step log-probability rows over the whole vocabulary.
    pub fn step_log_distributions(&self, spec: &PromptSpec, seq: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        let rows = self.step_logits(spec, seq)?;
        Ok(rows
            .into_iter()
            .map(|r| {
                let mut out = vec![0.0; r.len()];
                kernels::log_softmax_row(&r, &mut out);
                out
            })
            .collect())
    }

    /// `log π(s_t | c, S_<t)` for every step, End included.
    pub fn sequence_logprob(&self, spec: &PromptSpec, seq: &TokenSequence) -> Result<Vec<f64>> {
        let rows = self.step_log_distributions(spec, seq)?;
        Ok(rows.iter().zip(seq.tokens()).map(|(r, &t)| r[t]).collect())
    }

    /// Per-step log-probabilities recorded on `tape` as an `n × 1` column.
    pub fn logprobs_on(&self, tape: &mut Tape, spec: &PromptSpec, seq: &TokenSequence) -> Result<Var> {
        self.check_sequence(seq)?;
        let prefix = &seq.tokens()[..seq.len() - 1];
        let logits = self.decoder.forward_spec_with(tape, self.store(), spec, prefix)?;
        let logp = tape.log_softmax_rows(logits);
        tape.pick_per_row(logp, seq.tokens())
    }

    /// Draws a sequence from `softmax(logits / temperature)`, never emitting
    /// Pad. End is forced at the last position.
    pub fn sample_sequence<R: Rng>(&self, spec: &PromptSpec, temperature: f64, rng: &mut R) -> Result<Sample> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
        }
        self.decode(spec, |logits| {
            let weights = tempered_weights(logits, temperature);
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return i;
                }
                u -= w;
            }
            weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
        })
    }

    /// Argmax decoding over non-Pad symbols.
    pub fn greedy(&self, spec: &PromptSpec) -> Result<Sample> {
        self.decode(spec, argmax)
    }

    fn decode(&self, spec: &PromptSpec, mut choose: impl FnMut(&[f64]) -> usize) -> Result<Sample> {
        let vocab = *self.vocab();
        let max_len = self.config().max_len;
        let prompt = self.decoder.embed_prompt(spec)?;
        let mut state = self.decoder.start_decode(&prompt)?;
        let mut tokens = Vec::with_capacity(max_len);
        let mut logprobs = Vec::with_capacity(max_len);
        let mut forced_end = false;
        let mut logp = vec![0.0; vocab.total()];
        loop {
            let logits = state.step()?;
            kernels::log_softmax_row(&logits, &mut logp);
            let last = tokens.len() + 1 == max_len;
            let tok = if last {
                vocab.end_id()
            } else {
                choose(&logits[..vocab.pad_id()])
            };
            if last {
                forced_end = true;
            }
            tokens.push(tok);
            logprobs.push(logp[tok]);
            if tok == vocab.end_id() {
                break;
            }
            state.push(tok)?;
        }
        let sequence = TokenSequence::new(tokens, &vocab, max_len)?;
        Ok(Sample {
            sequence,
            old_logprobs: logprobs,
            forced_end,
        })
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        TokenSequence::new(seq.tokens().to_vec(), self.vocab(), self.config().max_len).map(|_| ())
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Unnormalized tempered probabilities, max-shifted so the argmax has weight 1.
fn tempered_weights(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    logits.iter().map(|&l| ((l - m) / temperature).exp()).collect()
}

/// Value network with the actor's backbone shape and a scalar head.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    decoder: Decoder,
}

impl Critic {
    /// The scalar head starts at zero, so initial values are exactly 0.
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            decoder: Decoder::new(config, 1, 0.0, rng)?,
        })
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn store(&self) -> &ParameterStore {
        self.decoder.store()
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        self.decoder.store_mut()
    }

    /// One value per step of `seq`.
    pub fn critic_values(&self, spec: &PromptSpec, seq: &TokenSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = self.values_on(&mut tape, spec, seq)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Values recorded on `tape` as an `n × 1` column.
    pub fn values_on(&self, tape: &mut Tape, spec: &PromptSpec, seq: &TokenSequence) -> Result<Var> {
        let cfg = self.decoder.config();
        TokenSequence::new(seq.tokens().to_vec(), self.decoder.vocab(), cfg.max_len)?;
        let prefix = &seq.tokens()[..seq.len() - 1];
        self.decoder.forward_spec_with(tape, self.store(), spec, prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            codebook_size: 8,
            prompts: 3,
            reward_tokens: 2,
            d_model: 16,
            heads: 2,
            layers: 2,
            d_ff: 24,
            max_len: 10,
        }
    }

    fn actor(seed: u64) -> Actor {
        Actor::new(small(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn empty_prefix_gives_one_row() {
        let a = actor(1);
        let rows = a.actor_logits(&PromptSpec::plain(0), &[]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].len(), 10);
    }

    #[test]
    fn appending_keeps_earlier_rows() {
        let a = actor(2);
        let spec = PromptSpec::plain(1);
        let short = a.actor_logits(&spec, &[3, 1]).unwrap();
        let long = a.actor_logits(&spec, &[3, 1, 7]).unwrap();
        assert_eq!(&long[..3], &short[..]);
    }

    #[test]
    fn incremental_rows_match_full_forward() {
        let a = actor(3);
        let spec = PromptSpec::with_token(2, 1, 0.5);
        let seq = TokenSequence::from_content(&[1, 2, 3, 0, 5], a.vocab(), 10).unwrap();
        let full = a.actor_logits(&spec, &seq.tokens()[..seq.len() - 1]).unwrap();
        let inc = a.step_logits(&spec, &seq).unwrap();
        assert_eq!(full, inc);
    }

    #[test]
    fn rescoring_matches_sampling_exactly() {
        let a = actor(4);
        let spec = PromptSpec::plain(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let s = a.sample_sequence(&spec, 1.5, &mut rng).unwrap();
            assert_eq!(a.sequence_logprob(&spec, &s.sequence).unwrap(), s.old_logprobs);
        }
    }

    #[test]
    fn tape_logprobs_match_incremental() {
        let a = actor(5);
        let spec = PromptSpec::plain(2);
        let seq = TokenSequence::from_content(&[4, 4, 6], a.vocab(), 10).unwrap();
        let mut tape = Tape::new();
        let v = a.logprobs_on(&mut tape, &spec, &seq).unwrap();
        assert_eq!(tape.value(v).data(), &a.sequence_logprob(&spec, &seq).unwrap()[..]);
    }

    #[test]
    fn rejects_bad_prompt_and_token() {
        let a = actor(6);
        assert!(a.decoder().embed_prompt(&PromptSpec::plain(3)).is_err());
        assert!(a.decoder().embed_prompt(&PromptSpec::with_token(0, 2, 0.5)).is_err());
        assert!(a.actor_logits(&PromptSpec::plain(0), &[8]).is_err());
    }

    #[test]
    fn zero_head_critic_is_zero() {
        let c = Critic::new(small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let seq = TokenSequence::from_content(&[1, 2], &Vocabulary::new(8).unwrap(), 10).unwrap();
        assert_eq!(c.critic_values(&PromptSpec::plain(0), &seq).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn frozen_clone_scores_identically() {
        let a = actor(7);
        let r = a.clone_frozen();
        assert!(r.is_frozen() && !a.is_frozen());
        let seq = TokenSequence::from_content(&[0, 7], a.vocab(), 10).unwrap();
        let spec = PromptSpec::plain(1);
        assert_eq!(a.sequence_logprob(&spec, &seq).unwrap(), r.sequence_logprob(&spec, &seq).unwrap());
    }
}
