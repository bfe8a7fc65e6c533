//! Causal transformer decoder conditioned on a prompt embedding at position 0.

use rand::Rng;

use super::config::ModelConfig;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{kernels, ParamId, ParameterStore, Tape, Tensor, Var};

/// Prompt conditioning: a prompt id, an optional reward channel token and the
/// blend weight between the plain and token-augmented embeddings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PromptSpec {
    pub prompt_id: usize,
    /// Zero-based reward channel index.
    pub reward_token: Option<usize>,
    pub alpha: f64,
}

impl PromptSpec {
    pub fn plain(prompt_id: usize) -> Self {
        Self {
            prompt_id,
            reward_token: None,
            alpha: 0.0,
        }
    }

    pub fn with_token(prompt_id: usize, token: usize, alpha: f64) -> Self {
        Self {
            prompt_id,
            reward_token: Some(token),
            alpha,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderIds {
    prompt: ParamId,
    reward: ParamId,
    tokens: ParamId,
    positions: ParamId,
    layers: Vec<LayerIds>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Backbone plus a linear head of width `out_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    config: ModelConfig,
    vocab: Vocabulary,
    out_dim: usize,
    store: ParameterStore,
    ids: DecoderIds,
}

/// Tape handles for one forward pass.
struct Bound {
    vars: Vec<Option<Var>>,
}

impl Decoder {
    /// `head_std == 0` zero-initializes the output head.
    pub fn new<R: Rng>(config: ModelConfig, out_dim: usize, head_std: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::new(config.codebook_size)?;
        let d = config.d_model;
        let mut s = ParameterStore::new();
        let emb_std = 0.5;
        let prompt = s.add_uniform("prompt_embedding", config.prompts, d, emb_std, rng);
        let reward = s.add_uniform("reward_token_embedding", config.reward_tokens, d, 0.1, rng);
        let tokens = s.add_uniform("token_embedding", vocab.total(), d, emb_std, rng);
        let positions = s.add_uniform("position_embedding", config.max_len, d, 0.1, rng);
        let proj_std = 1.0 / (d as f64).sqrt();
        let resid_std = proj_std / (2.0 * config.layers as f64).sqrt();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |part: &str| format!("layer{l}.{part}");
            layers.push(LayerIds {
                ln1_gain: s.add_constant(&n("ln1.gain"), 1, d, 1.0),
                ln1_bias: s.add_constant(&n("ln1.bias"), 1, d, 0.0),
                wq: s.add_uniform(&n("attn.wq"), d, d, proj_std, rng),
                wk: s.add_uniform(&n("attn.wk"), d, d, proj_std, rng),
                wv: s.add_uniform(&n("attn.wv"), d, d, proj_std, rng),
                wo: s.add_uniform(&n("attn.wo"), d, d, resid_std, rng),
                ln2_gain: s.add_constant(&n("ln2.gain"), 1, d, 1.0),
                ln2_bias: s.add_constant(&n("ln2.bias"), 1, d, 0.0),
                w1: s.add_uniform(&n("ff.w1"), d, config.d_ff, proj_std, rng),
                b1: s.add_constant(&n("ff.b1"), 1, config.d_ff, 0.0),
                w2: s.add_uniform(&n("ff.w2"), config.d_ff, d, 1.0 / (config.d_ff as f64).sqrt() / (2.0 * config.layers as f64).sqrt(), rng),
                b2: s.add_constant(&n("ff.b2"), 1, d, 0.0),
            });
        }
        let lnf_gain = s.add_constant("final_ln.gain", 1, d, 1.0);
        let lnf_bias = s.add_constant("final_ln.bias", 1, d, 0.0);
        let head_w = s.add_uniform("head.weight", d, out_dim, head_std, rng);
        let head_b = s.add_constant("head.bias", 1, out_dim, 0.0);
        Ok(Self {
            config,
            vocab,
            out_dim,
            store: s,
            ids: DecoderIds {
                prompt,
                reward,
                tokens,
                positions,
                layers,
                lnf_gain,
                lnf_bias,
                head_w,
                head_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn head_bias_id(&self) -> ParamId {
        self.ids.head_b
    }

    pub fn head_weight_id(&self) -> ParamId {
        self.ids.head_w
    }

    fn bind(&self) -> Bound {
        Bound {
            vars: vec![None; self.store.specs().len()],
        }
    }

    fn p(&self, tape: &mut Tape, store: &ParameterStore, bound: &mut Bound, id: ParamId) -> Var {
        *bound.vars[id.index()].get_or_insert_with(|| tape.param(store, id))
    }

    fn check_prompt(&self, spec: &PromptSpec) -> Result<()> {
        if spec.prompt_id >= self.config.prompts {
            return Err(Error::InvalidArgument(format!(
                "unknown prompt id {} (have {})",
                spec.prompt_id, self.config.prompts
            )));
        }
        if let Some(k) = spec.reward_token {
            if k >= self.config.reward_tokens {
                return Err(Error::InvalidArgument(format!(
                    "unknown reward token {k} (have {})",
                    self.config.reward_tokens
                )));
            }
        }
        if !(0.0..=1.0).contains(&spec.alpha) {
            return Err(Error::InvalidArgument(format!("blend alpha {} outside [0, 1]", spec.alpha)));
        }
        Ok(())
    }

    /// `(1 − α)·f_t + α·f_{t_k}` with `f_{t_k} = f_t + v_k`; `f_t` alone when
    /// no reward token is given.
    pub fn embed_prompt_on(&self, tape: &mut Tape, spec: &PromptSpec) -> Result<Var> {
        self.embed_prompt_with(tape, &self.store, spec)
    }

    fn embed_prompt_with(&self, tape: &mut Tape, store: &ParameterStore, spec: &PromptSpec) -> Result<Var> {
        self.check_prompt(spec)?;
        let table = tape.param(store, self.ids.prompt);
        let plain = tape.gather_rows(table, &[spec.prompt_id])?;
        let Some(k) = spec.reward_token else {
            return Ok(plain);
        };
        let rtable = tape.param(store, self.ids.reward);
        let token = tape.gather_rows(rtable, &[k])?;
        let augmented = tape.add(plain, token)?;
        let a = tape.scale(plain, 1.0 - spec.alpha);
        let b = tape.scale(augmented, spec.alpha);
        tape.add(a, b)
    }

    pub fn embed_prompt(&self, spec: &PromptSpec) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.embed_prompt_on(&mut tape, spec)?;
        Ok(tape.value(v).clone())
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        if prefix.len() >= self.config.max_len {
            return Err(Error::InvalidSequence(format!(
                "prefix length {} must be below max_len {}",
                prefix.len(),
                self.config.max_len
            )));
        }
        if let Some(pos) = prefix.iter().position(|&t| !self.vocab.is_content(t)) {
            return Err(Error::InvalidSequence(format!(
                "prefix position {pos} holds non-codebook token {}",
                prefix[pos]
            )));
        }
        Ok(())
    }

    /// Head outputs for context `[prompt, prefix...]`: one row per position.
    pub fn forward_on(&self, tape: &mut Tape, prompt: Var, prefix: &[usize]) -> Result<Var> {
        self.forward_with(tape, &self.store, prompt, prefix)
    }

    /// Same as [`Self::forward_on`] but reading parameters from `store`, which
    /// must share this decoder's layout. Used by gradient checks.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParameterStore, prompt: Var, prefix: &[usize]) -> Result<Var> {
        self.check_prefix(prefix)?;
        if tape.value(prompt).shape() != [1, self.config.d_model] {
            return Err(Error::shape(
                "decoder",
                format!("prompt embedding {:?}, expected [1, {}]", tape.value(prompt).shape(), self.config.d_model),
            ));
        }
        let mut b = self.bind();
        let n = prefix.len() + 1;
        let mut x = if prefix.is_empty() {
            prompt
        } else {
            let table = self.p(tape, store, &mut b, self.ids.tokens);
            let toks = tape.gather_rows(table, prefix)?;
            tape.concat_rows(&[prompt, toks])?
        };
        let pos_table = self.p(tape, store, &mut b, self.ids.positions);
        let pos = tape.slice_rows(pos_table, 0, n)?;
        x = tape.add(x, pos)?;

        for layer in &self.ids.layers {
            let g1 = self.p(tape, store, &mut b, layer.ln1_gain);
            let b1 = self.p(tape, store, &mut b, layer.ln1_bias);
            let h = tape.layer_norm(x, g1, b1)?;
            let wq = self.p(tape, store, &mut b, layer.wq);
            let wk = self.p(tape, store, &mut b, layer.wk);
            let wv = self.p(tape, store, &mut b, layer.wv);
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let att = tape.causal_attention(q, k, v, self.config.heads)?;
            let wo = self.p(tape, store, &mut b, layer.wo);
            let o = tape.matmul(att, wo)?;
            x = tape.add(x, o)?;

            let g2 = self.p(tape, store, &mut b, layer.ln2_gain);
            let b2 = self.p(tape, store, &mut b, layer.ln2_bias);
            let h2 = tape.layer_norm(x, g2, b2)?;
            let w1 = self.p(tape, store, &mut b, layer.w1);
            let fb1 = self.p(tape, store, &mut b, layer.b1);
            let f = tape.matmul(h2, w1)?;
            let f = tape.add_row(f, fb1)?;
            let f = tape.tanh(f);
            let w2 = self.p(tape, store, &mut b, layer.w2);
            let fb2 = self.p(tape, store, &mut b, layer.b2);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, fb2)?;
            x = tape.add(x, f)?;
        }
        let gf = self.p(tape, store, &mut b, self.ids.lnf_gain);
        let bf = self.p(tape, store, &mut b, self.ids.lnf_bias);
        let h = tape.layer_norm(x, gf, bf)?;
        let hw = self.p(tape, store, &mut b, self.ids.head_w);
        let hb = self.p(tape, store, &mut b, self.ids.head_b);
        let out = tape.matmul(h, hw)?;
        tape.add_row(out, hb)
    }

    /// Forward pass with a prompt spec resolved against `store`.
    pub fn forward_spec_with(&self, tape: &mut Tape, store: &ParameterStore, spec: &PromptSpec, prefix: &[usize]) -> Result<Var> {
        let prompt = self.embed_prompt_with(tape, store, spec)?;
        self.forward_with(tape, store, prompt, prefix)
    }

    /// Constant-prompt forward pass returning the head output matrix.
    pub fn forward(&self, prompt: &Tensor, prefix: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = tape.constant(prompt.clone());
        let out = self.forward_on(&mut tape, p, prefix)?;
        Ok(tape.value(out).clone())
    }

    /// Starts an incremental decode with per-layer key/value caches.
    pub fn start_decode(&self, prompt: &Tensor) -> Result<DecodeState<'_>> {
        if prompt.shape() != [1, self.config.d_model] {
            return Err(Error::shape(
                "decoder",
                format!("prompt embedding {:?}", prompt.shape()),
            ));
        }
        Ok(DecodeState {
            decoder: self,
            keys: vec![Vec::new(); self.config.layers],
            values: vec![Vec::new(); self.config.layers],
            next_input: prompt.data().to_vec(),
            position: 0,
        })
    }
}

/// Key/value cache for one sequence being decoded token by token.
pub struct DecodeState<'a> {
    decoder: &'a Decoder,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    next_input: Vec<f64>,
    position: usize,
}

fn row_matmul(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    kernels::matmul_acc(x, w, &mut out, 1, x.len(), n);
    out
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl DecodeState<'_> {
    pub fn position(&self) -> usize {
        self.position
    }

    /// Head output for the current position. Call [`Self::push`] afterwards
    /// to feed the chosen token.
    pub fn step(&mut self) -> Result<Vec<f64>> {
        let dec = self.decoder;
        let cfg = &dec.config;
        if self.position >= cfg.max_len {
            return Err(Error::InvalidSequence("decode past max_len".into()));
        }
        let s = &dec.store;
        let d = cfg.d_model;
        let mut x = self.next_input.clone();
        add_assign(&mut x, &s.slice(dec.ids.positions)[self.position * d..(self.position + 1) * d]);
        let mut normalized = vec![0.0; d];
        let mut h = vec![0.0; d];
        for (l, layer) in dec.ids.layers.iter().enumerate() {
            kernels::layer_norm_row(&x, s.slice(layer.ln1_gain), s.slice(layer.ln1_bias), &mut normalized, &mut h);
            let q = row_matmul(&h, s.slice(layer.wq), d);
            let k = row_matmul(&h, s.slice(layer.wk), d);
            let v = row_matmul(&h, s.slice(layer.wv), d);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let hd = d / cfg.heads;
            let mut probs = vec![0.0; self.position + 1];
            let mut att = vec![0.0; d];
            for head in 0..cfg.heads {
                kernels::attend_row(&q, &self.keys[l], &self.values[l], d, head * hd, hd, self.position, &mut probs, &mut att);
            }
            let o = row_matmul(&att, s.slice(layer.wo), d);
            add_assign(&mut x, &o);
            kernels::layer_norm_row(&x, s.slice(layer.ln2_gain), s.slice(layer.ln2_bias), &mut normalized, &mut h);
            let mut f = row_matmul(&h, s.slice(layer.w1), cfg.d_ff);
            add_assign(&mut f, s.slice(layer.b1));
            f.iter_mut().for_each(|v| *v = v.tanh());
            let mut f2 = row_matmul(&f, s.slice(layer.w2), d);
            add_assign(&mut f2, s.slice(layer.b2));
            add_assign(&mut x, &f2);
        }
        kernels::layer_norm_row(&x, s.slice(dec.ids.lnf_gain), s.slice(dec.ids.lnf_bias), &mut normalized, &mut h);
        let mut out = row_matmul(&h, s.slice(dec.ids.head_w), dec.out_dim);
        add_assign(&mut out, s.slice(dec.ids.head_b));
        self.position += 1;
        Ok(out)
    }

    /// Feeds `token` as the input for the next position.
    pub fn push(&mut self, token: usize) -> Result<()> {
        let dec = self.decoder;
        if !dec.vocab.is_content(token) {
            return Err(Error::InvalidSequence(format!("cannot feed token {token}")));
        }
        let d = dec.config.d_model;
        self.next_input = dec.store.slice(dec.ids.tokens)[token * d..(token + 1) * d].to_vec();
        Ok(())
    }
}
