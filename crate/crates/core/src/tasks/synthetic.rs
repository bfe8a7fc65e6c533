use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoders::{PairedExample, PreferencePair};
use crate::error::{Error, Result};
use crate::policy::{TokenSequence, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub prompts: usize,
    pub codebook_size: usize,
    pub min_len: usize,
    /// Longest canonical content length (End excluded).
    pub max_len: usize,
    /// Per-token substitution probability for positives and the corpus.
    pub noise: f64,
    /// Size of each prompt's substitution alphabet for positives.
    pub accent_tokens: usize,
    /// Largest step of the canonical random walk.
    pub walk_step: usize,
    /// Weight of the smoothness bonus in the hidden preference.
    pub smoothness_weight: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            prompts: 8,
            codebook_size: 32,
            min_len: 12,
            max_len: 20,
            noise: 0.1,
            accent_tokens: 4,
            walk_step: 3,
            smoothness_weight: 4.0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompts < 2 {
            return Err(Error::config("prompts", "need at least two prompts"));
        }
        if self.codebook_size < 2 {
            return Err(Error::config("codebook_size", "need at least two tokens"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("canonical_min_len", "must satisfy 1 <= min <= max"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("noise", "must lie in [0, 1]"));
        }
        if self.accent_tokens == 0 || self.walk_step == 0 {
            return Err(Error::config("accent_tokens", "accent set and walk step must be positive"));
        }
        Ok(())
    }
}

/// Prompts, one canonical sequence per prompt and a hidden preference
/// function, all fixed by the task seed.
///
/// Canonical sequences are bounded random walks over the codebook. The hidden
/// preference is the mean of per-token weights over the content plus a
/// bonus for small steps between consecutive tokens, so it partly agrees
/// with the canonical sequences (which are smooth) and partly pulls away
/// from them (toward high-weight tokens and repeats).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    config: TaskConfig,
    vocab: Vocabulary,
    canonical: Vec<TokenSequence>,
    accents: Vec<Vec<usize>>,
    token_weights: Vec<f64>,
}

/// Sizes of the generated dataset parts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSizes {
    pub paired: usize,
    pub preferences: usize,
    pub corpus: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Dataset {
    pub paired: Vec<PairedExample>,
    pub preferences: Vec<PreferencePair>,
    pub corpus: Vec<(usize, TokenSequence)>,
}

impl SyntheticTask {
    pub fn new<R: Rng>(config: TaskConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::new(config.codebook_size)?;
        let cap = config.max_len + 1;
        let v = config.codebook_size as i64;
        let step = config.walk_step as i64;
        let mut canonical = Vec::with_capacity(config.prompts);
        while canonical.len() < config.prompts {
            let len = rng.gen_range(config.min_len..=config.max_len);
            let mut cur = rng.gen_range(0..v);
            let mut content = Vec::with_capacity(len);
            for _ in 0..len {
                content.push(cur as usize);
                let mut d = 0;
                while d == 0 {
                    d = rng.gen_range(-step..=step);
                }
                cur += d;
                if cur < 0 || cur >= v {
                    cur -= 2 * d;
                }
                cur = cur.clamp(0, v - 1);
            }
            let seq = TokenSequence::from_content(&content, &vocab, cap)?;
            if !canonical.contains(&seq) {
                canonical.push(seq);
            }
        }
        // Accent sets are disjoint while the codebook has room, so an accent
        // token identifies its prompt.
        let a = config.accent_tokens.min(config.codebook_size);
        let mut pool: Vec<usize> = Vec::new();
        let accents = (0..config.prompts)
            .map(|_| {
                if pool.len() < a {
                    pool = (0..config.codebook_size).collect();
                    pool.shuffle(rng);
                }
                pool.split_off(pool.len() - a)
            })
            .collect();
        let token_weights = (0..config.codebook_size).map(|_| rng.gen_range(-0.5..0.5)).collect();
        Ok(Self {
            config,
            vocab,
            canonical,
            accents,
            token_weights,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn prompts(&self) -> usize {
        self.config.prompts
    }

    /// Longest sequence the task produces, End included.
    pub fn max_sequence_len(&self) -> usize {
        self.config.max_len + 1
    }

    pub fn canonical(&self, prompt_id: usize) -> Result<&TokenSequence> {
        self.canonical
            .get(prompt_id)
            .ok_or_else(|| Error::InvalidArgument(format!("prompt {prompt_id} has no ground-truth sequence")))
    }

    pub fn canonicals(&self) -> &[TokenSequence] {
        &self.canonical
    }

    pub fn accents(&self, prompt_id: usize) -> &[usize] {
        &self.accents[prompt_id]
    }

    /// Hidden preference score: mean token weight over the content minus
    /// `smoothness_weight · mean|Δ| / V`.
    pub fn preference(&self, seq: &TokenSequence) -> f64 {
        let c = seq.content();
        if c.is_empty() {
            return 0.0;
        }
        let w = c.iter().map(|&t| self.token_weights[t]).sum::<f64>() / c.len() as f64;
        let rough = if c.len() > 1 {
            c.windows(2).map(|p| (p[1] as f64 - p[0] as f64).abs()).sum::<f64>() / (c.len() - 1) as f64
        } else {
            0.0
        };
        w - self.config.smoothness_weight * rough / self.config.codebook_size as f64
    }

    /// Canonical sequence with each token replaced, with probability `p`, by
    /// a draw from `alphabet` (the whole codebook when `None`).
    pub fn noisy_copy<R: Rng>(&self, prompt_id: usize, p: f64, alphabet: Option<&[usize]>, rng: &mut R) -> Result<TokenSequence> {
        let base = self.canonical(prompt_id)?;
        let content: Vec<usize> = base
            .content()
            .iter()
            .map(|&t| {
                if rng.gen_bool(p) {
                    match alphabet {
                        Some(a) => *a.choose(rng).expect("non-empty alphabet"),
                        None => rng.gen_range(0..self.config.codebook_size),
                    }
                } else {
                    t
                }
            })
            .collect();
        TokenSequence::from_content(&content, &self.vocab, self.max_sequence_len())
    }

    fn positive<R: Rng>(&self, prompt_id: usize, rng: &mut R) -> Result<TokenSequence> {
        let accents = self.accents[prompt_id].clone();
        self.noisy_copy(prompt_id, self.config.noise, Some(&accents), rng)
    }

    fn random_walk<R: Rng>(&self, rng: &mut R) -> Result<TokenSequence> {
        let len = rng.gen_range(self.config.min_len..=self.config.max_len);
        let v = self.config.codebook_size as i64;
        let step = rng.gen_range(0..=self.config.walk_step as i64 * 2);
        let mut cur = rng.gen_range(0..v);
        let content: Vec<usize> = (0..len)
            .map(|_| {
                let t = cur as usize;
                cur = (cur + rng.gen_range(-step..=step)).clamp(0, v - 1);
                t
            })
            .collect();
        TokenSequence::from_content(&content, &self.vocab, self.max_sequence_len())
    }

    fn uniform_sequence<R: Rng>(&self, rng: &mut R) -> Result<TokenSequence> {
        let len = rng.gen_range(self.config.min_len..=self.config.max_len);
        let content: Vec<usize> = (0..len).map(|_| rng.gen_range(0..self.config.codebook_size)).collect();
        TokenSequence::from_content(&content, &self.vocab, self.max_sequence_len())
    }

    /// A candidate for preference labelling: a noisy canonical, a random walk
    /// or a uniform sequence.
    fn preference_candidate<R: Rng>(&self, prompt_id: usize, rng: &mut R) -> Result<TokenSequence> {
        match rng.gen_range(0..4) {
            0 | 1 => {
                let p = rng.gen_range(0.0..0.6);
                self.noisy_copy(prompt_id, p, None, rng)
            }
            2 => self.random_walk(rng),
            _ => self.uniform_sequence(rng),
        }
    }

    /// Positives are accent-noised canonicals, negatives pair a prompt with
    /// another prompt's positive; preference pairs are labelled by the hidden
    /// preference; the corpus holds uniformly noised canonicals.
    pub fn generate_dataset<R: Rng>(&self, sizes: DatasetSizes, rng: &mut R) -> Result<Dataset> {
        let p = self.config.prompts;
        for (name, n) in [("paired", sizes.paired), ("preferences", sizes.preferences), ("corpus", sizes.corpus)] {
            if n < p {
                return Err(Error::InvalidArgument(format!("{name} size {n} is below the prompt count {p}")));
            }
        }
        let mut paired = Vec::with_capacity(sizes.paired);
        let mut positives: Vec<Vec<TokenSequence>> = vec![Vec::new(); p];
        for i in 0..sizes.paired {
            let prompt_id = i % p;
            if (i / p) % 2 == 0 {
                let seq = self.positive(prompt_id, rng)?;
                positives[prompt_id].push(seq.clone());
                paired.push(PairedExample {
                    prompt_id,
                    sequence: seq,
                    matched: true,
                });
            } else {
                let other = (prompt_id + rng.gen_range(1..p)) % p;
                let seq = self.positive(other, rng)?;
                if positives[prompt_id].contains(&seq) || &seq == self.canonical(prompt_id)? {
                    continue;
                }
                paired.push(PairedExample {
                    prompt_id,
                    sequence: seq,
                    matched: false,
                });
            }
        }

        let mut preferences = Vec::with_capacity(sizes.preferences);
        while preferences.len() < sizes.preferences {
            let prompt_id = preferences.len() % p;
            let a = self.preference_candidate(prompt_id, rng)?;
            let b = self.preference_candidate(prompt_id, rng)?;
            let (sa, sb) = (self.preference(&a), self.preference(&b));
            if a == b || sa == sb {
                continue;
            }
            let (better, worse) = if sa > sb { (a, b) } else { (b, a) };
            preferences.push(PreferencePair {
                prompt_id,
                better,
                worse,
            });
        }

        let corpus = (0..sizes.corpus)
            .map(|i| Ok((i % p, self.noisy_copy(i % p, self.config.noise, None, rng)?)))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            paired,
            preferences,
            corpus,
        })
    }
}
