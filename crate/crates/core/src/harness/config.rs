use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{config_hash, ConfigHash};
use crate::encoders::{EncoderConfig, ScorerConfig};
use crate::error::{Error, Result};
use crate::policy::ModelConfig;
use crate::rewards::RewardConfig;
use crate::tasks::{DatasetSizes, PretrainConfig, TaskConfig};
use crate::trainer::{Mode, PpoConfig};

/// A value that can appear on the right of `key=value`.
trait ConfigValue: Sized {
    const TYPE: &'static str;
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty => $name:literal),*) => {$(
        impl ConfigValue for $t {
            const TYPE: &'static str = $name;
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize => "unsigned integer", u64 => "unsigned integer");

impl ConfigValue for f64 {
    const TYPE: &'static str = "real";
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| !v.is_nan())
    }
    fn render(&self) -> String {
        // `{:?}` is the shortest representation that parses back exactly.
        format!("{self:?}")
    }
}

impl ConfigValue for Option<f64> {
    const TYPE: &'static str = "real or `none`";
    fn parse(s: &str) -> Option<Self> {
        if s == "none" {
            Some(None)
        } else {
            <f64 as ConfigValue>::parse(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "none".into(), |v| v.render())
    }
}

impl ConfigValue for PathBuf {
    const TYPE: &'static str = "path";
    fn parse(s: &str) -> Option<Self> {
        (!s.is_empty()).then(|| PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for Mode {
    const TYPE: &'static str = "`pareto` or `weighted-sum`";
    fn parse(s: &str) -> Option<Self> {
        Mode::parse(s)
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

/// Every setting of a pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskConfig,
    pub data: DatasetSizes,
    /// Decoder shape; vocabulary, prompt and reward-token counts are taken
    /// from the task and reward settings.
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub scorer: ScorerConfig,
    pub pretrain: PretrainConfig,
    pub reward: RewardConfig,
    /// PPO settings; `groups` always equals the number of reward channels.
    pub ppo: PpoConfig,
    /// Pretrained-policy samples used to fit the reward normalizer.
    pub warmup_rollouts: usize,
    /// Iterations between RL checkpoints, 0 for the final one only.
    pub checkpoint_every: usize,
    /// Evaluation samples per prompt and condition.
    pub eval_samples: usize,
    pub eval_temperature: f64,
}

impl Default for RunConfig {
    /// Desk-scale settings: a small decoder and learning rates sized for a
    /// few hundred PPO iterations.
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            task: TaskConfig::default(),
            data: DatasetSizes {
                paired: 2000,
                preferences: 2000,
                corpus: 1000,
            },
            model: ModelConfig {
                d_model: 32,
                heads: 2,
                layers: 2,
                d_ff: 64,
                max_len: 24,
                ..ModelConfig::default()
            },
            encoder: EncoderConfig::default(),
            scorer: ScorerConfig::default(),
            pretrain: PretrainConfig {
                epochs: 8,
                ..PretrainConfig::default()
            },
            reward: RewardConfig::default(),
            ppo: PpoConfig {
                lr: 3e-4,
                critic_lr: 1e-3,
                temperature: 1.0,
                ..PpoConfig::default()
            },
            warmup_rollouts: 512,
            checkpoint_every: 50,
            eval_samples: 32,
            eval_temperature: 1.0,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal : $ty:ty = |$c:ident| $place:expr, $doc:literal;)*) => {
        /// `(key, type, description)` for every accepted key, in dump order.
        pub const KEYS: &[(&str, &str, &str)] = &[$(($key, <$ty as ConfigValue>::TYPE, $doc)),*];

        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $($key => {
                        let $c = &mut *self;
                        let v = <$ty as ConfigValue>::parse(value).ok_or_else(|| {
                            Error::config($key, format!("expected {}, got {value:?}", <$ty as ConfigValue>::TYPE))
                        })?;
                        $place = v;
                        Ok(())
                    })*
                    other => Err(Error::config(other, "unknown key")),
                }
            }

            /// `(key, value)` for every key.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::with_capacity(KEYS.len());
                $({
                    let $c = self;
                    out.push(($key, ConfigValue::render(&$place)));
                })*
                out
            }
        }
    };
}

config_keys! {
    "seed": u64 = |c| c.seed, "seed of every random stream";
    "out_dir": PathBuf = |c| c.out_dir, "artifact directory";
    "prompts": usize = |c| c.task.prompts, "number of prompts";
    "codebook_size": usize = |c| c.task.codebook_size, "content tokens";
    "canonical_min_len": usize = |c| c.task.min_len, "shortest canonical sequence";
    "canonical_max_len": usize = |c| c.task.max_len, "longest canonical sequence";
    "noise": f64 = |c| c.task.noise, "substitution probability of positives and corpus";
    "accent_tokens": usize = |c| c.task.accent_tokens, "per-prompt substitution alphabet";
    "walk_step": usize = |c| c.task.walk_step, "largest canonical random-walk step";
    "smoothness_weight": f64 = |c| c.task.smoothness_weight, "hidden preference smoothness weight";
    "paired_examples": usize = |c| c.data.paired, "paired prompt/sequence examples";
    "preference_pairs": usize = |c| c.data.preferences, "preference pairs";
    "corpus_size": usize = |c| c.data.corpus, "pretraining sequences";
    "d_model": usize = |c| c.model.d_model, "decoder width";
    "heads": usize = |c| c.model.heads, "attention heads";
    "layers": usize = |c| c.model.layers, "decoder blocks";
    "d_ff": usize = |c| c.model.d_ff, "feed-forward width";
    "max_len": usize = |c| c.model.max_len, "longest generated sequence, End included";
    "encoder_embed_dim": usize = |c| c.encoder.embed_dim, "encoder embedding width";
    "encoder_hidden": usize = |c| c.encoder.hidden, "encoder hidden width";
    "encoder_out_dim": usize = |c| c.encoder.out_dim, "shared embedding width";
    "margin": f64 = |c| c.encoder.margin, "margin of the contrastive loss";
    "tau_init": f64 = |c| c.encoder.tau_init, "initial InfoNCE temperature";
    "encoder_epochs": usize = |c| c.encoder.epochs, "encoder training epochs";
    "encoder_batch_size": usize = |c| c.encoder.batch_size, "encoder minibatch";
    "encoder_lr": f64 = |c| c.encoder.lr, "encoder learning rate";
    "scorer_feature_dim": usize = |c| c.scorer.feature_dim, "feature transform width";
    "scorer_hidden": usize = |c| c.scorer.hidden, "scorer hidden width";
    "scorer_epochs": usize = |c| c.scorer.epochs, "scorer training epochs";
    "scorer_batch_size": usize = |c| c.scorer.batch_size, "scorer minibatch";
    "scorer_lr": f64 = |c| c.scorer.lr, "scorer learning rate";
    "pretrain_epochs": usize = |c| c.pretrain.epochs, "pretraining epochs";
    "pretrain_batch_size": usize = |c| c.pretrain.batch_size, "pretraining minibatch";
    "pretrain_lr": f64 = |c| c.pretrain.lr, "pretraining learning rate";
    "w_align": f64 = |c| c.pretrain.w_align, "weight of the alignment loss";
    "channels": usize = |c| c.reward.channels, "reward channels (2 or 3)";
    "lambda_margin": f64 = |c| c.reward.lambda[0], "weight of the margin-trained encoders";
    "lambda_infonce": f64 = |c| c.reward.lambda[1], "weight of the InfoNCE-trained encoders";
    "clip_eps": f64 = |c| c.ppo.clip_eps, "PPO clip range";
    "beta": f64 = |c| c.ppo.beta, "KL penalty coefficient";
    "ppo_epochs": usize = |c| c.ppo.ppo_epochs, "passes over each rollout batch";
    "minibatch": usize = |c| c.ppo.minibatch, "sequences per optimizer step";
    "lr": f64 = |c| c.ppo.lr, "actor learning rate";
    "critic_lr": f64 = |c| c.ppo.critic_lr, "critic learning rate";
    "gamma": f64 = |c| c.ppo.gamma, "discount";
    "samples_per_group": usize = |c| c.ppo.samples_per_group, "sequences per reward token";
    "iterations": usize = |c| c.ppo.iterations, "PPO iterations";
    "temperature": f64 = |c| c.ppo.temperature, "rollout temperature";
    "value_coef": f64 = |c| c.ppo.value_coef, "critic loss coefficient";
    "alpha_start": f64 = |c| c.ppo.alpha_start, "reward-token blend weight at the first iteration";
    "alpha_end": f64 = |c| c.ppo.alpha_end, "reward-token blend weight at the last iteration";
    "max_grad_norm": Option<f64> = |c| c.ppo.max_grad_norm, "gradient clipping norm";
    "mode": Mode = |c| c.ppo.mode, "objective";
    "warmup_rollouts": usize = |c| c.warmup_rollouts, "samples used to fit the normalizer";
    "checkpoint_every": usize = |c| c.checkpoint_every, "iterations between checkpoints";
    "eval_samples": usize = |c| c.eval_samples, "evaluation samples per prompt";
    "eval_temperature": f64 = |c| c.eval_temperature, "evaluation sampling temperature";
}

impl RunConfig {
    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected key=value"))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides, then validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::config(o, "expected key=value"))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Reference listing of every key with its type, default and meaning.
    pub fn reference() -> String {
        let defaults = Self::default().entries();
        let mut s = String::new();
        for ((key, ty, doc), (_, value)) in KEYS.iter().zip(defaults) {
            let _ = writeln!(s, "# {doc} ({ty})\n{key}={value}");
        }
        s
    }

    /// Hash of every setting except the output directory.
    pub fn hash(&self) -> ConfigHash {
        let canonical: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| *k != "out_dir")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        config_hash(&canonical)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            codebook_size: self.task.codebook_size,
            prompts: self.task.prompts,
            reward_tokens: self.reward.channels,
            ..self.model.clone()
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            groups: self.reward.channels,
            ..self.ppo.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model_config().validate()?;
        if self.model.max_len < self.task.max_len + 1 {
            return Err(Error::config("max_len", "must fit the longest canonical sequence plus End"));
        }
        let p = self.task.prompts;
        for (k, n) in [
            ("paired_examples", self.data.paired),
            ("preference_pairs", self.data.preferences),
            ("corpus_size", self.data.corpus),
        ] {
            if n < p {
                return Err(Error::config(k, "must be at least the number of prompts"));
            }
        }
        self.encoder.validate()?;
        let positive = |k: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(k, "must be positive"))
            }
        };
        if self.scorer.feature_dim <= crate::encoders::DIFF_STATS || self.scorer.hidden == 0 {
            return Err(Error::config("scorer_feature_dim", "feature and hidden widths too small"));
        }
        if self.scorer.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::config("pretrain_batch_size", "batch sizes must be positive"));
        }
        positive("scorer_lr", self.scorer.lr)?;
        positive("pretrain_lr", self.pretrain.lr)?;
        positive("encoder_lr", self.encoder.lr)?;
        positive("eval_temperature", self.eval_temperature)?;
        if !(self.pretrain.w_align >= 0.0 && self.pretrain.w_align.is_finite()) {
            return Err(Error::config("w_align", "must be a finite non-negative real"));
        }
        self.reward.validate()?;
        if self.reward.lambda.len() != 2 {
            return Err(Error::config("lambda_margin", "exactly two encoder weights are expected"));
        }
        self.ppo_config().validate()?;
        if self.warmup_rollouts == 0 {
            return Err(Error::config("warmup_rollouts", "must be positive"));
        }
        if self.eval_samples == 0 {
            return Err(Error::config("eval_samples", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["beta=0.37", "mode=weighted-sum", "max_grad_norm=none", "lr=3.3e-4"]).unwrap();
        let back = RunConfig::parse(&cfg.dump()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.dump(), cfg.dump());
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn rejects_bad_input() {
        let msg = RunConfig::parse("clip_eps=1.5").unwrap_err().to_string();
        assert!(msg.contains("clip_eps"), "{msg}");
        let msg = RunConfig::parse("nonsense=1").unwrap_err().to_string();
        assert!(msg.contains("nonsense") && msg.contains("unknown"), "{msg}");
        let msg = RunConfig::parse("heads=two").unwrap_err().to_string();
        assert!(msg.contains("heads") && msg.contains("unsigned integer"), "{msg}");
        assert!(RunConfig::parse("just words").is_err());
    }

    #[test]
    fn reference_parses_to_defaults() {
        assert_eq!(RunConfig::parse(&RunConfig::reference()).unwrap(), RunConfig::default());
    }

    #[test]
    fn hash_ignores_out_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
