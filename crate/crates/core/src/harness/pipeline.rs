//! Pipeline stages, each usable in memory or through the artifacts stored
//! in the run's output directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use crate::checkpoint::{hash_hex, Checkpoint};
use crate::encoders::{
    train_encoders, train_preference_scorer, EncoderFamily, EncoderSet, FeatureTransform, PreferenceScorer,
};
use crate::error::{Error, Result};
use crate::numerics::AdamWState;
use crate::par;
use crate::policy::{Actor, Critic, PromptSpec, Reference};
use crate::rewards::{fit_normalizer, NormalizerState, RewardContext};
use crate::rng::{stream, Stage};
use crate::tasks::{io, oracle_eval, pretrain_actor, Dataset, OracleScores, PretrainReport, SyntheticTask};
use crate::trainer::{
    ablate_tokens, csv_header, csv_preamble, train_iteration, ConditionSummary, IterationMetrics, TrainerState,
};

pub fn build_task(cfg: &RunConfig) -> Result<SyntheticTask> {
    SyntheticTask::new(cfg.task.clone(), &mut stream(cfg.seed, Stage::Task, 0, 0))
}

pub fn generate_data(cfg: &RunConfig, task: &SyntheticTask) -> Result<Dataset> {
    task.generate_dataset(cfg.data, &mut stream(cfg.seed, Stage::Data, 0, 0))
}

pub fn fit_encoders(cfg: &RunConfig, data: &Dataset) -> Result<EncoderSet> {
    train_encoders(
        &data.paired,
        cfg.task.prompts,
        cfg.task.codebook_size,
        &cfg.encoder,
        &mut stream(cfg.seed, Stage::Encoders, 0, 0),
    )
}

fn feature_transform(cfg: &RunConfig) -> Result<FeatureTransform> {
    FeatureTransform::new(
        cfg.task.codebook_size,
        cfg.scorer.feature_dim,
        &mut stream(cfg.seed, Stage::Scorer, 1, 0),
    )
}

pub fn fit_scorer(cfg: &RunConfig, data: &Dataset) -> Result<PreferenceScorer> {
    train_preference_scorer(
        &data.preferences,
        feature_transform(cfg)?,
        &cfg.scorer,
        &mut stream(cfg.seed, Stage::Scorer, 0, 0),
    )
}

pub fn init_actor(cfg: &RunConfig) -> Result<Actor> {
    Actor::new(cfg.model_config(), &mut stream(cfg.seed, Stage::Init, 0, 0))
}

pub fn init_critic(cfg: &RunConfig) -> Result<Critic> {
    Critic::new(cfg.model_config(), &mut stream(cfg.seed, Stage::Init, 1, 0))
}

pub fn pretrain(cfg: &RunConfig, data: &Dataset, encoders: Option<&EncoderSet>) -> Result<(Actor, PretrainReport)> {
    let mut actor = init_actor(cfg)?;
    let report = pretrain_actor(
        &mut actor,
        &data.corpus,
        encoders,
        &cfg.pretrain,
        &mut stream(cfg.seed, Stage::Pretrain, 0, 0),
    )?;
    Ok((actor, report))
}

pub fn reward_context(
    cfg: &RunConfig,
    task: &SyntheticTask,
    encoders: EncoderSet,
    scorer: PreferenceScorer,
) -> Result<RewardContext> {
    RewardContext::new(cfg.reward.clone(), encoders, scorer, task.canonicals().to_vec())
}

/// Fits the normalizer on raw rewards of `warmup_rollouts` samples from the
/// pretrained policy, cycling through prompts and reward tokens.
pub fn fit_warmup_normalizer(cfg: &RunConfig, actor: &Actor, ctx: &RewardContext) -> Result<NormalizerState> {
    let p = cfg.task.prompts;
    let k = ctx.channels();
    let alpha = cfg.ppo.alpha_start;
    let jobs: Vec<usize> = (0..cfg.warmup_rollouts).collect();
    let rows = par::map_slice(&jobs, |&j| -> Result<Vec<f64>> {
        let prompt = j % p;
        let spec = PromptSpec::with_token(prompt, (j / p) % k, alpha);
        let mut rng = stream(cfg.seed, Stage::Warmup, j as u64, 0);
        let sample = actor.sample_sequence(&spec, cfg.ppo.temperature, &mut rng)?;
        ctx.raw_rewards(prompt, &sample.sequence)
    });
    let mut per_channel = vec![Vec::with_capacity(jobs.len()); k];
    for r in rows {
        for (c, v) in per_channel.iter_mut().zip(r?) {
            c.push(v);
        }
    }
    fit_normalizer(&per_channel)
}

/// Everything fixed before RL: task, data, reward models and the pretrained
/// policy, with the normalizer fitted.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub task: SyntheticTask,
    pub data: Dataset,
    pub ctx: RewardContext,
    pub pretrained: Actor,
    pub pretrain_report: PretrainReport,
}

impl Prepared {
    /// Runs every stage up to the normalizer in memory.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let task = build_task(cfg)?;
        let data = generate_data(cfg, &task)?;
        let encoders = fit_encoders(cfg, &data)?;
        let scorer = fit_scorer(cfg, &data)?;
        let (pretrained, pretrain_report) = pretrain(cfg, &data, Some(&encoders))?;
        let mut ctx = reward_context(cfg, &task, encoders, scorer)?;
        let norm = fit_warmup_normalizer(cfg, &pretrained, &ctx)?;
        ctx.set_normalizer(norm)?;
        Ok(Self {
            task,
            data,
            ctx,
            pretrained,
            pretrain_report,
        })
    }

    /// Fresh RL state: actor and reference copied from the pretrained
    /// policy, new critic and optimizers.
    pub fn trainer_state(&self, cfg: &RunConfig) -> Result<TrainerState> {
        Ok(TrainerState::new(self.pretrained.clone(), init_critic(cfg)?, &cfg.ppo_config()))
    }

    /// Runs RL from `state` up to `cfg.ppo.iterations`, calling `after` on
    /// every iteration.
    pub fn train(
        &self,
        cfg: &RunConfig,
        state: &mut TrainerState,
        mut after: impl FnMut(&TrainerState, &IterationMetrics) -> Result<()>,
    ) -> Result<Vec<IterationMetrics>> {
        let ppo = cfg.ppo_config();
        ppo.validate()?;
        let mut out = Vec::new();
        while state.iteration < ppo.iterations as u64 {
            let m = train_iteration(state, &self.ctx, &ppo, cfg.task.prompts, cfg.seed)?;
            after(state, &m)?;
            out.push(m);
        }
        Ok(out)
    }

    /// Per-token and plain-prompt summaries of `actor`.
    pub fn ablate(&self, cfg: &RunConfig, actor: &Actor, reference: &Reference) -> Result<Vec<ConditionSummary>> {
        ablate_tokens(
            actor,
            reference,
            &self.ctx,
            cfg.task.prompts,
            cfg.ppo.alpha_end,
            cfg.eval_samples,
            cfg.eval_temperature,
            cfg.seed,
        )
    }

    /// Hidden-oracle scores of `actor` under each reward token and the plain
    /// prompt, in the order of [`Prepared::ablate`].
    pub fn oracle(&self, cfg: &RunConfig, actor: &Actor) -> Result<Vec<OracleScores>> {
        let alpha = cfg.ppo.alpha_end;
        (0..self.ctx.channels())
            .map(Some)
            .chain([None])
            .map(|token| {
                oracle_eval(actor, &self.task, cfg.eval_samples, cfg.eval_temperature, cfg.seed, |p| match token {
                    Some(k) => PromptSpec::with_token(p, k, alpha),
                    None => PromptSpec::plain(p),
                })
            })
            .collect()
    }
}

/// File layout of a run's output directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub dir: PathBuf,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })
}

fn join_f64(xs: &[f64]) -> String {
    xs.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(";")
}

fn parse_f64s(s: &str) -> Result<Vec<f64>> {
    s.split(';')
        .map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("bad real {v:?}"))))
        .collect()
}

fn save_opt(ck: &mut Checkpoint, name: &str, opt: &AdamWState) {
    ck.add_values(&format!("{name}/m"), 1, opt.first_moment.len(), &opt.first_moment);
    ck.add_values(&format!("{name}/v"), 1, opt.second_moment.len(), &opt.second_moment);
    ck.set_meta(&format!("{name}.step"), opt.step);
}

fn restore_opt(ck: &Checkpoint, name: &str, opt: &mut AdamWState) -> Result<()> {
    let m = ck.values(&format!("{name}/m"))?;
    let v = ck.values(&format!("{name}/v"))?;
    if m.len() != opt.first_moment.len() || v.len() != opt.second_moment.len() {
        return Err(Error::Checkpoint(format!("optimizer state {name} has the wrong size")));
    }
    opt.first_moment = m;
    opt.second_moment = v;
    opt.step = ck.meta_parse(&format!("{name}.step"))?;
    Ok(())
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn save_dataset(&self, data: &Dataset) -> Result<()> {
        fs::write(self.path("paired.tsv"), io::write_paired(&data.paired))?;
        fs::write(self.path("preferences.tsv"), io::write_preferences(&data.preferences))?;
        fs::write(self.path("corpus.tsv"), io::write_corpus(&data.corpus))?;
        Ok(())
    }

    pub fn load_dataset(&self, task: &SyntheticTask) -> Result<Dataset> {
        let (vocab, max) = (task.vocab(), task.max_sequence_len());
        Ok(Dataset {
            paired: io::read_paired(&read_text(&self.path("paired.tsv"))?, vocab, max)?,
            preferences: io::read_preferences(&read_text(&self.path("preferences.tsv"))?, vocab, max)?,
            corpus: io::read_corpus(&read_text(&self.path("corpus.tsv"))?, vocab, max)?,
        })
    }

    fn write_store(&self, file: &str, cfg: &RunConfig, fill: impl FnOnce(&mut Checkpoint)) -> Result<()> {
        let mut ck = Checkpoint::new(cfg.hash());
        fill(&mut ck);
        ck.write(&self.path(file))
    }

    fn read(&self, file: &str) -> Result<Checkpoint> {
        Checkpoint::read(&self.path(file), None)
    }

    pub fn save_encoders(&self, cfg: &RunConfig, set: &EncoderSet) -> Result<()> {
        self.write_store("encoders.ckpt", cfg, |ck| {
            for (i, fam) in set.families.iter().enumerate() {
                ck.set_meta(&format!("family{i}"), u8::from(fam.is_some()));
                if let Some(f) = fam {
                    ck.add_store(&format!("family{i}"), f.store());
                }
            }
        })
    }

    pub fn load_encoders(&self, cfg: &RunConfig) -> Result<EncoderSet> {
        let ck = self.read("encoders.ckpt")?;
        let mut families = Vec::new();
        for (i, kind) in EncoderSet::KINDS.into_iter().enumerate() {
            if ck.meta_parse::<u8>(&format!("family{i}"))? == 0 {
                families.push(None);
                continue;
            }
            let mut rng = stream(cfg.seed, Stage::Encoders, 0, 0);
            let mut fam = EncoderFamily::new(kind, cfg.task.prompts, cfg.task.codebook_size, &cfg.encoder, &mut rng)?;
            ck.restore_store(&format!("family{i}"), fam.store_mut())?;
            families.push(Some(fam));
        }
        Ok(EncoderSet { families })
    }

    pub fn save_scorer(&self, cfg: &RunConfig, scorer: &PreferenceScorer) -> Result<()> {
        self.write_store("scorer.ckpt", cfg, |ck| {
            let t = scorer.transform();
            ck.add_values("projection", 1, t.projection().len(), t.projection());
            ck.add_store("scorer", scorer.store());
        })
    }

    pub fn load_scorer(&self, cfg: &RunConfig) -> Result<PreferenceScorer> {
        let ck = self.read("scorer.ckpt")?;
        let t = FeatureTransform::from_projection(cfg.task.codebook_size, cfg.scorer.feature_dim, ck.values("projection")?)?;
        let mut s = PreferenceScorer::new(t, cfg.scorer.hidden, &mut stream(cfg.seed, Stage::Scorer, 0, 0))?;
        ck.restore_store("scorer", s.store_mut())?;
        Ok(s)
    }

    pub fn save_actor(&self, cfg: &RunConfig, file: &str, actor: &Actor) -> Result<()> {
        self.write_store(file, cfg, |ck| ck.add_store("actor", actor.store()))
    }

    pub fn load_actor(&self, cfg: &RunConfig, file: &str) -> Result<Actor> {
        let ck = self.read(file)?;
        let mut actor = init_actor(cfg)?;
        ck.restore_store("actor", actor.store_mut())?;
        Ok(actor)
    }

    pub fn save_normalizer(&self, cfg: &RunConfig, n: &NormalizerState) -> Result<()> {
        self.write_store("normalizer.ckpt", cfg, |ck| {
            ck.set_meta("min", join_f64(n.min()));
            ck.set_meta("max", join_f64(n.max()));
        })
    }

    pub fn load_normalizer(&self) -> Result<NormalizerState> {
        let ck = self.read("normalizer.ckpt")?;
        NormalizerState::new(parse_f64s(ck.meta("min")?)?, parse_f64s(ck.meta("max")?)?)
    }

    /// Reward context from the stored encoders, scorer and normalizer.
    pub fn load_context(&self, cfg: &RunConfig, task: &SyntheticTask) -> Result<RewardContext> {
        let mut ctx = reward_context(cfg, task, self.load_encoders(cfg)?, self.load_scorer(cfg)?)?;
        ctx.set_normalizer(self.load_normalizer()?)?;
        Ok(ctx)
    }

    /// Task, dataset, reward context and pretrained policy from disk.
    pub fn load_prepared(&self, cfg: &RunConfig) -> Result<Prepared> {
        let task = build_task(cfg)?;
        let data = self.load_dataset(&task)?;
        let ctx = self.load_context(cfg, &task)?;
        let pretrained = self.load_actor(cfg, "pretrained.ckpt")?;
        Ok(Prepared {
            task,
            data,
            ctx,
            pretrained,
            pretrain_report: PretrainReport::default(),
        })
    }

    pub fn rl_checkpoint(&self) -> PathBuf {
        self.path("rl.ckpt")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path("metrics.csv")
    }
}

/// Serializes the full RL state. Normalizer bounds go in the metadata so a
/// checkpoint is self-describing.
pub fn save_trainer(path: &Path, cfg: &RunConfig, state: &TrainerState, normalizer: Option<&NormalizerState>) -> Result<()> {
    let mut ck = Checkpoint::new(cfg.hash());
    ck.set_meta("iteration", state.iteration);
    if let Some(n) = normalizer {
        ck.set_meta("normalizer_min", join_f64(n.min()));
        ck.set_meta("normalizer_max", join_f64(n.max()));
    }
    ck.add_store("actor", state.actor.store());
    ck.add_store("critic", state.critic.store());
    ck.add_store("reference", state.reference.store());
    save_opt(&mut ck, "actor_opt", &state.actor_opt);
    save_opt(&mut ck, "critic_opt", &state.critic_opt);
    ck.write(path)
}

/// Restores a state written by [`save_trainer`] for the same config.
pub fn load_trainer(path: &Path, cfg: &RunConfig) -> Result<TrainerState> {
    let ck = Checkpoint::read(path, Some(&cfg.hash()))?;
    let mut actor = init_actor(cfg)?;
    ck.restore_store("actor", actor.store_mut())?;
    let mut reference_src = init_actor(cfg)?;
    ck.restore_store("reference", reference_src.store_mut())?;
    let mut critic = init_critic(cfg)?;
    ck.restore_store("critic", critic.store_mut())?;
    let mut state = TrainerState::new(actor, critic, &cfg.ppo_config());
    state.reference = reference_src.clone_frozen();
    restore_opt(&ck, "actor_opt", &mut state.actor_opt)?;
    restore_opt(&ck, "critic_opt", &mut state.critic_opt)?;
    state.iteration = ck.meta_parse("iteration")?;
    Ok(state)
}

/// Appends metric rows to a CSV, writing preamble and header on creation.
pub struct MetricsWriter {
    file: fs::File,
}

impl MetricsWriter {
    /// Starts a new file, or continues `path` keeping only rows before
    /// `resume_from` when given.
    pub fn open(path: &Path, cfg: &RunConfig, normalizer: Option<&NormalizerState>, resume_from: Option<u64>) -> Result<Self> {
        let head = [
            csv_preamble(&hash_hex(&cfg.hash()), normalizer),
            csv_header(cfg.reward.channels, true),
        ];
        let mut lines: Vec<String> = head.to_vec();
        if let Some(next) = resume_from {
            if let Ok(old) = fs::read_to_string(path) {
                lines.extend(
                    old.lines()
                        .skip(2)
                        .filter(|l| l.split(',').next().and_then(|v| v.parse::<u64>().ok()).is_some_and(|i| i < next))
                        .map(String::from),
                );
            }
        }
        let mut file = fs::File::create(path)?;
        for l in lines {
            writeln!(file, "{l}")?;
        }
        file.flush()?;
        Ok(Self { file })
    }

    pub fn append(&mut self, m: &IterationMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_row(true))?;
        self.file.flush()?;
        Ok(())
    }
}
