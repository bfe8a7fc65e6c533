//! Command-line front end. Every command reads the run config, runs one
//! pipeline stage against the output directory and exits nonzero with a
//! single diagnostic line on failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::RunConfig;
use super::pipeline::{
    build_task, fit_encoders, fit_scorer, fit_warmup_normalizer, generate_data, load_trainer, pretrain,
    reward_context, save_trainer, MetricsWriter, Workspace,
};
use crate::encoders::LossKind;
use crate::error::{Error, Result};
use crate::pareto::non_dominated_set;
use crate::policy::{Actor, Reference};
use crate::rewards::CHANNEL_NAMES;
use crate::tasks::{next_token_accuracy, OracleScores};
use crate::trainer::ConditionSummary;

#[derive(Debug, Parser)]
#[command(name = "pareto-rl", version, about = "Multi-reward PPO with Pareto-filtered groups")]
pub struct Cli {
    /// key=value config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set beta=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate paired examples, preference pairs and the pretraining corpus.
    GenData,
    /// Train both encoder families on the paired examples.
    TrainEncoders,
    /// Train the preference scorer on the preference pairs.
    TrainScorer,
    /// Teacher-forced pretraining of the policy.
    Pretrain,
    /// Fit the reward normalizer on pretrained-policy samples.
    FitNormalizer,
    /// PPO fine-tuning; writes metrics.csv and rl.ckpt.
    TrainRl {
        /// Continue from rl.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Oracle and learned-reward scores of the pretrained and trained policy.
    Evaluate,
    /// Print the non-dominated rows of a whitespace-separated reward matrix.
    ParetoDemo {
        file: PathBuf,
    },
    /// Per-channel mean rewards under each reward token and the plain prompt.
    AblateTokens,
    /// Print every config key with its type and default.
    ConfigReference,
    /// Run every stage from gen-data to evaluate.
    All,
}

/// Exit status for an error: 2 bad config, 3 missing artifact or bad
/// checkpoint, 4 numerical abort, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingArtifact(_) | Error::Checkpoint(_) => 3,
        Error::Numerical(_) | Error::NonFiniteGradient(_) => 4,
        _ => 1,
    }
}

/// One-line diagnostic naming the failure class.
pub fn diagnostic(e: &Error) -> String {
    let class = match e {
        Error::Config { .. } => "bad config",
        Error::MissingArtifact(_) => "missing checkpoint or artifact",
        Error::Checkpoint(_) => "unreadable checkpoint",
        Error::Numerical(_) | Error::NonFiniteGradient(_) => "numerical abort",
        _ => "error",
    };
    format!("pareto-rl: {class}: {}", e.to_string().replace('\n', " "))
}

/// Parses a reward matrix: one sample per non-empty line.
pub fn parse_matrix(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("line {}: {v:?} is not a number", n + 1)))
                })
                .collect()
        })
        .collect()
}

/// `{i, j, ...}`
pub fn format_index_set(idx: &[usize]) -> String {
    let inner: Vec<String> = idx.iter().map(ToString::to_string).collect();
    format!("{{{}}}", inner.join(", "))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    Ok(cfg)
}

fn condition_name(token: Option<usize>) -> String {
    token.map_or_else(|| "none".into(), |k| format!("token{k}"))
}

fn ablation_table(rows: &[ConditionSummary], channels: usize) -> String {
    let mut s = String::from("condition");
    for n in &CHANNEL_NAMES[..channels] {
        let _ = write!(s, ",raw_{n}");
    }
    for n in &CHANNEL_NAMES[..channels] {
        let _ = write!(s, ",norm_{n}");
    }
    s.push_str(",total_norm,kl\n");
    for r in rows {
        let _ = write!(s, "{}", condition_name(r.token));
        for v in r.raw_mean.iter().chain(&r.normalized_mean) {
            let _ = write!(s, ",{v:.6}");
        }
        let _ = writeln!(s, ",{:.6},{:.6}", r.total_normalized(), r.kl_mean);
    }
    s
}

fn oracle_table(label: &str, tokens: &[Option<usize>], rows: &[OracleScores]) -> String {
    let mut s = String::new();
    for (t, o) in tokens.iter().zip(rows) {
        let _ = writeln!(
            s,
            "{label},{},{:.6},{:.6},{:.6}",
            condition_name(*t),
            o.exact_match_rate,
            o.token_match_rate,
            o.preference_mean
        );
    }
    s
}

fn trained_state(ws: &Workspace, cfg: &RunConfig) -> Result<(Actor, Reference)> {
    let state = load_trainer(&ws.rl_checkpoint(), cfg)?;
    Ok((state.actor, state.reference))
}

fn gen_data(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let task = build_task(cfg)?;
    let data = generate_data(cfg, &task)?;
    ws.save_dataset(&data)?;
    println!(
        "wrote {} paired examples, {} preference pairs, {} corpus sequences to {}",
        data.paired.len(),
        data.preferences.len(),
        data.corpus.len(),
        ws.dir.display()
    );
    Ok(())
}

fn train_encoders_cmd(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let task = build_task(cfg)?;
    let data = ws.load_dataset(&task)?;
    let set = fit_encoders(cfg, &data)?;
    ws.save_encoders(cfg, &set)?;
    for (kind, fam) in [LossKind::Margin, LossKind::InfoNce].iter().zip(&set.families) {
        println!("{}: {}", kind.name(), if fam.is_some() { "trained" } else { "skipped" });
    }
    Ok(())
}

fn train_scorer_cmd(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let task = build_task(cfg)?;
    let data = ws.load_dataset(&task)?;
    let scorer = fit_scorer(cfg, &data)?;
    ws.save_scorer(cfg, &scorer)?;
    println!("training pairwise accuracy {:.4}", scorer.pairwise_accuracy(&data.preferences));
    Ok(())
}

fn pretrain_cmd(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let task = build_task(cfg)?;
    let data = ws.load_dataset(&task)?;
    let encoders = if cfg.pretrain.w_align > 0.0 {
        Some(ws.load_encoders(cfg)?)
    } else {
        None
    };
    let (actor, report) = pretrain(cfg, &data, encoders.as_ref())?;
    ws.save_actor(cfg, "pretrained.ckpt", &actor)?;
    println!(
        "final loss {:.4}, corpus next-token accuracy {:.4}",
        report.loss_history.last().copied().unwrap_or(f64::NAN),
        next_token_accuracy(&actor, &data.corpus)?
    );
    Ok(())
}

fn fit_normalizer_cmd(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let task = build_task(cfg)?;
    let ctx = reward_context(cfg, &task, ws.load_encoders(cfg)?, ws.load_scorer(cfg)?)?;
    let actor = ws.load_actor(cfg, "pretrained.ckpt")?;
    let norm = fit_warmup_normalizer(cfg, &actor, &ctx)?;
    ws.save_normalizer(cfg, &norm)?;
    for (k, name) in CHANNEL_NAMES[..norm.channels()].iter().enumerate() {
        println!("{name}: min {:.6} max {:.6}", norm.min()[k], norm.max()[k]);
    }
    Ok(())
}

fn train_rl_cmd(cfg: &RunConfig, ws: &Workspace, resume: bool) -> Result<()> {
    let prepared = ws.load_prepared(cfg)?;
    let mut state = if resume {
        load_trainer(&ws.rl_checkpoint(), cfg)?
    } else {
        prepared.trainer_state(cfg)?
    };
    let normalizer = prepared.ctx.normalizer().cloned();
    let mut writer = MetricsWriter::open(&ws.metrics_path(), cfg, normalizer.as_ref(), resume.then_some(state.iteration))?;
    let every = cfg.checkpoint_every as u64;
    let ckpt = ws.rl_checkpoint();
    prepared.train(cfg, &mut state, |st, m| {
        writer.append(m)?;
        if every > 0 && st.iteration % every == 0 {
            save_trainer(&ckpt, cfg, st, normalizer.as_ref())?;
        }
        log::info!("iteration {} total normalized {:.4} kl {:.4}", m.iteration, m.total_normalized(), m.kl);
        Ok(())
    })?;
    save_trainer(&ckpt, cfg, &state, normalizer.as_ref())?;
    println!("completed {} iterations; metrics in {}", state.iteration, ws.metrics_path().display());
    Ok(())
}

fn evaluate_cmd(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let prepared = ws.load_prepared(cfg)?;
    let (actor, reference) = trained_state(ws, cfg)?;
    let k = prepared.ctx.channels();
    let tokens: Vec<Option<usize>> = (0..k).map(Some).chain([None]).collect();
    let mut out = String::from("policy,condition,exact_match,token_match,hidden_preference\n");
    out += &oracle_table("pretrained", &tokens, &prepared.oracle(cfg, &prepared.pretrained)?);
    out += &oracle_table("trained", &tokens, &prepared.oracle(cfg, &actor)?);
    let pre = prepared.ablate(cfg, &prepared.pretrained, &reference)?;
    let post = prepared.ablate(cfg, &actor, &reference)?;
    let mut rewards = String::new();
    for (label, rows) in [("pretrained", &pre), ("trained", &post)] {
        let _ = writeln!(rewards, "# {label}");
        rewards += &ablation_table(rows, k);
    }
    fs::write(ws.path("oracle.csv"), &out)?;
    fs::write(ws.path("evaluation.csv"), &rewards)?;
    print!("{out}\n{rewards}");
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let prepared = ws.load_prepared(cfg)?;
    let (actor, reference) = trained_state(ws, cfg)?;
    let rows = prepared.ablate(cfg, &actor, &reference)?;
    let table = ablation_table(&rows, prepared.ctx.channels());
    fs::write(ws.path("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn pareto_demo(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    println!("{}", format_index_set(&non_dominated_set(&parse_matrix(&text)?)?));
    Ok(())
}

fn all(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    gen_data(cfg, ws)?;
    train_encoders_cmd(cfg, ws)?;
    train_scorer_cmd(cfg, ws)?;
    pretrain_cmd(cfg, ws)?;
    fit_normalizer_cmd(cfg, ws)?;
    train_rl_cmd(cfg, ws, false)?;
    evaluate_cmd(cfg, ws)
}

/// Runs one parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::ParetoDemo { file } => return pareto_demo(file),
        Command::ConfigReference => {
            print!("{}", RunConfig::reference());
            return Ok(());
        }
        _ => {}
    }
    let cfg = load_config(cli)?;
    let ws = Workspace::new(&cfg.out_dir)?;
    fs::write(ws.path("config.txt"), cfg.dump())?;
    match &cli.command {
        Command::GenData => gen_data(&cfg, &ws),
        Command::TrainEncoders => train_encoders_cmd(&cfg, &ws),
        Command::TrainScorer => train_scorer_cmd(&cfg, &ws),
        Command::Pretrain => pretrain_cmd(&cfg, &ws),
        Command::FitNormalizer => fit_normalizer_cmd(&cfg, &ws),
        Command::TrainRl { resume } => train_rl_cmd(&cfg, &ws, *resume),
        Command::Evaluate => evaluate_cmd(&cfg, &ws),
        Command::AblateTokens => ablate_cmd(&cfg, &ws),
        Command::All => all(&cfg, &ws),
        Command::ParetoDemo { .. } | Command::ConfigReference => unreachable!(),
    }
}

/// Parses `args` (program name first) and runs; returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", diagnostic(&e));
            exit_code(&e)
        }
    }
}
