use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pareto_rl::harness::{load_trainer, save_trainer, RunConfig, Workspace};

const BIN: &str = env!("CARGO_BIN_EXE_pareto-rl");

/// Small enough that the whole pipeline runs in a few seconds.
const SMALL: &[&str] = &[
    "paired_examples=160",
    "preference_pairs=160",
    "corpus_size=80",
    "encoder_epochs=2",
    "scorer_epochs=2",
    "pretrain_epochs=1",
    "warmup_rollouts=48",
    "eval_samples=2",
    "d_model=16",
    "d_ff=16",
    "layers=1",
];

fn pareto_rl(dir: &Path, args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    cmd.arg("--set").arg(format!("out_dir={}", dir.display()));
    for s in SMALL.iter().chain(extra) {
        cmd.arg("--set").arg(s);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, extra: &[&str]) -> RunConfig {
    let mut cfg = RunConfig::default();
    let mut sets: Vec<String> = SMALL.iter().chain(extra).map(|s| s.to_string()).collect();
    sets.push(format!("out_dir={}", dir.display()));
    cfg.apply_overrides(&sets).unwrap();
    cfg
}

fn data_rows(csv: &str) -> Vec<String> {
    // Drop the preamble, the header and the wall-clock column.
    csv.lines()
        .skip(2)
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn pareto_demo_prints_front() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.txt");
    fs::write(&path, "1 0\n0 1\n0.5 0.5\n0 0\n").unwrap();
    let out = Command::new(BIN).arg("pareto-demo").arg(&path).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "{0, 1, 2}");

    fs::write(&path, "0.3 0.7 0.1\n").unwrap();
    let out = Command::new(BIN).arg("pareto-demo").arg(&path).output().unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "{0}");
}

#[test]
fn pareto_demo_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = Command::new(BIN).arg("pareto-demo").arg(dir.path().join("nope")).output().unwrap();
    assert_eq!(missing.status.code(), Some(3));
    let ragged = dir.path().join("r.txt");
    fs::write(&ragged, "1 2\n3\n").unwrap();
    let out = Command::new(BIN).arg("pareto-demo").arg(&ragged).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr(&out).lines().count(), 1);
}

#[test]
fn config_reference_round_trips() {
    let out = Command::new(BIN).arg("config-reference").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["no_such_key=1", "beta=-1", "clip_eps=abc", "channels=5"] {
        let out = pareto_rl(dir.path(), &["gen-data"], &[bad]);
        assert_eq!(out.status.code(), Some(2), "{bad}: {}", stderr(&out));
        let err = stderr(&out);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("pareto-rl: bad config"), "{err}");
    }
    let file = dir.path().join("run.cfg");
    fs::write(&file, "seed=3\nmode=sideways\n").unwrap();
    let out = Command::new(BIN).arg("--config").arg(&file).arg("gen-data").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["train-encoders", "pretrain", "train-rl", "evaluate", "ablate-tokens"] {
        let out = pareto_rl(dir.path(), &[cmd], &[]);
        assert_eq!(out.status.code(), Some(3), "{cmd}: {}", stderr(&out));
        assert_eq!(stderr(&out).lines().count(), 1);
    }
    let missing_config = Command::new(BIN).args(["--config", "/nonexistent/run.cfg", "gen-data"]).output().unwrap();
    assert_eq!(missing_config.status.code(), Some(3));
}

#[test]
fn zero_iterations_write_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = pareto_rl(dir.path(), &["all"], &["iterations=0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("# config_hash="));
    assert!(lines[1].starts_with("iteration,prompt_id,raw_adherence"));
    for f in ["config.txt", "rl.ckpt", "oracle.csv", "evaluation.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn staged_run_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let extra = ["iterations=4", "checkpoint_every=2"];
    for cmd in ["gen-data", "train-encoders", "train-scorer", "pretrain", "fit-normalizer", "train-rl"] {
        let out = pareto_rl(dir.path(), &[cmd], &extra);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
    }
    let full = data_rows(&fs::read_to_string(dir.path().join("metrics.csv")).unwrap());
    assert_eq!(full.len(), 4);

    // Rebuild the iteration-2 checkpoint, then resume through the CLI.
    let cfg = small_config(dir.path(), &extra);
    let ws = Workspace::new(dir.path()).unwrap();
    let prepared = ws.load_prepared(&cfg).unwrap();
    let mut half = cfg.clone();
    half.ppo.iterations = 2;
    let mut state = prepared.trainer_state(&cfg).unwrap();
    prepared.train(&half, &mut state, |_, _| Ok(())).unwrap();
    save_trainer(&ws.rl_checkpoint(), &cfg, &state, prepared.ctx.normalizer()).unwrap();

    let out = pareto_rl(dir.path(), &["train-rl", "--resume"], &extra);
    assert!(out.status.success(), "{}", stderr(&out));
    let resumed = data_rows(&fs::read_to_string(dir.path().join("metrics.csv")).unwrap());
    assert_eq!(resumed, full);
    assert_eq!(load_trainer(&ws.rl_checkpoint(), &cfg).unwrap().iteration, 4);

    let out = pareto_rl(dir.path(), &["ablate-tokens"], &extra);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let conditions: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(conditions, ["token0", "token1", "token2", "none"]);

    let other = pareto_rl(dir.path(), &["train-rl", "--resume"], &["iterations=4", "checkpoint_every=2", "beta=0.5"]);
    assert_eq!(other.status.code(), Some(3), "{}", stderr(&other));
}
