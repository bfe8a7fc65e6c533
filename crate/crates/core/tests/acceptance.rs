//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and then
//! asserts. The lines go straight to the process stdout so they appear even
//! when the harness captures test output.
//!
//! The RL criteria share runs: one prepared pipeline per seed and one
//! training run per (seed, variant), built on first use.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pareto_rl::encoders::{
    contrastive_loss, infonce_loss, preference_loss, EncoderConfig, EncoderFamily, FeatureTransform, LossKind,
    PairedExample, PreferencePair, PreferenceScorer,
};
use pareto_rl::harness::{build_task, fit_scorer, generate_data, load_trainer, save_trainer, Prepared, RunConfig};
use pareto_rl::numerics::{grad_check, Tensor};
use pareto_rl::pareto::{hypervolume, non_dominated_set};
use pareto_rl::policy::{Actor, Critic, ModelConfig, PromptSpec, TokenSequence, Vocabulary};
use pareto_rl::rewards::NormalizerState;
use pareto_rl::rng::{stream, Stage};
use pareto_rl::tasks::DatasetSizes;
use pareto_rl::trainer::{actor_loss_on, clipped_term, sequence_kl, train_iteration, ConditionSummary, Mode};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {n:>2} [{name}]: {verdict} ({detail})\n");
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}

// ---------------------------------------------------------------------------
// 1. Non-dominated sets

fn oracle_front(rows: &[Vec<f64>]) -> Vec<usize> {
    (0..rows.len())
        .filter(|&i| {
            !(0..rows.len()).any(|j| {
                let ge = rows[j].iter().zip(&rows[i]).all(|(a, b)| a >= b);
                let gt = rows[j].iter().zip(&rows[i]).any(|(a, b)| a > b);
                ge && gt
            })
        })
        .collect()
}

fn tie_matrix(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // Values from a tiny grid, plus copied rows and copied columns.
    let mut rows: Vec<Vec<f64>> = (0..16).map(|_| (0..3).map(|_| f64::from(rng.gen_range(0..3u8))).collect()).collect();
    for _ in 0..4 {
        let (a, b) = (rng.gen_range(0..16), rng.gen_range(0..16));
        rows[a] = rows[b].clone();
    }
    if rng.gen_bool(0.5) {
        for r in &mut rows {
            r[2] = r[1];
        }
    }
    rows
}

#[test]
fn c01_pareto_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut matrices: Vec<Vec<Vec<f64>>> = (0..500)
        .map(|_| (0..16).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
        .collect();
    matrices.extend((0..100).map(|_| tie_matrix(&mut rng)));
    let mismatches = matrices.iter().filter(|m| non_dominated_set(m).unwrap() != oracle_front(m)).count();
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(1);
    report(1, "pareto correctness", pass, &format!("{mismatches} mismatches of 600, {elapsed:?}"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. Normalization

#[test]
fn c02_normalization_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    let mut endpoints_exact = true;
    for _ in 0..10_000 {
        let lo: f64 = rng.gen_range(-50.0..50.0);
        let hi = lo + rng.gen_range(1e-3..100.0);
        // Up to two range widths either side of the fitted bounds.
        let r: f64 = rng.gen_range(lo - 2.0 * (hi - lo)..hi + 2.0 * (hi - lo));
        let n = NormalizerState::new(vec![lo], vec![hi]).unwrap();
        let inside = (r - lo) / (hi - lo);
        let below = (r - lo) / (hi - lo);
        let above = (r - hi) / (hi - lo) + 1.0;
        let got = n.normalize(r, 0);
        for b in [inside, below, above] {
            worst = worst.max((got - b).abs());
        }
        endpoints_exact &= n.normalize(lo, 0) == 0.0 && n.normalize(hi, 0) == 1.0;
    }
    let mut argmax_ok = true;
    for _ in 0..200 {
        let lo: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..0.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.gen_range(0.1..5.0)).collect();
        let n = NormalizerState::new(lo, hi).unwrap();
        let batch: Vec<Vec<f64>> = (0..24).map(|_| (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let normed: Vec<Vec<f64>> = batch.iter().map(|r| n.normalize_all(r)).collect();
        for k in 0..3 {
            let arg = |m: &[Vec<f64>]| (0..m.len()).max_by(|&a, &b| m[a][k].total_cmp(&m[b][k])).unwrap();
            argmax_ok &= arg(&batch) == arg(&normed);
        }
    }
    let pass = worst <= 1e-12 && endpoints_exact && argmax_ok;
    report(
        2,
        "normalization identity",
        pass,
        &format!("max branch gap {worst:.2e}, endpoints exact {endpoints_exact}, argmax invariant {argmax_ok}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. Gradients

const FD_EPS: f64 = 1e-6;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        codebook_size: 6,
        prompts: 2,
        reward_tokens: 2,
        d_model: 8,
        heads: 2,
        layers: 1,
        d_ff: 12,
        max_len: 6,
    }
}

fn paired_batch(rng: &mut ChaCha8Rng, prompts: usize, codebook: usize, unmatched: bool) -> Vec<PairedExample> {
    let vocab = Vocabulary::new(codebook).unwrap();
    (0..prompts)
        .map(|p| {
            let content: Vec<usize> = (0..4).map(|_| rng.gen_range(0..codebook)).collect();
            PairedExample {
                prompt_id: p,
                sequence: TokenSequence::from_content(&content, &vocab, 8).unwrap(),
                matched: !unmatched || p % 2 == 0,
            }
        })
        .collect()
}

#[test]
fn c03_gradient_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut errors: Vec<(&str, f64)> = Vec::new();

    let actor = Actor::new(tiny_model(), &mut rng).unwrap();
    let params = actor.store().len();
    let seq = TokenSequence::from_content(&[1, 4, 2, 5], actor.vocab(), 6).unwrap();
    let spec = PromptSpec::with_token(1, 0, 0.5);
    let prefix = &seq.tokens()[..seq.len() - 1];
    let e = grad_check(
        |tape, store| {
            let logits = actor.decoder().forward_spec_with(tape, store, &spec, prefix)?;
            let logp = tape.log_softmax_rows(logits);
            let picked = tape.pick_per_row(logp, seq.tokens())?;
            Ok(tape.sum(picked))
        },
        actor.store(),
        FD_EPS,
    )
    .unwrap();
    errors.push(("actor", e));

    // The critic head starts at zero; perturb it so every path carries gradient.
    let mut critic = Critic::new(tiny_model(), &mut rng).unwrap();
    let head = critic.decoder().head_weight_id();
    for v in critic.store_mut().slice_mut(head) {
        *v = rng.gen_range(-0.5..0.5);
    }
    let returns = [0.3, -0.2, 0.9, 0.1, 0.5];
    let e = grad_check(
        |tape, store| {
            let v = critic.decoder().forward_spec_with(tape, store, &spec, prefix)?;
            let g = tape.constant(Tensor::new(returns.len(), 1, returns.to_vec())?);
            tape.squared_error(v, g)
        },
        critic.store(),
        FD_EPS,
    )
    .unwrap();
    errors.push(("critic", e));

    let enc_cfg = EncoderConfig {
        embed_dim: 6,
        hidden: 8,
        out_dim: 4,
        margin: 3.0,
        ..EncoderConfig::default()
    };
    for (name, kind, unmatched) in [("margin contrastive", LossKind::Margin, true), ("infonce", LossKind::InfoNce, false)] {
        let fam = EncoderFamily::new(kind, 4, 6, &enc_cfg, &mut rng).unwrap();
        let batch = paired_batch(&mut rng, 4, 6, unmatched);
        let refs: Vec<&PairedExample> = batch.iter().collect();
        let e = grad_check(|tape, store| fam.batch_loss_on(tape, store, &refs), fam.store(), FD_EPS).unwrap();
        errors.push((name, e));
    }

    let vocab = Vocabulary::new(6).unwrap();
    let transform = FeatureTransform::new(6, 8, &mut rng).unwrap();
    let scorer = PreferenceScorer::new(transform, 5, &mut rng).unwrap();
    let pairs: Vec<PreferencePair> = (0..6)
        .map(|i| {
            let mut content = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.gen_range(0..6)).collect() };
            PreferencePair {
                prompt_id: i % 2,
                better: TokenSequence::from_content(&content(4), &vocab, 8).unwrap(),
                worse: TokenSequence::from_content(&content(3), &vocab, 8).unwrap(),
            }
        })
        .collect();
    let refs: Vec<&PreferencePair> = pairs.iter().collect();
    let e = grad_check(|tape, store| scorer.pair_loss_on(tape, store, &refs), scorer.store(), FD_EPS).unwrap();
    errors.push(("preference", e));

    // Old log-probs offset from the current ones so every ratio sits away
    // from the clip boundaries at 0.8 and 1.2.
    let current = actor.sequence_logprob(&spec, &seq).unwrap();
    let ratios = [0.7, 0.95, 1.1, 1.35, 1.05];
    let advantages = [1.0, -0.5, 0.8, 1.2, -1.5];
    let old: Vec<f64> = current.iter().zip(&ratios).map(|(c, r)| c - f64::ln(*r)).collect();
    let weights = vec![1.0 / old.len() as f64; old.len()];
    let e = grad_check(
        |tape, store| {
            let logits = actor.decoder().forward_spec_with(tape, store, &spec, prefix)?;
            let logp = tape.log_softmax_rows(logits);
            let picked = tape.pick_per_row(logp, seq.tokens())?;
            actor_loss_on(tape, picked, &old, &advantages, &weights, 0.2)
        },
        actor.store(),
        FD_EPS,
    )
    .unwrap();
    errors.push(("clipped ppo", e));

    let elapsed = start.elapsed();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let pass = worst < 1e-3 && params <= 5000 && elapsed < Duration::from_secs(60);
    let detail: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report(3, "gradient exactness", pass, &format!("{}; actor params {params}; {elapsed:?}", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. Closed forms

#[test]
fn c04_closed_form_losses() {
    let pref = preference_loss(0.37, 0.37);
    let one = Tensor::new(1, 3, vec![0.2, -0.4, 0.9]).unwrap();
    let nce = infonce_loss(&one, &one, 0.07).unwrap();
    let margin = contrastive_loss(&[0.5, -1.0], &[0.5, -1.0], true, 1.0);
    let ppo = clipped_term(1.3, 1.0, 0.2);
    let pass = (pref - std::f64::consts::LN_2).abs() <= 1e-6 && nce.abs() <= 1e-6 && margin == 0.0 && (ppo + 1.2).abs() <= 1e-6;
    report(4, "closed-form losses", pass, &format!("preference {pref:.9}, infonce {nce:.2e}, margin {margin}, ppo {ppo:.9}"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Shared RL runs

const SEEDS: usize = 5;

#[derive(Clone, Copy)]
enum Variant {
    Pareto,
    WeightedSum,
    LowBeta,
    HighBeta,
}

impl Variant {
    fn index(self) -> usize {
        self as usize
    }

    fn apply(self, cfg: &mut RunConfig) {
        match self {
            Variant::Pareto => {}
            Variant::WeightedSum => cfg.ppo.mode = Mode::WeightedSum,
            Variant::LowBeta => cfg.ppo.beta = 0.01,
            Variant::HighBeta => cfg.ppo.beta = 1.0,
        }
    }
}

fn base_config(seed: usize) -> RunConfig {
    let mut cfg = RunConfig {
        seed: seed as u64,
        ..RunConfig::default()
    };
    cfg.ppo.beta = 0.1;
    cfg.ppo.mode = Mode::Pareto;
    cfg
}

static PREPARED: [OnceLock<Prepared>; SEEDS] = [const { OnceLock::new() }; SEEDS];
static BASELINE: [OnceLock<Evaluation>; SEEDS] = [const { OnceLock::new() }; SEEDS];
static RUNS: [[OnceLock<Run>; 4]; SEEDS] = [const { [const { OnceLock::new() }; 4] }; SEEDS];

fn prepared(seed: usize) -> &'static Prepared {
    PREPARED[seed].get_or_init(|| Prepared::build(&base_config(seed)).unwrap())
}

/// Plain-prompt samples scored with the normalized learned rewards.
struct Evaluation {
    points: Vec<Vec<f64>>,
}

impl Evaluation {
    fn channel_means(&self) -> Vec<f64> {
        let n = self.points.len() as f64;
        (0..self.points[0].len()).map(|k| self.points.iter().map(|p| p[k]).sum::<f64>() / n).collect()
    }

    fn total(&self) -> f64 {
        self.channel_means().iter().sum()
    }
}

fn evaluate_plain(cfg: &RunConfig, prep: &Prepared, actor: &Actor) -> Evaluation {
    let mut points = Vec::new();
    for p in 0..cfg.task.prompts {
        for i in 0..cfg.eval_samples {
            let mut rng = stream(cfg.seed, Stage::Eval, p as u64, i as u64);
            let s = actor.sample_sequence(&PromptSpec::plain(p), cfg.eval_temperature, &mut rng).unwrap();
            points.push(prep.ctx.compute_reward_vector(p, &s.sequence).unwrap().normalized);
        }
    }
    Evaluation { points }
}

fn baseline(seed: usize) -> &'static Evaluation {
    BASELINE[seed].get_or_init(|| {
        let prep = prepared(seed);
        evaluate_plain(&base_config(seed), prep, &prep.pretrained)
    })
}

struct Run {
    plain: Evaluation,
    ablation: Vec<ConditionSummary>,
    /// Per-sequence KL to the reference on fresh token-conditioned rollouts.
    rollout_kl: Vec<f64>,
    train_time: Duration,
}

fn run(seed: usize, variant: Variant) -> &'static Run {
    RUNS[seed][variant.index()].get_or_init(|| {
        let prep = prepared(seed);
        let mut cfg = base_config(seed);
        variant.apply(&mut cfg);
        let mut state = prep.trainer_state(&cfg).unwrap();
        let start = Instant::now();
        prep.train(&cfg, &mut state, |_, _| Ok(())).unwrap();
        let train_time = start.elapsed();
        let plain = evaluate_plain(&cfg, prep, &state.actor);
        let ablation = prep.ablate(&cfg, &state.actor, &state.reference).unwrap();
        let k = cfg.reward.channels;
        let mut rollout_kl = Vec::new();
        for p in 0..cfg.task.prompts {
            for t in 0..k {
                let spec = PromptSpec::with_token(p, t, cfg.ppo.alpha_end);
                for i in 0..cfg.ppo.samples_per_group {
                    let mut rng = stream(cfg.seed, Stage::Eval, (1 + p * k + t) as u64 * 1000, i as u64);
                    let s = state.actor.sample_sequence(&spec, cfg.ppo.temperature, &mut rng).unwrap();
                    rollout_kl.push(sequence_kl(&state.actor, &state.reference, &spec, &s.sequence).unwrap());
                }
            }
        }
        Run {
            plain,
            ablation,
            rollout_kl,
            train_time,
        }
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

// ---------------------------------------------------------------------------
// 5. RL improves the objectives

#[test]
fn c05_rl_improves_rewards() {
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let before = baseline(seed);
        let after = run(seed, Variant::Pareto);
        let (b, a) = (before.channel_means(), after.plain.channel_means());
        let gain = after.plain.total() / before.total() - 1.0;
        let channels_ok = b.iter().zip(&a).all(|(b, a)| *a >= b - 0.05 * b.abs());
        let ok = gain >= 0.20 && channels_ok && after.train_time < Duration::from_secs(300);
        pass &= ok;
        detail.push(format!(
            "seed {seed}: {:.3} -> {:.3} ({:+.1}%), channels {b:.3?} -> {a:.3?}, {:.0?}",
            before.total(),
            after.plain.total(),
            100.0 * gain,
            after.train_time
        ));
    }
    report(5, "rl improves rewards", pass, &detail.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6. Pareto against weighted sum

#[test]
fn c06_pareto_beats_weighted_sum() {
    let (mut sum_wins, mut hv_wins) = (0, 0);
    let mut detail = Vec::new();
    for seed in 0..SEEDS {
        let p = run(seed, Variant::Pareto);
        let w = run(seed, Variant::WeightedSum);
        // One point per ablation condition: each reward token and the plain prompt.
        let points = |r: &Run| -> Vec<Vec<f64>> { r.ablation.iter().map(|c| c.normalized_mean.clone()).collect() };
        let (pts_p, pts_w) = (points(p), points(w));
        let reference: Vec<f64> = (0..3)
            .map(|k| pts_p.iter().chain(&pts_w).map(|x| x[k]).fold(f64::INFINITY, f64::min))
            .collect();
        let hv_p = hypervolume(&pts_p, &reference).unwrap();
        let hv_w = hypervolume(&pts_w, &reference).unwrap();
        sum_wins += usize::from(p.plain.total() >= w.plain.total());
        hv_wins += usize::from(hv_p >= hv_w);
        detail.push(format!(
            "seed {seed}: sum {:.3} vs {:.3}, hv {hv_p:.3e} vs {hv_w:.3e}",
            p.plain.total(),
            w.plain.total()
        ));
    }
    let pass = sum_wins >= 3 && hv_wins >= 3;
    report(6, "pareto vs weighted sum", pass, &format!("sum wins {sum_wins}/5, hv wins {hv_wins}/5; {}", detail.join("; ")));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7. Token steering

#[test]
fn c07_token_steering() {
    let mut steered_seeds = 0;
    let mut detail = Vec::new();
    for seed in 0..SEEDS {
        let rows = &run(seed, Variant::Pareto).ablation;
        let by_token: Vec<&ConditionSummary> = rows.iter().filter(|r| r.token.is_some()).collect();
        let k = by_token.len();
        let steered: Vec<bool> = (0..k)
            .map(|c| {
                let own = by_token[c].normalized_mean[c];
                (0..k).filter(|&t| t != c).all(|t| own > by_token[t].normalized_mean[c])
            })
            .collect();
        steered_seeds += usize::from(steered.iter().all(|&s| s));
        let diag: Vec<String> = (0..k)
            .map(|c| {
                let col: Vec<String> = (0..k).map(|t| format!("{:.3}", by_token[t].normalized_mean[c])).collect();
                format!("ch{c}[{}]", col.join(" "))
            })
            .collect();
        detail.push(format!("seed {seed}: {} steered {steered:?}", diag.join(" ")));
    }
    let pass = steered_seeds >= 4;
    report(7, "token steering", pass, &format!("{steered_seeds}/5 seeds steer every channel; {}", detail.join("; ")));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8. KL control

#[test]
fn c08_kl_decreases_with_beta() {
    let medians: Vec<f64> = [Variant::LowBeta, Variant::Pareto, Variant::HighBeta]
        .iter()
        .map(|&v| median((0..SEEDS).flat_map(|s| run(s, v).rollout_kl.clone()).collect()))
        .collect();
    let pass = medians[0] >= medians[1] && medians[1] >= medians[2];
    report(8, "kl control", pass, &format!("median kl at beta 0.01/0.1/1.0: {medians:.4?}"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 9. Preference scorer

#[test]
fn c09_scorer_accuracy() {
    let cfg = base_config(0);
    let task = build_task(&cfg).unwrap();
    let data = generate_data(&cfg, &task).unwrap();
    let start = Instant::now();
    let scorer = fit_scorer(&cfg, &data).unwrap();
    let elapsed = start.elapsed();
    let sizes = DatasetSizes {
        paired: 8,
        preferences: 2000,
        corpus: 8,
    };
    let held_out = task.generate_dataset(sizes, &mut stream(99, Stage::Data, 7, 7)).unwrap();
    let mut agree = 0;
    let mut counted = 0;
    for pair in &held_out.preferences {
        let truth = task.preference(&pair.better) - task.preference(&pair.worse);
        if truth == 0.0 {
            continue;
        }
        let guess = scorer.score(&pair.better) - scorer.score(&pair.worse);
        counted += 1;
        agree += usize::from(guess.signum() == truth.signum());
    }
    let acc = agree as f64 / counted as f64;
    let pass = data.preferences.len() == 2000 && acc >= 0.90 && elapsed < Duration::from_secs(60);
    report(9, "preference scorer", pass, &format!("held-out accuracy {:.1}% over {counted} pairs, trained in {elapsed:?}", 100.0 * acc));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 10. Determinism and resume

#[test]
fn c10_determinism_and_resume() {
    let mut cfg = base_config(0);
    cfg.ppo.iterations = 10;
    let ppo = cfg.ppo_config();
    let rows = |prep: &Prepared, from: Option<&std::path::Path>, upto: u64, save_at: Option<(u64, &std::path::Path)>| {
        let mut state = match from {
            Some(path) => load_trainer(path, &cfg).unwrap(),
            None => prep.trainer_state(&cfg).unwrap(),
        };
        let mut out = Vec::new();
        while state.iteration < upto {
            if let Some((at, path)) = save_at {
                if state.iteration == at {
                    save_trainer(path, &cfg, &state, prep.ctx.normalizer()).unwrap();
                }
            }
            let m = train_iteration(&mut state, &prep.ctx, &ppo, cfg.task.prompts, cfg.seed).unwrap();
            out.push(m.csv_row(false));
        }
        out
    };
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("rl.ckpt");

    let shared = prepared(0);
    let first = rows(shared, None, 10, Some((5, &ckpt)));
    let fresh = Prepared::build(&cfg).unwrap();
    let second = rows(&fresh, None, 10, None);
    let resumed = rows(&fresh, Some(&ckpt), 6, None);

    let identical = first == second;
    let resume_ok = resumed.len() == 1 && resumed[0] == first[5];
    let pass = identical && resume_ok && first.len() == 10;
    report(
        10,
        "determinism and resume",
        pass,
        &format!("first 10 iterations identical {identical}, resumed iteration 6 identical {resume_ok}"),
    );
    assert!(pass);
}
