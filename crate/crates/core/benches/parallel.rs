//! Rollout collection and evaluation on the default worker pool against a
//! single worker. Build with `--no-default-features` to time the plain
//! sequential path instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pareto_rl::harness::{Prepared, RunConfig};
use pareto_rl::pareto::non_dominated_set;
use pareto_rl::trainer::{collect_rollouts, evaluate_condition};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    let sets = [
        "paired_examples=400",
        "preference_pairs=400",
        "corpus_size=200",
        "encoder_epochs=4",
        "scorer_epochs=4",
        "pretrain_epochs=2",
        "warmup_rollouts=96",
        "eval_samples=4",
    ];
    cfg.apply_overrides(&sets.map(String::from)).unwrap();
    cfg
}

#[cfg(feature = "parallel")]
fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let all = rayon::current_num_threads();
    let mut sizes = vec![1];
    if all > 1 {
        sizes.push(all);
    }
    sizes
        .into_iter()
        .map(|n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            (format!("threads-{n}"), pool)
        })
        .collect()
}

fn run_in<R: Send>(pool: Option<&Pool>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if let Some(p) = pool {
        return p.install(f);
    }
    #[cfg(not(feature = "parallel"))]
    let _ = pool;
    f()
}

#[cfg(feature = "parallel")]
type Pool = rayon::ThreadPool;
#[cfg(not(feature = "parallel"))]
type Pool = ();

fn variants() -> Vec<(String, Option<Pool>)> {
    #[cfg(feature = "parallel")]
    {
        pools().into_iter().map(|(n, p)| (n, Some(p))).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        vec![("sequential".to_string(), None)]
    }
}

fn bench(c: &mut Criterion) {
    let cfg = small_config();
    let prep = Prepared::build(&cfg).unwrap();
    let state = prep.trainer_state(&cfg).unwrap();
    let ppo = cfg.ppo_config();

    let mut group = c.benchmark_group("rollouts");
    group.sample_size(10);
    for (label, pool) in variants() {
        group.bench_function(BenchmarkId::from_parameter(&label), |b| {
            b.iter(|| {
                run_in(pool.as_ref(), || {
                    collect_rollouts(&state.actor, &state.reference, &state.critic, &prep.ctx, &ppo, 0, 0.5, 7, 0).unwrap()
                })
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluation");
    group.sample_size(10);
    for (label, pool) in variants() {
        group.bench_function(BenchmarkId::from_parameter(&label), |b| {
            b.iter(|| {
                run_in(pool.as_ref(), || {
                    evaluate_condition(&state.actor, &state.reference, &prep.ctx, cfg.task.prompts, None, 0.5, 4, 1.0, 7)
                        .unwrap()
                })
            })
        });
    }
    group.finish();

    let rows: Vec<Vec<f64>> = (0..24).map(|i| vec![(i % 5) as f64, (i % 7) as f64, ((i * 3) % 11) as f64]).collect();
    c.bench_function("non_dominated_set/24x3", |b| b.iter(|| non_dominated_set(&rows).unwrap()));
}

criterion_group!(benches, bench);
criterion_main!(benches);
