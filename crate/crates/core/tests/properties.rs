use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pareto_rl::checkpoint::Checkpoint;
use pareto_rl::encoders::{PairedExample, PreferencePair};
use pareto_rl::harness::RunConfig;
use pareto_rl::pareto::{dominates, hypervolume, non_dominated_set, pareto_mask};
use pareto_rl::policy::{Actor, ModelConfig, PromptSpec, TokenSequence, Vocabulary};
use pareto_rl::rewards::NormalizerState;
use pareto_rl::tasks::io;

fn matrix(rows: std::ops::Range<usize>, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-4i32..4, k).prop_map(|r| r.into_iter().map(f64::from).collect()), rows)
}

fn small_actor(seed: u64) -> Actor {
    let cfg = ModelConfig {
        codebook_size: 6,
        prompts: 3,
        reward_tokens: 2,
        d_model: 8,
        heads: 2,
        layers: 1,
        d_ff: 8,
        max_len: 8,
    };
    Actor::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn front_members_are_undominated_and_others_are_covered(rows in matrix(1..20, 3)) {
        let front = non_dominated_set(&rows).unwrap();
        prop_assert!(!front.is_empty());
        for i in 0..rows.len() {
            let beaten = rows.iter().any(|r| dominates(r, &rows[i]).unwrap());
            prop_assert_eq!(front.contains(&i), !beaten);
            if beaten {
                prop_assert!(front.iter().any(|&j| dominates(&rows[j], &rows[i]).unwrap()));
            }
        }
    }

    #[test]
    fn dominance_is_irreflexive_and_antisymmetric(a in prop::collection::vec(-3i32..3, 3), b in prop::collection::vec(-3i32..3, 3)) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        prop_assert!(!dominates(&a, &a).unwrap());
        prop_assert!(!(dominates(&a, &b).unwrap() && dominates(&b, &a).unwrap()));
    }

    #[test]
    fn front_is_permutation_equivariant(rows in matrix(1..16, 3), shift in 0usize..16) {
        let n = rows.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let mask = pareto_mask(&rows).unwrap();
        let pmask = pareto_mask(&permuted).unwrap();
        for (pos, &src) in perm.iter().enumerate() {
            prop_assert_eq!(pmask[pos], mask[src]);
        }
    }

    #[test]
    fn hypervolume_is_monotone(rows in matrix(1..10, 3), extra in prop::collection::vec(-4i32..4, 3)) {
        let reference = [-5.0, -5.0, -5.0];
        let base = hypervolume(&rows, &reference).unwrap();
        let mut more = rows.clone();
        more.push(extra.into_iter().map(f64::from).collect());
        prop_assert!(hypervolume(&more, &reference).unwrap() >= base);
    }

    #[test]
    fn dominated_points_leave_hypervolume_unchanged(rows in matrix(1..10, 2), pick in 0usize..10, drop in 1i32..3) {
        let reference = [-5.0, -5.0];
        let base = hypervolume(&rows, &reference).unwrap();
        let mut more = rows.clone();
        let mut weaker = rows[pick % rows.len()].clone();
        weaker[0] -= f64::from(drop);
        more.push(weaker);
        prop_assert_eq!(hypervolume(&more, &reference).unwrap(), base);
    }

    #[test]
    fn normalization_is_monotone_affine(lo in -20.0f64..20.0, width in 0.01f64..30.0, a in -80.0f64..80.0, b in -80.0f64..80.0) {
        let n = NormalizerState::new(vec![lo], vec![lo + width]).unwrap();
        prop_assert_eq!(n.normalize(lo, 0), 0.0);
        prop_assert_eq!(n.normalize(lo + width, 0), 1.0);
        if a < b {
            prop_assert!(n.normalize(a, 0) <= n.normalize(b, 0));
        }
        let mid = n.normalize(0.5 * (a + b), 0);
        prop_assert!((mid - 0.5 * (n.normalize(a, 0) + n.normalize(b, 0))).abs() < 1e-9);
    }

    #[test]
    fn prompt_blend_is_affine_in_alpha(seed in 0u64..50, prompt in 0usize..3, token in 0usize..2, alpha in 0.0f64..=1.0) {
        let actor = small_actor(seed);
        let d = actor.decoder();
        let f0 = d.embed_prompt(&PromptSpec::with_token(prompt, token, 0.0)).unwrap();
        let f1 = d.embed_prompt(&PromptSpec::with_token(prompt, token, 1.0)).unwrap();
        let fa = d.embed_prompt(&PromptSpec::with_token(prompt, token, alpha)).unwrap();
        let plain = d.embed_prompt(&PromptSpec::plain(prompt)).unwrap();
        prop_assert_eq!(f0.data(), plain.data());
        for ((x0, x1), xa) in f0.data().iter().zip(f1.data()).zip(fa.data()) {
            prop_assert_eq!(*xa, (1.0 - alpha) * x0 + alpha * x1);
        }
    }

    #[test]
    fn earlier_logit_rows_ignore_later_tokens(seed in 0u64..20, prefix in prop::collection::vec(0usize..6, 2..7), cut in 0usize..6, replacement in 0usize..6) {
        let actor = small_actor(seed);
        let spec = PromptSpec::with_token(1, 1, 0.5);
        let cut = cut % prefix.len();
        let mut edited = prefix.clone();
        edited[cut] = replacement;
        let a = actor.actor_logits(&spec, &prefix).unwrap();
        let b = actor.actor_logits(&spec, &edited).unwrap();
        prop_assert_eq!(&a[..=cut], &b[..=cut]);
    }

    #[test]
    fn step_distributions_are_normalized(seed in 0u64..20, content in prop::collection::vec(0usize..6, 0..7)) {
        let actor = small_actor(seed);
        let seq = TokenSequence::from_content(&content, actor.vocab(), 8).unwrap();
        let spec = PromptSpec::plain(2);
        for row in actor.step_log_distributions(&spec, &seq).unwrap() {
            prop_assert!(row.iter().all(|&l| l <= 0.0));
            let mass: f64 = row.iter().map(|l| l.exp()).sum();
            prop_assert!((mass - 1.0).abs() < 1e-5);
        }
        prop_assert!(actor.sequence_logprob(&spec, &seq).unwrap().iter().all(|&l| l <= 0.0));
    }

    #[test]
    fn token_sequences_end_once(content in prop::collection::vec(0usize..6, 0..10)) {
        let vocab = Vocabulary::new(6).unwrap();
        let seq = TokenSequence::from_content(&content, &vocab, 10).unwrap();
        prop_assert_eq!(seq.len(), content.len() + 1);
        prop_assert_eq!(seq.tokens().iter().filter(|&&t| t == vocab.end_id()).count(), 1);
        prop_assert_eq!(*seq.tokens().last().unwrap(), vocab.end_id());
        prop_assert!(TokenSequence::from_content(&content, &vocab, content.len()).is_err());
    }

    #[test]
    fn dataset_text_round_trips(rows in prop::collection::vec((0usize..4, prop::collection::vec(0usize..6, 0..8), any::<bool>()), 0..12)) {
        let vocab = Vocabulary::new(6).unwrap();
        let seq = |c: &[usize]| TokenSequence::from_content(c, &vocab, 9).unwrap();
        let paired: Vec<PairedExample> = rows
            .iter()
            .map(|(p, c, m)| PairedExample { prompt_id: *p, sequence: seq(c), matched: *m })
            .collect();
        prop_assert_eq!(io::read_paired(&io::write_paired(&paired), &vocab, 9).unwrap(), paired);
        let prefs: Vec<PreferencePair> = rows
            .iter()
            .map(|(p, c, _)| PreferencePair { prompt_id: *p, better: seq(c), worse: seq(&[c.as_slice(), &[0]].concat()) })
            .collect();
        prop_assert_eq!(io::read_preferences(&io::write_preferences(&prefs), &vocab, 9).unwrap(), prefs);
        let corpus: Vec<(usize, TokenSequence)> = rows.iter().map(|(p, c, _)| (*p, seq(c))).collect();
        prop_assert_eq!(io::read_corpus(&io::write_corpus(&corpus), &vocab, 9).unwrap(), corpus);
    }

    #[test]
    fn checkpoint_bytes_round_trip(values in prop::collection::vec(-1e6f32..1e6, 1..40), iteration in any::<u32>()) {
        let cfg = RunConfig::default();
        let data: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
        let mut ck = Checkpoint::new(cfg.hash());
        ck.set_meta("iteration", iteration);
        ck.add_values("w", 1, data.len(), &data);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Some(&cfg.hash())).unwrap();
        prop_assert_eq!(back.values("w").unwrap(), data);
        prop_assert_eq!(back.meta_parse::<u32>("iteration").unwrap(), iteration);
    }

    #[test]
    fn config_dump_round_trips(seed in any::<u64>(), beta in 0.0f64..10.0, iterations in 0usize..1000, lr in 1e-7f64..1e-2) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.ppo.beta = beta;
        cfg.ppo.iterations = iterations;
        cfg.ppo.lr = lr;
        let back = RunConfig::parse(&cfg.dump()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}
