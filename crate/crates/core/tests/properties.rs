use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmprompt::config::{RunConfig, KEYS};
use mmprompt::cross_query::{build_queries, ModulationInit, QueryParams, QueryStrategy};
use mmprompt::harness::checkpoint::{decode, encode};
use mmprompt::harness::{avg_performance, inter_forgetting, intra_forgetting, AccuracyMatrix};
use mmprompt::numerics::{gaussian, AttentionParams, Graph, ParamStore, SeqMixer, Tensor};
use mmprompt::prompt_store::{aggregate_values, qk_align_loss, retrieve, select_topk};
use mmprompt::recovery::{recover_values, RecoveryParams, RecoveryToggles};
use mmprompt::taskgen::{generate_stream, Setting, StreamConfig};
use mmprompt::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn brute_forgetting(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut total = 0.0;
    for t in 0..n - 1 {
        let best = (0..=t).map(|j| m[j][t]).fold(f64::MIN, f64::max);
        total += best - m[n - 1][t];
    }
    total / (n - 1) as f64
}

fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..7).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(0.0f64..=1.0, n), n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_agree_with_brute_force(m in matrix(), subs in prop::collection::vec(matrix(), 1..4)) {
        let last = &m[m.len() - 1];
        let a = last.iter().sum::<f64>() / last.len() as f64;
        prop_assert!((avg_performance(&AccuracyMatrix::from_rows(m.clone())).unwrap() - a).abs() <= 1e-12);
        prop_assert!(
            (inter_forgetting(&AccuracyMatrix::from_rows(m.clone())).unwrap() - brute_forgetting(&m)).abs() <= 1e-12
        );
        let want = subs.iter().map(|s| brute_forgetting(s)).sum::<f64>() / subs.len() as f64;
        let sm: Vec<AccuracyMatrix> = subs.into_iter().map(AccuracyMatrix::from_rows).collect();
        prop_assert!((intra_forgetting(&sm).unwrap() - want).abs() <= 1e-12);
    }

    #[test]
    fn attention_output_has_query_shape(m in 1usize..5, l in 1usize..6, heads in 1usize..3, seed in 0u64..1000) {
        let d = 4 * heads;
        let a = AttentionParams::new("a", d, heads, 1).unwrap();
        let mut s = ParamStore::new();
        let mut r = rng(seed);
        a.init(&mut s, true, &mut r);
        let (q, kv) = (gaussian(m, d, 1.0, &mut r), gaussian(l, d, 1.0, &mut r));
        let run = || {
            let mut g = Graph::new();
            let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
            let out = a.mix(&mut g, &s, qv, kvv, kvv).unwrap();
            g.value(out).clone()
        };
        let (x, y) = (run(), run());
        prop_assert_eq!(x.shape(), &[m, d][..]);
        prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn topk_invariant_to_query_scale(n in 1usize..30, d in 2usize..10, c in 1e-3f64..1e3, seed in 0u64..1000) {
        let mut r = rng(seed);
        let keys = gaussian(n, d, 1.0, &mut r);
        let q = gaussian(1, d, 1.0, &mut r);
        let k = 1 + (seed as usize) % n.min(5);
        let a = select_topk(&q, &keys, k).unwrap();
        let b = select_topk(&q.map(|x| x * c), &keys, k).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn aggregation_is_convex(n in 1usize..30, d in 2usize..10, seed in 0u64..1000) {
        let mut r = rng(seed);
        let (keys, prompts, q) = (gaussian(n, d, 1.0, &mut r), gaussian(n, d, 1.0, &mut r), gaussian(1, d, 1.0, &mut r));
        let k = 1 + (seed as usize) % n.min(5);
        let idx = select_topk(&q, &keys, k).unwrap();
        let sel = aggregate_values(&q, &keys, &prompts, &idx).unwrap();
        prop_assert!(sel.weights.iter().all(|w| *w >= 0.0));
        prop_assert!((sel.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for c in 0..d {
            let lo = idx.iter().map(|&i| prompts.get(i, c)).fold(f64::INFINITY, f64::min);
            let hi = idx.iter().map(|&i| prompts.get(i, c)).fold(f64::NEG_INFINITY, f64::max);
            let x = sel.aggregated.data()[c];
            prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        }
    }

    #[test]
    fn qk_align_loss_is_bounded(kq in 1usize..6, kv in 1usize..6, seed in 0u64..1000) {
        let mut r = rng(seed);
        let d = 6;
        let mut g = Graph::new();
        let mut rets = Vec::new();
        for k in [kq, kv] {
            let q = g.constant(gaussian(1, d, 1.0, &mut r));
            let keys = g.constant(gaussian(8, d, 1.0, &mut r));
            let p = g.constant(gaussian(8, d, 1.0, &mut r));
            rets.push(retrieve(&mut g, q, keys, p, k).unwrap());
        }
        let l = qk_align_loss(&mut g, &rets.iter().collect::<Vec<_>>()).unwrap();
        let v = g.value(l).item();
        prop_assert!(v >= 0.0 && v <= 2.0 * (kq + kv) as f64);
    }

    #[test]
    fn queries_have_width_d(lq in 1usize..5, lv in 1usize..6, s in 0usize..6, seed in 0u64..1000) {
        let strategy: QueryStrategy = QueryStrategy::NAMES[s].parse().unwrap();
        let d = 8;
        let p = QueryParams::new(d, 2, strategy).unwrap();
        let mut st = ParamStore::new();
        let mut r = rng(seed);
        p.init(&mut st, ModulationInit::Uniform, &mut r);
        let mut g = Graph::new();
        let fq = g.constant(gaussian(lq, d, 1.0, &mut r));
        let fv = g.constant(gaussian(lv, d, 1.0, &mut r));
        let (a, b) = build_queries(&mut g, &st, fq, fv, &p).unwrap();
        prop_assert_eq!(g.shape(a), (1, d));
        prop_assert_eq!(g.shape(b), (1, d));
    }

    #[test]
    fn recovery_off_is_identity(seed in 0u64..1000, delta in 0.0f64..=1.0) {
        let p = RecoveryParams::new(8, 2, 1, delta).unwrap();
        let mut s = ParamStore::new();
        let mut r = rng(seed);
        p.init(&mut s, &mut r);
        let (q, v) = (gaussian(1, 8, 1.0, &mut r), gaussian(1, 8, 1.0, &mut r));
        let b = recover_values(&s, &p, &q, &v, seed, RecoveryToggles::OFF).unwrap();
        prop_assert_eq!(b.p_final_q, q);
        prop_assert_eq!(b.p_final_v, v);
    }

    #[test]
    fn unknown_override_is_rejected_with_valid_keys(key in "[a-z]{1,8}\\.[a-z_]{1,12}") {
        prop_assume!(!KEYS.contains(&key.as_str()));
        let mut c = RunConfig::default();
        match c.apply_overrides(&[format!("{key}=1")]) {
            Err(Error::Config(msg)) => {
                prop_assert!(msg.contains(&key));
                prop_assert!(msg.contains("recovery.delta"));
            }
            other => prop_assert!(false, "accepted unknown key: {:?}", other),
        }
    }

    #[test]
    fn checkpoints_round_trip(vals in prop::collection::vec(any::<f64>(), 1..40), trainable in any::<bool>()) {
        let mut s = ParamStore::new();
        s.insert("t", Tensor::row(vals.clone()), trainable);
        let back = decode(&encode(&s)).unwrap();
        let got = back.get("t").unwrap();
        prop_assert!(got.data().iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.trainable_names().len(), usize::from(trainable));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn streams_are_reproducible_and_cover_answers(seed in 0u64..10_000, setting in 0usize..3) {
        let setting = [Setting::QI, Setting::CI, Setting::DI][setting];
        // QI splits the six question types evenly, so it needs a divisor of six
        let n_tasks = if setting == Setting::QI { 3 } else { StreamConfig::default().n_tasks };
        let cfg = StreamConfig {
            setting,
            n_tasks,
            train_per_task: 120,
            test_per_task: 20,
            seed,
            ..StreamConfig::default()
        };
        let a = generate_stream(&cfg).unwrap();
        let b = generate_stream(&cfg).unwrap();
        let mut seen = vec![false; a.answers.size()];
        for (x, y) in a.tasks.iter().zip(&b.tasks) {
            prop_assert_eq!(&x.train, &y.train);
            prop_assert_eq!(&x.test, &y.test);
            for s in &x.train {
                seen[s.label] = true;
            }
        }
        prop_assert!(seen.iter().all(|s| *s), "dead answers in {:?}", setting);
    }
}
