use std::collections::BTreeMap;

use essential::blocks::MhcaBlock;
use essential::config::RunConfig;
use essential::data::synth::{gen_split, SynthSpec};
use essential::data::Split;
use essential::driver::{aia, bwf};
use essential::gradcheck::{grad_check, op_case, DEFAULT_STEP, DEFAULT_TOL};
use essential::memory::store::select_task_memory;
use essential::memory::{memory_usage_bytes, EpisodicStore, MemoryBudget, SamplingStrategy, SemanticStore};
use essential::{OpKind, ParamSet, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn op_gradients_match_finite_differences(
        op in 0..OpKind::ALL.len(),
        rows in 1usize..5,
        cols in 2usize..6,
        seed in any::<u64>(),
    ) {
        let kind = OpKind::ALL[op];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, f) = op_case(kind, rows, cols, &mut rng).unwrap();
        let report = grad_check(&params, f, DEFAULT_STEP, None).unwrap();
        prop_assert!(report.passes(DEFAULT_TOL), "{kind} {rows}x{cols}: {report:?}");
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::normal(&[rows, cols], scale, &mut rng));
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s);
        prop_assert!(v.is_finite());
        for i in 0..rows {
            let sum: f64 = v.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn masked_columns_never_change_the_loss(rows in 1usize..5, cols in 3usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let active: Vec<usize> = (0..cols).filter(|j| j % 2 == 0).collect();
        let labels: Vec<usize> = (0..rows).map(|i| active[i % active.len()]).collect();
        let a = Tensor::normal(&[rows, cols], 1.0, &mut rng);
        let mut b = a.clone();
        for i in 0..rows {
            for j in (0..cols).filter(|j| j % 2 == 1) {
                b.data_mut()[i * cols + j] = rng.random_range(-1e3..1e3);
            }
        }
        let loss = |t: Tensor| {
            let mut tape = Tape::new();
            let x = tape.constant(t);
            let l = tape.masked_cross_entropy(x, &labels, &active).unwrap();
            tape.scalar(l)
        };
        prop_assert_eq!(loss(a).to_bits(), loss(b).to_bits());
    }

    #[test]
    fn attention_ignores_key_order(nk in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let block = MhcaBlock::init(&mut ps, "attn", 4, 2, &mut rng).unwrap();
        let q = Tensor::normal(&[3, 4], 1.0, &mut rng);
        let kv = Tensor::normal(&[nk, 4], 1.0, &mut rng);
        let perm: Vec<usize> = (0..nk).rev().collect();
        let run = |keys: Tensor| {
            let mut tape = Tape::new();
            let (qv, kvv) = (tape.constant(q.clone()), tape.constant(keys));
            let out = block.forward(&mut tape, &ps, qv, kvv).unwrap().out;
            tape.value(out).clone()
        };
        let a = run(kv.clone());
        let b = run(kv.select_rows(&perm).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn gelu_layer_norm_outputs_are_finite(rows in 1usize..4, cols in 1usize..8, scale in 1e-3f64..1e3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::normal(&[rows, cols], scale, &mut rng));
        let g = tape.constant(Tensor::filled(&[cols], 1.0));
        let b = tape.constant(Tensor::zeros(&[cols]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let z = tape.gelu(x);
        prop_assert!(tape.value(y).is_finite() && tape.value(z).is_finite());
    }

    #[test]
    fn memory_respects_per_class_limit(
        per_class in 1usize..7,
        n in 1usize..6,
        l in 1usize..9,
        strategy in 0usize..2,
        seed in any::<u64>(),
    ) {
        let spec = SynthSpec { train_per_class: per_class, num_classes: 4, seed, ..SynthSpec::default() };
        let ds = gen_split(&spec, &[0, 1, 2, 3], Split::Train).unwrap();
        let strategy = [SamplingStrategy::Uniform, SamplingStrategy::Random][strategy];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mem = select_task_memory(0, &ds, n, l, strategy, &mut rng, None, None).unwrap();
        let mut counts = BTreeMap::new();
        for c in &mem.clips {
            *counts.entry(c.label).or_insert(0usize) += 1;
            prop_assert_eq!(c.features.len(), l * spec.d);
        }
        for c in 0..4 {
            prop_assert_eq!(counts.get(&c).copied().unwrap_or(0), per_class.min(n));
        }
        let mut ep = EpisodicStore::new(spec.d, l, n);
        let mut sem = SemanticStore::new(spec.d, 0);
        mem.commit(&mut ep, &mut sem).unwrap();
        prop_assert_eq!(ep.len(), 4 * per_class.min(n));
    }

    #[test]
    fn accounting_matches_closed_form(
        classes in 1u64..20,
        n in 1u64..6,
        l in 1u64..9,
        tasks in 1u64..4,
        prompt_len in 0u64..9,
    ) {
        let d = 8u64;
        let mut ep = EpisodicStore::new(d as usize, l as usize, n as usize);
        let mut sem = SemanticStore::new(d as usize, prompt_len as usize);
        for t in 0..tasks as usize {
            let clips = (0..classes as usize)
                .flat_map(|c| (0..n).map(move |i| (c, i)))
                .map(|(c, i)| essential::memory::StoredClip {
                    task: t,
                    label: t * 100 + c,
                    clip_id: i,
                    features: vec![0.5; (l * d) as usize],
                })
                .collect();
            ep.insert_task(t, clips).unwrap();
            if prompt_len > 0 {
                sem.insert(t, &Tensor::zeros(&[prompt_len as usize, d as usize])).unwrap();
            }
        }
        let budget = MemoryBudget { classes: classes * tasks, n_per_class: n, l, d, tasks, prompt_len }.usage();
        let got = memory_usage_bytes(&ep, &sem);
        prop_assert_eq!(got, budget);
        prop_assert_eq!(got.episodic_bytes, classes * tasks * n * l * d * 4);
        prop_assert_eq!(got.semantic_bytes, if prompt_len > 0 { tasks * prompt_len * d * 4 } else { 0 });
    }

    #[test]
    fn no_forgetting_means_zero_bwf(k in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let diag: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let acc: Vec<Vec<f64>> = (0..k).map(|i| diag[..=i].to_vec()).collect();
        prop_assert_eq!(bwf(&acc).unwrap(), 0.0);
        let aa: Vec<f64> = diag.clone();
        let mean = aa.iter().sum::<f64>() / k as f64;
        prop_assert!((aia(&aa).unwrap() - mean).abs() < 1e-15);
    }

    #[test]
    fn config_echo_round_trips(
        seed in any::<u64>(),
        alpha in 0.0f64..10.0,
        lr in 1e-6f64..1.0,
        l in 1usize..9,
        n in 1usize..20,
    ) {
        let cfg = RunConfig { seed, alpha, lr, sparse_len: l, n_per_class: n, ..RunConfig::default() };
        prop_assert_eq!(RunConfig::parse(&cfg.to_config_string()).unwrap(), cfg);
    }
}
