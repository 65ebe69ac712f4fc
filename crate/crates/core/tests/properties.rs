mod common;

use std::sync::Arc;

use cmrl_core::disentangle::{self, GumbelConfig, NoiseMode};
use cmrl_core::interaction::interaction_map;
use cmrl_core::objectives::{self, LossBreakdown};
use cmrl_core::train::{auroc, mean_std};
use cmrl_core::*;
use common::*;
use proptest::prelude::*;

fn map_of(e1: &Tensor, e2: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(e1.clone()), tape.constant(e2.clone()));
    let m = interaction_map(&mut tape, a, b).unwrap();
    tape.value(m).clone()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let w = t.last_dim();
    let n = perm.len();
    let data = perm.iter().flat_map(|&old| t.data()[old * w..(old + 1) * w].to_vec()).collect();
    Tensor::new(vec![1, n, w], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interaction_rows_follow_atom_order(n1 in 1usize..6, n2 in 1usize..6, d in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let e1 = random_tensor(&[1, n1, d], &mut r);
        let e2 = random_tensor(&[1, n2, d], &mut r);
        let perm = permutation(n1, &mut r);
        let base = map_of(&e1, &e2);
        let moved = map_of(&permute_rows(&e1, &perm), &e2);
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(&moved.data()[new * n2..(new + 1) * n2], &base.data()[old * n2..(old + 1) * n2]);
        }
        prop_assert!(base.data().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn interaction_map_transposes_under_swap(n1 in 1usize..5, n2 in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let e1 = random_tensor(&[1, n1, 3], &mut r);
        let e2 = random_tensor(&[1, n2, 3], &mut r);
        let (a, b) = (map_of(&e1, &e2), map_of(&e2, &e1));
        for i in 0..n1 {
            for j in 0..n2 {
                prop_assert!((a.data()[i * n2 + j] - b.data()[j * n1 + i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cosine_ignores_positive_row_scale(row in 0usize..4, scale in 0.01f64..100.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let e1 = random_tensor(&[1, 4, 3], &mut r);
        let e2 = random_tensor(&[1, 3, 3], &mut r);
        let mut scaled = e1.clone();
        scaled.data_mut()[row * 3..row * 3 + 3].iter_mut().for_each(|v| *v *= scale);
        let (a, b) = (map_of(&e1, &e2), map_of(&scaled, &e2));
        for j in 0..3 {
            prop_assert!((a.data()[row * 3 + j] - b.data()[row * 3 + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn relaxed_masks_stay_strictly_inside(p in prop::collection::vec(0.0f64..=1.0, 1..50), t in 0.05f64..5.0, seed in any::<u64>()) {
        for scale_noise in [true, false] {
            let cfg = GumbelConfig { temperature: t, scale_noise };
            let l = disentangle::gumbel_sigmoid(&p, &cfg, NoiseMode::Stochastic, &mut rng(seed)).unwrap();
            prop_assert!(l.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn masks_split_embeddings(n in 1usize..6, d in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let h = random_tensor(&[1, n, d], &mut r);
        let eps = random_tensor(&[1, n, d], &mut r);
        let lam: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut r, 0.0..1.0)).collect();
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let lv = tape.constant(Tensor::new(vec![1, n, 1], lam.clone()).unwrap());
        let m = disentangle::disentangle(&mut tape, hv, lv, eps.clone()).unwrap();
        let (c1, s1) = (tape.value(m.c1), tape.value(m.s1));
        for i in 0..n {
            for k in 0..d {
                let at = i * d + k;
                let (hv, ev, l) = (h.data()[at], eps.data()[at], lam[i]);
                prop_assert!((c1.data()[at] - (l * hv + (1.0 - l) * ev)).abs() < 1e-15);
                prop_assert!((s1.data()[at] - (1.0 - l) * hv).abs() < 1e-15);
                prop_assert!((c1.data()[at] + s1.data()[at] - hv - (1.0 - l) * ev).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn banks_exclude_self_without_repeats(b in 1usize..12, k in 1usize..12, seed in any::<u64>()) {
        let bank = objectives::sample_bank(b, k, &mut rng(seed));
        prop_assert_eq!(bank.len(), b);
        for (i, js) in bank.iter().enumerate() {
            let want = if b < 2 { 0 } else { k.min(b - 1) };
            prop_assert_eq!(js.len(), want);
            prop_assert!(js.iter().all(|&j| j != i && j < b));
            prop_assert!(js.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn kfold_tests_cover_each_index_once_per_repeat(n in 5usize..60, k in 2usize..6, repeats in 1usize..4, vf in 0.0f64..=1.0, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let plans = graph::kfold_splits(n, k, repeats, vf, seed).unwrap();
        prop_assert_eq!(plans.len(), k * repeats);
        for chunk in plans.chunks(k) {
            let mut seen = vec![0usize; n];
            for p in chunk {
                prop_assert!(p.is_disjoint());
                prop_assert_eq!(p.train.len() + p.valid.len() + p.test.len(), n);
                for &i in p.held_out().iter() {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn scaffold_split_matches_set_definitions(
        scaffolds in prop::collection::vec(0u64..5, 2..12),
        raw_pairs in prop::collection::vec((0usize..100, 0usize..100), 1..50),
        c in 1usize..4,
        seed in any::<u64>(),
    ) {
        let n = scaffolds.len();
        let pairs: Vec<(usize, usize)> = raw_pairs.iter().map(|&(a, b)| (a % n, b % n)).collect();
        let data = scaffold_dataset(&scaffolds, &pairs);
        let result = graph::scaffold_ood_split(&data, c, 0.5, seed);
        let Some((want_train, want_ood)) = scaffold_brute_force(&scaffolds, &pairs, c) else {
            prop_assert!(result.is_err());
            return Ok(());
        };
        let plan = result.unwrap();
        prop_assert_eq!(&plan.train, &want_train);
        prop_assert_eq!(plan.held_out(), want_ood);
        prop_assert!(plan.is_disjoint());
        prop_assert_eq!(plan.train.len() + plan.valid.len() + plan.test.len(), pairs.len());
    }

    #[test]
    fn random_split_partitions(n in 0usize..200, tf in 0.0f64..0.7, vf in 0.0f64..0.3, seed in any::<u64>()) {
        let p = graph::random_split(n, tf, vf, seed).unwrap();
        prop_assert!(p.is_disjoint());
        prop_assert_eq!(p.train.len() + p.valid.len() + p.test.len(), n);
    }

    #[test]
    fn auroc_is_bounded_and_flips(scores in prop::collection::vec(-3.0f64..3.0, 2..40), labels in prop::collection::vec(any::<bool>(), 2..40)) {
        let n = scores.len().min(labels.len());
        let y: Vec<f64> = labels[..n].iter().map(|&b| f64::from(u8::from(b))).collect();
        let s = &scores[..n];
        match auroc(s, &y) {
            None => prop_assert!(y.iter().all(|&v| v == y[0])),
            Some(a) => {
                prop_assert!((0.0..=1.0).contains(&a));
                let flipped: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
                let b = auroc(s, &flipped).unwrap();
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn population_std_is_shift_invariant(v in prop::collection::vec(-100.0f64..100.0, 1..30), shift in -50.0f64..50.0) {
        let (m, s) = mean_std(&v);
        let moved: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let (m2, s2) = mean_std(&moved);
        prop_assert!((m2 - m - shift).abs() < 1e-9);
        prop_assert!((s2 - s).abs() < 1e-9);
    }

    #[test]
    fn losses_are_non_negative(logits in prop::collection::vec(-8.0f64..8.0, 2..10), seed in any::<u64>()) {
        let n = logits.len();
        let mut r = rng(seed);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![n, 1], logits.clone()).unwrap());
        let y: Vec<f64> = (0..n).map(|k| (k % 2) as f64).collect();
        let bce = objectives::task_loss(&mut tape, z, &y, Task::Classification).unwrap();
        let rmse = objectives::task_loss(&mut tape, z, &y, Task::Regression).unwrap();
        let two = tape.constant(random_tensor(&[n, 2], &mut r));
        let kl_c = objectives::kl_loss(&mut tape, two, Task::Classification).unwrap();
        let kl_r = objectives::kl_loss(&mut tape, two, Task::Regression).unwrap();
        for v in [bce, rmse, kl_c, kl_r] {
            prop_assert!(tape.item(v) >= 0.0);
        }
    }

    #[test]
    fn recombination_is_left_to_right(s in 0.0f64..5.0, c in 0.0f64..5.0, k in 0.0f64..5.0, i in 0.0f64..5.0, l1 in 0.0f64..1.0, l2 in 0.0f64..1.0) {
        let w = objectives::LossWeights { lambda1: l1, lambda2: l2 };
        let mut tape = Tape::new();
        let vars: Vec<Var> = [s, c, k, i].iter().map(|&v| tape.constant(Tensor::scalar(v))).collect();
        let l = objectives::LossVars::combine(&mut tape, vars[0], vars[1], vars[2], vars[3], w).unwrap();
        let b: LossBreakdown = l.breakdown(&tape, w);
        prop_assert_eq!(b.l_final.to_bits(), (s + c + l1 * k + l2 * i).to_bits());
        prop_assert_eq!(b.l_final.to_bits(), b.recombine().to_bits());
    }

    #[test]
    fn dataset_files_round_trip(sizes in prop::collection::vec(1usize..6, 1..6), seed in any::<u64>()) {
        let mut r = rng(seed);
        let graphs: Vec<Arc<Graph>> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| Arc::new(random_graph(&format!("g{i}"), n, 3, 2, &mut r)))
            .collect();
        let pairs = (0..graphs.len())
            .map(|k| PairSample {
                g1: Arc::clone(&graphs[k]),
                g2: Arc::clone(&graphs[(k + 1) % graphs.len()]),
                y: rand::Rng::random_range(&mut r, -1e3..1e3),
                id: format!("p{k}"),
            })
            .collect();
        let data = PairDataset::new(Task::Regression, 3, 0, pairs).unwrap();
        let mut buf = Vec::new();
        graph::write_dataset(&data, &mut buf).unwrap();
        prop_assert_eq!(graph::read_dataset(buf.as_slice()).unwrap(), data);
    }
}
