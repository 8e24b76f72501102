mod common;

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::Rng;

use common::*;
use mfparse::decoder::{
    backward, message_macs, mfvi, mfvi_counted, normalize, posterior_scale_check, posterior_shift_check, MacCounter,
};
use mfparse::oracle::{
    best_arborescence_bruteforce, exact_marginals_local, exact_marginals_single, finite_diff_gradient,
};
use mfparse::scores::{edge_valid, ScoreTensors};
use mfparse::tree::{chu_liu_edmonds, decode, is_tree, tree_weight, DecodeConfig};
use mfparse::Formulation;

fn scores(n: usize, binary_std: f64, seed: u64) -> ScoreTensors {
    ScoreTensors::random(n, 2, 1.0, binary_std, &mut rng(seed))
}

proptest! {
    #[test]
    fn local_columns_are_distributions(n in 1usize..9, t in 0usize..5, seed in any::<u64>()) {
        let s = scores(n, 0.5, seed);
        let p = mfvi(&s, Formulation::Local, t);
        prop_assert_eq!(p.q.len(), t + 1);
        for q in &p.q {
            for j in 0..=n {
                prop_assert_eq!(q[[j, j]], 0.0);
                prop_assert_eq!(q[[j, 0]], 0.0);
            }
            for j in 1..=n {
                let col: f64 = (0..=n).map(|i| q[[i, j]]).sum();
                prop_assert!((col - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_values_are_probabilities(n in 1usize..9, t in 0usize..5, seed in any::<u64>()) {
        let s = scores(n, 2.0, seed);
        let p = mfvi(&s, Formulation::Single, t);
        for q in &p.q {
            for ((i, j), &x) in q.indexed_iter() {
                if edge_valid(i, j) {
                    prop_assert!(x > 0.0 && x < 1.0);
                } else {
                    prop_assert_eq!(x, 0.0);
                }
            }
        }
    }

    #[test]
    fn local_is_invariant_to_per_dependent_shifts(n in 1usize..8, seed in any::<u64>(), c in 0.01f64..50.0) {
        let s = scores(n, 0.5, seed);
        let mut r = rng(seed ^ 1);
        let shifts: Vec<f64> = (0..n).map(|_| r.random_range(-20.0..20.0)).collect();
        let report = posterior_shift_check(&s, &shifts, 3).unwrap();
        prop_assert!(report.max_abs_diff < 1e-9);
        prop_assert_eq!(report.argmax_agreement, 1.0);
        let report = posterior_scale_check(&s, c, 3).unwrap();
        prop_assert!(report.max_abs_diff < 1e-9);
    }

    #[test]
    fn zero_iterations_and_zero_binaries_are_first_order(n in 1usize..8, t in 0usize..6, seed in any::<u64>()) {
        let s = scores(n, 0.5, seed);
        let zeroed = s.with_binary_scaled(0.0);
        for f in [Formulation::Local, Formulation::Single] {
            let first = normalize(&s.edge, f);
            let at_zero = mfvi(&s, f, 0);
            prop_assert_eq!(at_zero.final_q(), &first);
            let q = mfvi(&zeroed, f, t);
            for (a, b) in q.final_q().iter().zip(first.iter()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn message_work_is_cubic(n in 1usize..12, t in 0usize..4) {
        let s = scores(n, 0.5, n as u64);
        let mut counter = MacCounter::default();
        mfvi_counted(&s, Formulation::Local, t, &mut counter);
        prop_assert_eq!(counter.0, t as u64 * message_macs(n));
        prop_assert_eq!(message_macs(n), 3 * (n * (n - 1) * (n - 1)) as u64);
    }

    #[test]
    fn mst_matches_bruteforce(n in 1usize..=5, seed in any::<u64>(), single_root: bool) {
        let mut r = rng(seed);
        let w = Array2::from_shape_fn((n + 1, n + 1), |(i, j)| {
            if edge_valid(i, j) { r.random_range(-5.0..5.0) } else { f64::NEG_INFINITY }
        });
        let fast = chu_liu_edmonds(&w, single_root).unwrap();
        let slow = best_arborescence_bruteforce(&w, single_root).unwrap();
        prop_assert!(is_tree(&fast));
        if single_root {
            prop_assert_eq!(fast.iter().filter(|&&h| h == 0).count(), 1);
        }
        prop_assert!((tree_weight(&w, &fast) - tree_weight(&w, &slow)).abs() < 1e-9);
        prop_assert_eq!(fast, slow);
    }

    #[test]
    fn mst_ties_resolve_lexicographically(n in 1usize..=5, seed in any::<u64>(), single_root: bool) {
        let mut r = rng(seed);
        let w = Array2::from_shape_fn((n + 1, n + 1), |(i, j)| {
            if edge_valid(i, j) { f64::from(r.random_range(0..3)) } else { f64::NEG_INFINITY }
        });
        let fast = chu_liu_edmonds(&w, single_root).unwrap();
        let slow = best_arborescence_bruteforce(&w, single_root).unwrap();
        prop_assert!(is_tree(&fast));
        prop_assert_eq!(tree_weight(&w, &fast), tree_weight(&w, &slow));
        prop_assert_eq!(fast, slow);
    }

    #[test]
    fn decoded_heads_always_form_a_tree(n in 1usize..10, seed in any::<u64>(), single_root: bool) {
        let s = scores(n, 1.0, seed);
        for f in [Formulation::Local, Formulation::Single] {
            let q = mfvi(&s, f, 3);
            let p_label = Array3::from_elem((n + 1, n + 1, 2), 0.5);
            let tree = decode(q.final_q(), &p_label, DecodeConfig { single_root }).unwrap();
            prop_assert!(is_tree(&tree.heads));
            if single_root {
                prop_assert_eq!(tree.heads.iter().filter(|&&h| h == 0).count(), 1);
            }
        }
    }
}

/// Flattens edge, sibling and grandparent scores into one parameter vector.
fn flatten(s: &ScoreTensors) -> Vec<f64> {
    s.edge.iter().chain(s.sib.iter()).chain(s.gp.iter()).copied().collect()
}

fn unflatten(template: &ScoreTensors, x: &[f64]) -> ScoreTensors {
    let mut s = template.clone();
    let (e, rest) = x.split_at(s.edge.len());
    let (sib, gp) = rest.split_at(s.sib.len());
    s.edge.iter_mut().zip(e).for_each(|(a, b)| *a = *b);
    s.sib.iter_mut().zip(sib).for_each(|(a, b)| *a = *b);
    s.gp.iter_mut().zip(gp).for_each(|(a, b)| *a = *b);
    s
}

#[test]
fn unrolled_backward_matches_finite_differences() {
    for (seed, f, n, t) in [
        (1, Formulation::Local, 3, 3),
        (2, Formulation::Single, 3, 3),
        (3, Formulation::Local, 4, 2),
        (4, Formulation::Single, 2, 5),
    ] {
        let s = scores(n, 0.8, seed);
        let mut r = rng(seed + 100);
        let weight = Array2::from_shape_fn((n + 1, n + 1), |_| r.random_range(-1.0..1.0));
        let objective = |sc: &ScoreTensors| -> f64 { (mfvi(sc, f, t).final_q() * &weight).sum() };
        let p = mfvi(&s, f, t);
        let g = backward(&s, &p, &weight);
        let analytic: Vec<f64> = g.edge.iter().chain(g.sib.iter()).chain(g.gp.iter()).copied().collect();
        let numeric = finite_diff_gradient(|x| objective(&unflatten(&s, x)), &flatten(&s), FD_STEP);
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| relative_error(*a, *b))
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{:?} n={} T={} err={}", f, n, t, err);
    }
}

#[test]
fn zeroed_binaries_reproduce_exact_marginals() {
    for n in 1..=3 {
        for seed in 0..20 {
            let s = scores(n, 0.25, seed).with_binary_scaled(0.0);
            let local = exact_marginals_local(&s).unwrap();
            let q = mfvi(&s, Formulation::Local, 3);
            assert!(linf(q.final_q(), &local) <= 1e-12);
            let single = exact_marginals_single(&s).unwrap();
            let q = mfvi(&s, Formulation::Single, 3);
            assert!(linf(q.final_q(), &single) <= 1e-12);
        }
    }
}

#[test]
fn weak_binaries_keep_mean_field_close_to_exact() {
    let mut worst: f64 = 0.0;
    for seed in 0..30 {
        let s = scores(4, 0.25, seed);
        let exact = exact_marginals_local(&s).unwrap();
        worst = worst.max(linf(mfvi(&s, Formulation::Local, 3).final_q(), &exact));
    }
    assert!(worst <= 0.25, "worst L-inf {}", worst);
}
