mod common;

use std::collections::BTreeSet;

use common::*;
use gradmatch::bank::{build_per_batch, build_per_class, build_per_sample, TargetSource};
use gradmatch::config::ExperimentConfig;
use gradmatch::dataset::{induce_class_imbalance, make_gaussian_blobs, split, split_indices};
use gradmatch::model::{Arch, ModelState};
use gradmatch::selectors::{craig_select, craig_select_naive, craig_upper_bound, omp_select, SelectorConfig};
use gradmatch::solver::{eval_e_lambda, solve_nnls_ridge, MatchObjective, SolverOptions};
use gradmatch::{GradientBank, SplitSpec};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn bank_strategy(max_n: usize, max_d: usize) -> impl Strategy<Value = GradientBank> {
    (1..=max_n, 1..=max_d, any::<u64>(), any::<bool>())
        .prop_map(|(n, d, seed, unit)| random_bank(&mut rng(seed), n, d, unit))
}

fn blobs(n_per_class: usize, classes: usize, dim: usize, seed: u64) -> gradmatch::Dataset {
    make_gaussian_blobs(n_per_class, classes, dim, 2.0, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_partition(n in 1usize..300, tf in 0.05f64..1.0, vf in 0.0f64..0.95, seed: u64) {
        prop_assume!(tf + vf <= 1.0);
        let (a, b, c) = split_indices(n, &SplitSpec { train_fraction: tf, validation_fraction: vf, seed }).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_ops_are_deterministic(seed: u64) {
        let d = blobs(20, 3, 4, seed);
        prop_assert_eq!(&d, &blobs(20, 3, 4, seed));
        let spec = SplitSpec { train_fraction: 0.6, validation_fraction: 0.2, seed };
        prop_assert_eq!(split(&d, &spec).unwrap(), split(&d, &spec).unwrap());
        prop_assert!(d.labels().iter().all(|&y| y < d.class_count()));
    }

    #[test]
    fn imbalance_keeps_unaffected_classes(classes in 2usize..6, af in 0.0f64..=1.0, rf in 0.0f64..1.0, seed: u64) {
        let d = blobs(30, classes, 3, seed);
        let out = induce_class_imbalance(&d, af, rf, seed).unwrap();
        let before = d.class_counts();
        let after = out.class_counts();
        let shrunk = (0..classes).filter(|&c| after[c] < before[c]).count();
        prop_assert!(shrunk <= (af * classes as f64).floor() as usize);
        for c in (0..classes).filter(|&c| after[c] == before[c]) {
            let rows_before: Vec<_> = d.indices_of_class(c).iter().map(|&i| d.row(i).to_vec()).collect();
            let rows_after: Vec<_> = out.indices_of_class(c).iter().map(|&i| out.row(i).to_vec()).collect();
            prop_assert_eq!(rows_before, rows_after);
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(hidden in 0usize..5, seed: u64) {
        let arch = if hidden == 0 { Arch::LogisticRegression } else { Arch::Mlp { hidden_width: hidden } };
        let d = blobs(5, 3, 4, seed);
        let mut m = ModelState::init(arch, 4, 3, seed).unwrap();
        for t in m.theta_mut() {
            *t *= 5.0;
        }
        let (_, losses) = m.forward_loss(&d, &(0..d.n_samples()).collect::<Vec<_>>(), None).unwrap();
        prop_assert!(losses.iter().all(|l| *l >= 0.0 && l.is_finite()));
    }

    #[test]
    fn zero_logistic_model_loses_ln_c(classes in 2usize..8, seed: u64) {
        let d = blobs(4, classes, 3, seed);
        let m = ModelState::zeros(Arch::LogisticRegression, 3, classes).unwrap();
        for i in 0..d.n_samples() {
            prop_assert!((m.sample_loss(d.row(i), d.label(i)) - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_target_and_batch_sums_agree(batch in 1usize..17, hidden in 0usize..4, seed: u64) {
        let arch = if hidden == 0 { Arch::LogisticRegression } else { Arch::Mlp { hidden_width: hidden } };
        let d = blobs(15, 3, 4, seed);
        let m = ModelState::init(arch, 4, 3, seed).unwrap();
        let per_sample = build_per_sample(&m, &d, TargetSource::Training).unwrap();
        let h = m.penultimate_width();
        prop_assert_eq!(per_sample.dim(), 3 * (h + 1));
        let sum = per_sample.column_sum();
        let gap = (&sum - &per_sample.target()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(gap < 1e-10);

        let per_batch = build_per_batch(&m, &d, batch, TargetSource::Training, seed).unwrap();
        let covered: BTreeSet<usize> = per_batch.element_map().iter().flatten().copied().collect();
        prop_assert_eq!(covered.len(), d.n_samples());
        for (b, members) in per_batch.element_map().iter().enumerate() {
            let mut expect = Array1::<f64>::zeros(per_batch.dim());
            for &i in members {
                expect += &per_sample.row(i);
            }
            let diff = (&expect - &per_batch.row(b)).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            prop_assert!(diff < 1e-10);
        }
        let batch_sum = per_batch.column_sum();
        prop_assert!((&batch_sum - &sum).iter().all(|v| v.abs() < 1e-9));

        let per_class = build_per_class(&m, &d, 1, TargetSource::Training).unwrap();
        prop_assert_eq!(per_class.dim(), h + 1);
        prop_assert_eq!(per_class.n_elements(), d.class_counts()[1]);
    }

    #[test]
    fn refit_never_increases_error(bank in bank_strategy(8, 6), lambda in 0.01f64..2.0, seed: u64) {
        let n = bank.n_elements();
        let mut r = rng(seed);
        let mut set = Vec::new();
        let mut prev = eval_e_lambda(&bank, &set, lambda).unwrap();
        prop_assert!((prev - bank.target_norm_sq()).abs() < 1e-12);
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        for j in order {
            set.push(j);
            let e = eval_e_lambda(&bank, &set, lambda).unwrap();
            prop_assert!(e <= prev + 1e-9, "E rose from {} to {}", prev, e);
            prev = e;
        }
    }

    #[test]
    fn error_grows_with_lambda(bank in bank_strategy(6, 5), l1 in 0.0f64..2.0, dl in 0.0f64..2.0) {
        let set: Vec<usize> = (0..bank.n_elements()).collect();
        let a = eval_e_lambda(&bank, &set, l1.max(1e-6)).unwrap();
        let b = eval_e_lambda(&bank, &set, l1.max(1e-6) + dl).unwrap();
        prop_assert!(b >= a - 1e-9);
    }

    #[test]
    fn solver_matches_projected_gradient(bank in bank_strategy(3, 6), lambda in 0.01f64..2.0) {
        let set: Vec<usize> = (0..bank.n_elements()).collect();
        let got = solve_nnls_ridge(&bank, &set, &SolverOptions::new(lambda)).unwrap();
        let want = nnls_ridge_pg(&bank, &set, lambda);
        for (a, b) in got.weights.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        prop_assert!(got.weights.iter().all(|w| *w >= 0.0));
        let obj = objective(&bank, &set, &got.weights, lambda);
        prop_assert!((obj - got.objective_value).abs() <= 1e-9 * obj.max(1.0));
    }

    #[test]
    fn solver_matches_support_enumeration(bank in bank_strategy(7, 5), lambda in 0.01f64..2.0) {
        let set: Vec<usize> = (0..bank.n_elements()).collect();
        let got = solve_nnls_ridge(&bank, &set, &SolverOptions::new(lambda)).unwrap();
        let (_, best) = nnls_ridge_exact(&bank, &set, lambda);
        prop_assert!((got.objective_value - best).abs() <= 1e-9 * best.max(1.0));
    }

    #[test]
    fn f_is_complement_of_e_and_monotone(bank in bank_strategy(6, 4), lambda in 0.05f64..1.0) {
        let obj = MatchObjective::new(&bank, lambda);
        let n = bank.n_elements();
        let mut prev = 0.0;
        for k in 0..=n {
            let set: Vec<usize> = (0..k).collect();
            let f = obj.f(&set).unwrap();
            prop_assert_eq!(f, bank.target_norm_sq() - obj.e(&set).unwrap());
            prop_assert!(f >= prev - 1e-9);
            prev = f;
        }
    }

    #[test]
    fn omp_selection_is_well_formed(bank in bank_strategy(12, 6), k in 1usize..12, lambda in 0.01f64..1.0) {
        let k = k.min(bank.n_elements());
        let sel = omp_select(&bank, &SelectorConfig { budget_k: k, lambda, ..SelectorConfig::default() });
        prop_assume!(sel.is_ok());
        let sel = sel.unwrap();
        prop_assert!(sel.indices.len() <= k);
        prop_assert_eq!(sel.indices.iter().collect::<BTreeSet<_>>().len(), sel.indices.len());
        prop_assert!(sel.weights.iter().all(|w| *w >= 0.0));
        for w in sel.residual_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0));
        }
        let last = *sel.residual_trace.last().unwrap();
        prop_assert!((last - eval_e_lambda(&bank, &sel.indices, lambda).unwrap()).abs() <= 1e-8 * last.max(1.0));
    }

    #[test]
    fn craig_lazy_equals_naive(bank in bank_strategy(25, 5), k in 1usize..25) {
        let k = k.min(bank.n_elements());
        let lazy = craig_select(&bank, k).unwrap();
        let naive = craig_select_naive(&bank, k).unwrap();
        prop_assert_eq!(&lazy.indices, &naive.indices);
        prop_assert_eq!(&lazy.weights, &naive.weights);
        prop_assert_eq!(lazy.weights.iter().sum::<f64>(), bank.n_elements() as f64);
    }

    #[test]
    fn upper_bound_dominates_matching_error(n in 2usize..30, d in 1usize..8, seed: u64, frac in 0.01f64..1.0) {
        let mut r = rng(seed);
        let rows = Array2::from_shape_fn((n, d), |_| rand::Rng::random_range(&mut r, -3.0..3.0));
        let target = rows.sum_axis(ndarray::Axis(0));
        let bank = GradientBank::new(rows, target).unwrap();
        let size = ((frac * n as f64).ceil() as usize).clamp(1, n);
        let set = rand::seq::index::sample(&mut r, n, size).into_vec();
        let e0 = eval_e_lambda(&bank, &set, 0.0).unwrap();
        prop_assert!(e0.max(0.0).sqrt() <= craig_upper_bound(&bank, &set) + 1e-9);
    }

    #[test]
    fn config_round_trips(seed: u64, budget in 0.01f64..1.0, kappa in 0.0f64..=1.0) {
        let mut cfg = ExperimentConfig::example();
        cfg.train.seed = seed;
        cfg.train.budget_fraction = budget;
        cfg.train.warm_kappa = kappa;
        cfg.seeds = vec![seed, seed.wrapping_add(1)];
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
