use std::sync::Arc;

use j2r_core::calibrate::{build_sequential_response_targets, build_treatment_targets};
use j2r_core::nuisance::RawFeatures;
use j2r_core::{solve_entropy_weights, CalibrationProblem, CalibrationSpec, Moments, TrialDataset};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn problem(h: DMatrix<f64>, target: Vec<f64>, scale: f64, normalize_total: bool) -> CalibrationProblem {
    CalibrationProblem {
        subset: (0..h.nrows()).collect(),
        moments: h,
        target,
        scale,
        normalize_total,
    }
}

#[test]
fn unconstrained_optimum_when_feasible() {
    let p = problem(DMatrix::from_element(3, 1, 1.0), vec![1.0], 6.0, false);
    let w = solve_entropy_weights(&p, 1e-12, 50).unwrap();
    for wi in &w.weights {
        assert!((wi - 2.0).abs() < 1e-10);
    }
    assert!(w.lambda[0].abs() < 1e-10);
}

#[test]
fn uniform_closed_form() {
    let p = problem(DMatrix::from_element(2, 1, 1.0), vec![1.0], 3.0, false);
    let w = solve_entropy_weights(&p, 1e-12, 50).unwrap();
    for wi in &w.weights {
        assert!((wi - 1.5).abs() < 1e-10);
    }
}

/// Dual objective whose gradient is the constraint residual.
fn dual(h: &DMatrix<f64>, total: &[f64], lambda: &[f64]) -> f64 {
    let mut d = 0.0;
    for i in 0..h.nrows() {
        let eta: f64 = (0..h.ncols()).map(|j| lambda[j] * h[(i, j)]).sum();
        d += eta.exp();
        for j in 0..h.ncols() {
            d += lambda[j] * h[(i, j)];
        }
    }
    d - lambda.iter().zip(total).map(|(l, t)| l * t).sum::<f64>()
}

#[test]
fn two_point_problem_matches_dual_grid_search() {
    let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
    let total = [4.0, 2.5];
    let w = solve_entropy_weights(&problem(h.clone(), total.to_vec(), 1.0, false), 1e-12, 100).unwrap();

    let (mut c, mut half) = ([0.0f64, 0.0], 4.0);
    for _ in 0..60 {
        let mut best = (f64::INFINITY, c);
        for i in -10..=10 {
            for j in -10..=10 {
                let l = [c[0] + half * f64::from(i) / 10.0, c[1] + half * f64::from(j) / 10.0];
                let d = dual(&h, &total, &l);
                if d < best.0 {
                    best = (d, l);
                }
            }
        }
        c = best.1;
        half *= 0.5;
    }
    for j in 0..2 {
        assert!((w.lambda[j] - c[j]).abs() < 1e-6, "lambda {j}: {} vs {}", w.lambda[j], c[j]);
    }
    assert!((w.weights[0] - 1.5).abs() < 1e-8);
    assert!((w.weights[1] - 2.5).abs() < 1e-8);
}

#[test]
fn random_feasible_problems_converge() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let ns = rng.gen_range(20..=500);
        let m = rng.gen_range(1..=10);
        let h = DMatrix::from_fn(ns, m, |_, _| rng.gen_range(-1.5..1.5));
        let lambda: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let w: Vec<f64> = (0..ns)
            .map(|i| 1.0 + (0..m).map(|j| lambda[j] * h[(i, j)]).sum::<f64>().exp())
            .collect();
        let scale: f64 = w.iter().sum();
        let target: Vec<f64> = (0..m)
            .map(|j| (0..ns).map(|i| w[i] * h[(i, j)]).sum::<f64>() / scale)
            .collect();
        let normalize = case % 2 == 0;
        let ws = solve_entropy_weights(&problem(h.clone(), target.clone(), scale, normalize), 1e-8, 100)
            .unwrap_or_else(|e| panic!("case {case} (|S| = {ns}, m = {m}): {e}"));
        let mut r = 0.0f64;
        for j in 0..m {
            let s: f64 = (0..ns).map(|i| ws.weights[i] * h[(i, j)]).sum();
            r = r.max((s - scale * target[j]).abs());
        }
        if normalize {
            r = r.max((ws.weights.iter().sum::<f64>() - scale).abs());
        }
        worst = worst.max(r);
        // stationarity: w = 1 + exp(lambda' h + intercept)
        for i in 0..ns {
            let eta: f64 = (0..m).map(|j| ws.lambda[j] * h[(i, j)]).sum::<f64>() + ws.intercept;
            assert!((ws.weights[i] - 1.0 - eta.exp()).abs() <= 1e-8 * ws.weights[i]);
        }
    }
    assert!(worst <= 1e-8, "worst residual {worst}");
}

#[test]
fn dual_objective_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = DMatrix::from_fn(300, 4, |_, _| rng.gen_range(-2.0..2.0));
    let target: Vec<f64> = (0..4).map(|j| 0.3 * (j as f64 - 1.5)).collect();
    let w = solve_entropy_weights(&problem(h, target, 700.0, true), 1e-8, 100).unwrap();
    for pair in w.objective_trace.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-9 * pair[0].abs().max(1.0));
    }
}

fn toy() -> TrialDataset {
    TrialDataset::from_rows(
        vec![vec![0.1, 1.0], vec![-0.2, 0.0], vec![0.3, 1.0], vec![0.0, 0.0], vec![0.5, 2.0], vec![-0.4, 1.0]],
        vec![1, 1, 0, 0, 1, 0],
        vec![
            vec![Some(3.0), Some(2.0)],
            vec![None, None],
            vec![Some(1.0), Some(1.5)],
            vec![Some(2.0), None],
            vec![Some(0.5), Some(0.2)],
            vec![Some(1.2), Some(0.9)],
        ],
    )
    .unwrap()
}

#[test]
fn target_builders_count_moments() {
    let ds = toy();
    let spec = |m| CalibrationSpec::new(Arc::new(RawFeatures), m);
    assert_eq!(build_treatment_targets(&ds, &spec(Moments::First), 1).unwrap().moments.ncols(), 2);
    assert_eq!(build_treatment_targets(&ds, &spec(Moments::FirstTwo), 1).unwrap().moments.ncols(), 4);
    assert_eq!(build_treatment_targets(&ds, &spec(Moments::FirstTwoInteractions), 1).unwrap().moments.ncols(), 5);
    // the visit-2 history adds Y1
    let p = build_sequential_response_targets(&ds, &spec(Moments::First), 2).unwrap();
    assert_eq!(p.moments.ncols(), 3);
    let p = build_sequential_response_targets(&ds, &spec(Moments::First).baseline_only(), 2).unwrap();
    assert_eq!(p.moments.ncols(), 2);
}

#[test]
fn first_visit_targets_control_mean() {
    let ds = toy();
    let spec = CalibrationSpec::new(Arc::new(RawFeatures), Moments::First);
    let p = build_sequential_response_targets(&ds, &spec, 1).unwrap();
    assert_eq!(p.subset, vec![2, 3, 5]);
    assert!((p.target[0] - (0.3 + 0.0 - 0.4) / 3.0).abs() < 1e-15);
    // pooled over arms the reference is the whole sample
    let p = build_sequential_response_targets(&ds, &spec.pooled_response(), 1).unwrap();
    assert_eq!(p.subset, vec![0, 2, 3, 4, 5]);
    let mean0 = (0.1 - 0.2 + 0.3 + 0.0 + 0.5 - 0.4) / 6.0;
    assert!((p.target[0] - mean0).abs() < 1e-15);
}

#[test]
fn balanced_subset_converges_quickly() {
    // the subset already matches the reference mean, so only the total moves
    let h = DMatrix::from_row_slice(4, 1, &[-1.0, 1.0, -2.0, 2.0]);
    let w = solve_entropy_weights(&problem(h, vec![0.0], 10.0, true), 1e-8, 100).unwrap();
    assert!(w.iterations <= 5, "{} iterations", w.iterations);
    for wi in &w.weights {
        assert!((wi - 2.5).abs() < 1e-8);
    }
}

#[test]
fn scale_below_subset_size_is_rejected() {
    let p = problem(DMatrix::from_element(4, 1, 1.0), vec![1.0], 3.0, false);
    assert!(solve_entropy_weights(&p, 1e-8, 50).is_err());
}

proptest! {
    #[test]
    fn affine_rescaling_leaves_weights_unchanged(a in 0.1f64..20.0, b in -5.0f64..5.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = DMatrix::from_fn(80, 2, |_, _| rng.gen_range(-1.0..1.0));
        let target = vec![0.15, -0.1];
        let base = solve_entropy_weights(&problem(h.clone(), target.clone(), 150.0, true), 1e-10, 100).unwrap();
        let mut h2 = h.clone();
        h2.column_mut(1).apply(|v| *v = a * *v + b);
        let t2 = vec![target[0], a * target[1] + b];
        let moved = solve_entropy_weights(&problem(h2, t2, 150.0, true), 1e-10, 100).unwrap();
        for (x, y) in base.weights.iter().zip(&moved.weights) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}
