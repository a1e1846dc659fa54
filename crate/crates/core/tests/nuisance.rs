use std::sync::Arc;

use j2r_core::estimators::delta_values;
use j2r_core::nuisance::{fit_nuisances, BasisKind, ModelSpec, RawFeatures, SaturatedFeatures};
use j2r_core::sim::DiscreteDgp;
use j2r_core::{Moments, TrialDataset};

fn saturated() -> ModelSpec {
    ModelSpec::uniform(Arc::new(SaturatedFeatures), BasisKind::Linear, Moments::First)
}

fn cell(ds: &TrialDataset, i: usize) -> usize {
    let x = ds.covariates(i);
    usize::from(x[0] != 0.0) + 2 * usize::from(x[1] != 0.0)
}

fn y1(ds: &TrialDataset, i: usize) -> usize {
    usize::from(ds.outcome(i, 1).unwrap() != 0.0)
}

/// Sample mean of `f` over subjects passing `keep`.
fn mean(ds: &TrialDataset, keep: impl Fn(usize) -> bool, f: impl Fn(usize) -> f64) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for i in (0..ds.n()).filter(|&i| keep(i)) {
        s += f(i);
        c += 1.0;
    }
    s / c
}

fn sample(t: usize) -> TrialDataset {
    DiscreteDgp::dyadic(t).sample(6000, 17).unwrap()
}

/// Cell tables indexed by `x` or `(x, y1)`, built once from counts.
struct Tables {
    e0: [f64; 4],
    pi1: [[f64; 4]; 2],
    pi2: [[[f64; 2]; 4]; 2],
    /// `E[Y_2 | H_1, A = a, R_2 = 1]`
    m1: [[[f64; 2]; 4]; 2],
    /// `f(Y_1 = y | X, A = a, R_1 = 1)`
    f1: [[[f64; 2]; 4]; 2],
}

impl Tables {
    fn build(ds: &TrialDataset) -> Self {
        let mut t = Tables {
            e0: [0.0; 4],
            pi1: [[0.0; 4]; 2],
            pi2: [[[0.0; 2]; 4]; 2],
            m1: [[[0.0; 2]; 4]; 2],
            f1: [[[0.0; 2]; 4]; 2],
        };
        for x in 0..4 {
            t.e0[x] = mean(ds, |j| cell(ds, j) == x, |j| f64::from(ds.treatment(j)));
            for a in 0..2u8 {
                let ax = |j: usize| ds.treatment(j) == a && cell(ds, j) == x;
                t.pi1[a as usize][x] = mean(ds, ax, |j| f64::from(u8::from(ds.response(j, 1))));
                for y in 0..2 {
                    let axy = |j: usize| ax(j) && ds.response(j, 1) && y1(ds, j) == y;
                    t.f1[a as usize][x][y] = mean(ds, |j| ax(j) && ds.response(j, 1), |j| f64::from(u8::from(y1(ds, j) == y)));
                    t.pi2[a as usize][x][y] = mean(ds, axy, |j| f64::from(u8::from(ds.response(j, 2))));
                    t.m1[a as usize][x][y] = mean(ds, |j| axy(j) && ds.response(j, 2), |j| ds.outcome(j, 2).unwrap());
                }
            }
        }
        t
    }
}

#[test]
fn saturated_probabilities_equal_cell_frequencies() {
    let ds = sample(2);
    let tb = Tables::build(&ds);
    let v = fit_nuisances(&ds, &saturated()).unwrap().values;
    let e = v.e.as_ref().unwrap();
    for i in 0..ds.n() {
        let x = cell(&ds, i);
        assert!((e[0][i] - tb.e0[x]).abs() < 1e-8);
        for a in 0..2 {
            let pi = v.pi[a].as_ref().unwrap();
            assert!((pi[0][i] - tb.pi1[a][x]).abs() < 1e-8);
            if ds.response(i, 1) {
                assert!((pi[1][i] - tb.pi2[a][x][y1(&ds, i)]).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn sequential_means_match_composed_cell_means() {
    let ds = sample(2);
    let tb = Tables::build(&ds);
    let v = fit_nuisances(&ds, &saturated()).unwrap().values;
    let mu0 = v.mu[0].as_ref().unwrap();
    let g = v.g.as_ref().unwrap();
    for x in 0..4 {
        // composed means over the empirical distribution of Y1 in the arm
        let mu_h0: f64 = (0..2).map(|y| tb.f1[0][x][y] * tb.m1[0][x][y]).sum();
        let g2: f64 = (0..2).map(|y| tb.f1[1][x][y] * (1.0 - tb.pi2[1][x][y]) * tb.m1[0][x][y]).sum();
        let g3: f64 = (0..2).map(|y| tb.f1[1][x][y] * tb.pi2[1][x][y] * tb.m1[1][x][y]).sum();
        for i in (0..ds.n()).filter(|&i| cell(&ds, i) == x) {
            assert!((mu0[0][i] - mu_h0).abs() < 1e-8, "mu^0(H0)");
            assert!((g[0][i] - g2).abs() < 1e-8, "g_2");
            assert!((g[1][i] - g3).abs() < 1e-8, "g_3");
            if ds.response(i, 1) {
                assert!((mu0[1][i] - tb.m1[0][x][y1(&ds, i)]).abs() < 1e-8, "mu^0(H1)");
            }
        }
    }
}

#[test]
fn delta_matches_density_ratio() {
    let ds = sample(2);
    let tb = Tables::build(&ds);
    let v = fit_nuisances(&ds, &saturated()).unwrap().values;
    let delta = delta_values(&ds, &v).unwrap();
    for i in 0..ds.n() {
        assert_eq!(delta[0][i], 1.0);
        if !ds.response(i, 1) {
            assert!(delta[1][i].is_nan());
            continue;
        }
        let (x, y) = (cell(&ds, i), y1(&ds, i));
        let oracle = (tb.f1[1][x][y] * tb.pi1[1][x]) / (tb.f1[0][x][y] * tb.pi1[0][x]);
        assert!((delta[1][i] - oracle).abs() < 1e-6, "{} vs {oracle}", delta[1][i]);
    }
}

#[test]
fn constant_outcomes_give_constant_means() {
    let base = DiscreteDgp::dyadic(2).sample(500, 3).unwrap();
    let rows_x: Vec<Vec<f64>> = (0..base.n()).map(|i| base.covariates(i).to_vec()).collect();
    let rows_y: Vec<Vec<Option<f64>>> = (0..base.n())
        .map(|i| (1..=2).map(|s| base.outcome(i, s).map(|_| 2.5)).collect())
        .collect();
    let ds = TrialDataset::from_rows(rows_x, base.treatments().to_vec(), rows_y).unwrap();
    let spec = ModelSpec::uniform(Arc::new(RawFeatures), BasisKind::Linear, Moments::First);
    let v = fit_nuisances(&ds, &spec).unwrap().values;
    for a in 0..2 {
        for s in 0..2 {
            for (i, m) in v.mu[a].as_ref().unwrap()[s].iter().enumerate() {
                if ds.response(i, s) {
                    assert!((m - 2.5).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn full_response_is_clipped() {
    let rows_x: Vec<Vec<f64>> = (0..20).map(|i| vec![f64::from(i % 5)]).collect();
    let a: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
    let rows_y: Vec<Vec<Option<f64>>> = (0..20).map(|i| vec![Some(f64::from(i))]).collect();
    let ds = TrialDataset::from_rows(rows_x, a, rows_y).unwrap();
    let spec = ModelSpec::uniform(Arc::new(RawFeatures), BasisKind::Linear, Moments::First);
    let v = fit_nuisances(&ds, &spec).unwrap().values;
    for p in &v.pi[1].as_ref().unwrap()[0] {
        assert!((p - 0.99).abs() < 1e-12);
    }
}

#[test]
fn single_arm_is_an_error() {
    let ds = TrialDataset::from_rows(vec![vec![0.0], vec![1.0]], vec![1, 1], vec![vec![Some(1.0)], vec![None]]).unwrap();
    let spec = ModelSpec::uniform(Arc::new(RawFeatures), BasisKind::Linear, Moments::First);
    assert!(matches!(fit_nuisances(&ds, &spec), Err(j2r_core::Error::SingleArm { .. })));
}
