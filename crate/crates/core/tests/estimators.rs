use std::sync::Arc;

use j2r_core::calibrate::calibrate_all;
use j2r_core::estimators::cross::{self, CrossInputs};
use j2r_core::estimators::{eif_values, estimate, EstimatorKind};
use j2r_core::nuisance::{fit_nuisances, BasisKind, ModelSpec, NuisanceValues, RawFeatures};
use j2r_core::sim::{generate, DgpConfig, DiscreteDgp, Setting};
use j2r_core::{Moments, TrialDataset};
use proptest::prelude::*;

fn linear_spec() -> ModelSpec {
    ModelSpec::uniform(Arc::new(RawFeatures), BasisKind::Linear, Moments::First)
}

fn cross_data(n: usize, seed: u64) -> TrialDataset {
    generate(&DgpConfig::new(Setting::CrossSectional, n, seed)).unwrap()
}

#[test]
fn one_visit_code_equals_cross_sectional_code() {
    let spec = linear_spec();
    for seed in 0..100 {
        let ds = cross_data(200 + (seed as usize % 5) * 60, seed);
        let v = fit_nuisances(&ds, &spec).unwrap().values;
        let cal = calibrate_all(&ds, &spec.calibration, 1e-10, 200).unwrap();
        let n = ds.n();
        let r: Vec<bool> = (0..n).map(|i| ds.response(i, 1)).collect();
        let y: Vec<f64> = (0..n).map(|i| ds.outcome(i, 1).unwrap_or(0.0)).collect();
        let pi1 = &v.pi[1].as_ref().unwrap()[0];
        // the one-visit pattern mean is the treated outcome regression
        let g = &v.g.as_ref().unwrap()[0];
        let x = CrossInputs {
            a: ds.treatments(),
            r: &r,
            y: &y,
            e: &v.e.as_ref().unwrap()[0],
            pi1,
            pi0: &v.pi[0].as_ref().unwrap()[0],
            mu1: g,
            mu0: &v.mu[0].as_ref().unwrap()[0],
        };
        let (w1, w0, wr) = (cal.a1.dense(n), cal.a0.dense(n), cal.r[0].dense(n));
        let expected = [
            (EstimatorKind::RpPm, cross::rp_om(&x)),
            (EstimatorKind::PsOm, cross::ps_om(&x)),
            (EstimatorKind::PsOmN, cross::ps_om_n(&x)),
            (EstimatorKind::PsRp, cross::ps_rp(&x)),
            (EstimatorKind::PsRpN, cross::ps_rp_n(&x)),
            (EstimatorKind::Eif, cross::tr(&x)),
            (EstimatorKind::EifN, cross::tr_n(&x)),
            (EstimatorKind::EifC, cross::tr_c(&x, &w1, &w0, &wr)),
        ];
        for (kind, want) in expected {
            let got = estimate(&ds, &v, kind, Some(&cal)).unwrap().tau;
            assert!((got - want).abs() < 1e-12, "seed {seed}, {}: {got} vs {want}", kind.label(1));
        }
    }
}

#[test]
fn centered_influence_has_mean_zero() {
    for (setting, n) in [(Setting::CrossSectional, 500), (Setting::LongitudinalT2, 500)] {
        let ds = generate(&DgpConfig::new(setting, n, 3)).unwrap();
        let v = fit_nuisances(&ds, &linear_spec()).unwrap().values;
        let (_, phi) = eif_values(&ds, &v).unwrap();
        let m = phi.iter().sum::<f64>() / phi.len() as f64;
        assert!(m.abs() < 1e-12, "{m}");
    }
}

#[test]
fn influence_variance_matches_enumeration() {
    for t in 1..=2 {
        let d = DiscreteDgp::dyadic(t);
        let ds = d.sample(100_000, 40 + t as u64).unwrap();
        let v = d.true_values(&ds).unwrap();
        let (_, phi) = eif_values(&ds, &v).unwrap();
        let n = phi.len() as f64;
        let var = phi.iter().map(|p| p * p).sum::<f64>() / n;
        let truth = d.eif_variance();
        assert!((var / truth - 1.0).abs() < 0.05, "t = {t}: {var} vs {truth}");
    }
}

#[test]
fn true_nuisances_give_unbiased_estimate() {
    let d = DiscreteDgp::dyadic(2);
    let ds = d.sample(20_000, 8).unwrap();
    let v = d.true_values(&ds).unwrap();
    let est = estimate(&ds, &v, EstimatorKind::Eif, None).unwrap();
    let se = est.variance().sqrt();
    assert!((est.tau - d.true_tau()).abs() < 3.0 * se, "{} vs {} (se {se})", est.tau, d.true_tau());
}

#[test]
fn complete_data_ps_rp_is_difference_in_means() {
    let x: Vec<Vec<f64>> = (0..6).map(|i| vec![f64::from(i)]).collect();
    let a = vec![1, 0, 1, 0, 1, 0];
    let y = [3.0, 1.0, 4.0, 2.0, 5.0, 0.5];
    let ds = TrialDataset::from_rows(x, a.clone(), y.iter().map(|&v| vec![Some(v)]).collect()).unwrap();
    let n = ds.n();
    let v = NuisanceValues {
        e: Some(vec![vec![0.5; n]]),
        pi: [Some(vec![vec![0.99; n]]), Some(vec![vec![0.99; n]])],
        ..Default::default()
    };
    let got = estimate(&ds, &v, EstimatorKind::PsRp, None).unwrap().tau;
    assert!((got - (4.0 - 3.5 / 3.0)).abs() < 1e-12, "{got}");
}

#[test]
fn hand_kernel_value() {
    // e = 0.5, pi = 1, mu1 = 2, mu0 = 1: the observed treated subject at Y = 2
    // has kernel 1, equal to the effect, so its centered value is zero.
    let ds = TrialDataset::from_rows(vec![vec![0.0]; 2], vec![1, 0], vec![vec![Some(2.0)], vec![Some(1.0)]]).unwrap();
    let v = NuisanceValues {
        e: Some(vec![vec![0.5; 2]]),
        pi: [Some(vec![vec![1.0; 2]]), Some(vec![vec![1.0; 2]])],
        mu: [Some(vec![vec![1.0; 2], vec![2.0, 1.0]]), Some(vec![vec![2.0; 2], vec![2.0, 1.0]])],
        g: Some(vec![vec![2.0; 2]]),
        diagnostics: Vec::new(),
    };
    let est = estimate(&ds, &v, EstimatorKind::Eif, None).unwrap();
    assert!((est.contributions[0] - 1.0).abs() < 1e-15);
    assert!((est.tau - 1.0).abs() < 1e-15);
    assert!(est.influence().iter().all(|p| p.abs() < 1e-15));
}

fn all_kinds(ds: &TrialDataset, spec: &ModelSpec) -> Vec<f64> {
    let v = fit_nuisances(ds, spec).unwrap().values;
    let cal = calibrate_all(ds, &spec.calibration, 1e-10, 200).unwrap();
    EstimatorKind::ALL
        .iter()
        .map(|&k| estimate(ds, &v, k, Some(&cal)).unwrap().tau)
        .collect()
}

fn permuted(ds: &TrialDataset, perm: &[usize]) -> TrialDataset {
    ds.subset(perm)
}

fn scaled(ds: &TrialDataset, c: f64) -> TrialDataset {
    let rows_x = (0..ds.n()).map(|i| ds.covariates(i).to_vec()).collect();
    let rows_y = (0..ds.n())
        .map(|i| (1..=ds.t()).map(|s| ds.outcome(i, s).map(|y| c * y)).collect())
        .collect();
    TrialDataset::from_rows(rows_x, ds.treatments().to_vec(), rows_y).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn estimates_ignore_subject_order(seed in 0u64..500, shift in 1usize..299) {
        let ds = generate(&DgpConfig::new(Setting::LongitudinalT2, 300, seed)).unwrap();
        let perm: Vec<usize> = (0..300).map(|i| (i * 7 + shift) % 300).collect();
        let spec = linear_spec();
        let a = all_kinds(&ds, &spec);
        let b = all_kinds(&permuted(&ds, &perm), &spec);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-8 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn estimates_scale_with_outcomes(seed in 0u64..500, c in 0.2f64..5.0) {
        let ds = generate(&DgpConfig::new(Setting::LongitudinalT2, 300, seed)).unwrap();
        let mut spec = linear_spec();
        spec.calibration = spec.calibration.baseline_only();
        let a = all_kinds(&ds, &spec);
        let b = all_kinds(&scaled(&ds, c), &spec);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((c * x - y).abs() < 1e-6 * (1.0 + y.abs()), "{} vs {}", c * x, y);
        }
    }
}
