use j2r_core::estimators::{eif_values, estimate, EstimatorKind};
use j2r_core::sim::{true_tau, DgpConfig, DiscreteDgp, Setting, TauMethod};

fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}

#[test]
fn identification_formulas_agree_by_enumeration() {
    for t in 1..=2 {
        let d = DiscreteDgp::dyadic(t);
        let id = d.identification();
        let tau = d.true_tau();
        assert_close(id.propensity_outcome, tau, 1e-12, "ps-om formula");
        assert_close(id.propensity_response, tau, 1e-12, "ps-rp formula");
        assert_close(id.eif_mean, tau, 1e-12, "eif mean");
    }
}

#[test]
fn estimators_on_exact_population_match_enumeration() {
    for t in 1..=2 {
        let d = DiscreteDgp::dyadic(t);
        let pop = d.population(d.population_size()).unwrap();
        let vals = d.true_values(&pop).unwrap();
        let tau = d.true_tau();
        for kind in [
            EstimatorKind::RpPm,
            EstimatorKind::PsOm,
            EstimatorKind::PsOmN,
            EstimatorKind::PsRp,
            EstimatorKind::PsRpN,
            EstimatorKind::Eif,
            EstimatorKind::EifN,
        ] {
            let est = estimate(&pop, &vals, kind, None).unwrap();
            assert_close(est.tau, tau, 1e-10, kind.label(t));
        }
        let (_, phi) = eif_values(&pop, &vals).unwrap();
        let v: f64 = phi.iter().map(|p| p * p).sum::<f64>() / phi.len() as f64;
        assert_close(v, d.eif_variance(), 1e-10, "population eif variance");
    }
}

#[test]
fn spec_closed_form_example() {
    let mut d = DiscreteDgp::dyadic(1);
    d.px = [0.5, 0.5, 0.0, 0.0];
    d.pi1[1] = [0.5; 4];
    d.y_high = 2.0;
    d.q1[1] = [0.5, 1.0, 0.5, 1.0];
    d.q1[0] = [0.0, 0.5, 0.0, 0.5];
    let mut cfg = DgpConfig::new(Setting::DiscreteOracle, 10, 1);
    cfg.discrete = d;
    assert_close(true_tau(&cfg, TauMethod::Enumeration).unwrap(), 0.5, 1e-15, "closed form");
}
