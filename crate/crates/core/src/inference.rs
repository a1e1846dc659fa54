//! Variance estimates, confidence intervals and the subject-level bootstrap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::calibrate::{calibrate_all, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::dataset::TrialDataset;
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorKind, WeightSummary};
use crate::nuisance::{fit_nuisances, ModelSpec, NuisanceOverride, NuisanceValues};

/// Replicates may fail (e.g. an arm vanishes); more than this fraction is an error.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

/// `n^-2 * sum phi_i^2` for centered influence values.
pub fn eif_variance(phi: &[f64]) -> f64 {
    let n = phi.len() as f64;
    phi.iter().map(|v| v * v).sum::<f64>() / (n * n)
}

/// Two-sided standard normal critical value, 1.959964 at level 0.95.
pub fn z_value(level: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + level / 2.0)
}

pub fn wald_ci(tau: f64, var: f64, level: f64) -> (f64, f64) {
    let half = z_value(level) * var.max(0.0).sqrt();
    (tau - half, tau + half)
}

/// `k`-th order statistic (1-based) with `k = ceil(q * len)`, clamped to the sample.
fn order_stat(sorted: &[f64], q: f64) -> f64 {
    let b = sorted.len();
    let k = ((q * b as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[k.min(b) - 1]
}

pub fn percentile_ci(reps: &[f64], level: f64) -> Result<(f64, f64)> {
    if reps.len() < 2 {
        return Err(Error::InvalidInput("percentile interval needs at least two replicates".into()));
    }
    let mut s = reps.to_vec();
    s.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok((order_stat(&s, alpha / 2.0), order_stat(&s, 1.0 - alpha / 2.0)))
}

/// `tau -/+ c* sqrt(var)`, where `c*` is the level quantile of
/// `|tau_b - tau| / sqrt(var_b)`. Replicates with `var_b <= 0` are dropped.
pub fn symmetric_t_ci(tau: f64, var: f64, reps: &[(f64, f64)], level: f64) -> Result<((f64, f64), usize)> {
    let mut t: Vec<f64> = reps
        .iter()
        .filter(|(_, v)| *v > 0.0)
        .map(|(tb, vb)| (tb - tau).abs() / vb.sqrt())
        .collect();
    let dropped = reps.len() - t.len();
    if t.is_empty() {
        return Err(Error::Numerical("no bootstrap replicate has a positive variance".into()));
    }
    t.sort_by(f64::total_cmp);
    let c = order_stat(&t, level);
    let half = c * var.max(0.0).sqrt();
    Ok(((tau - half, tau + half), dropped))
}

/// Unbiased sample variance.
pub fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
}

/// Substream `r` of the master seed.
pub fn substream(seed: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r);
    rng
}

/// Resampled subject indices of bootstrap replicate `r`.
pub fn replicate_indices(n: usize, seed: u64, r: usize) -> Vec<usize> {
    let mut rng = substream(seed, r as u64);
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

#[derive(Debug, Clone)]
pub struct BootstrapDraws<T> {
    /// Successful replicates in replicate order.
    pub values: Vec<T>,
    /// `(replicate, message)` for each failed replicate.
    pub failures: Vec<(usize, String)>,
    pub requested: usize,
}

/// Runs `pipeline` on `b` subject-level resamples in parallel. Results do not
/// depend on the number of worker threads.
pub fn bootstrap<T, F>(ds: &TrialDataset, b: usize, seed: u64, pipeline: F) -> Result<BootstrapDraws<T>>
where
    T: Send,
    F: Fn(&TrialDataset) -> Result<T> + Sync,
{
    if b < 2 {
        return Err(Error::InvalidInput("bootstrap needs B >= 2".into()));
    }
    let out: Vec<Result<T>> = (0..b)
        .into_par_iter()
        .map(|r| pipeline(&ds.subset(&replicate_indices(ds.n(), seed, r))))
        .collect();
    let mut values = Vec::with_capacity(b);
    let mut failures = Vec::new();
    for (r, res) in out.into_iter().enumerate() {
        match res {
            Ok(v) => values.push(v),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * b as f64 {
        return Err(Error::Bootstrap {
            failed: failures.len(),
            total: b,
        });
    }
    Ok(BootstrapDraws {
        values,
        failures,
        requested: b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiMethod {
    Wald,
    Percentile,
    SymmetricT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMethod {
    Eif,
    Bootstrap,
}

/// Interval choice. `Auto` uses symmetric-t for the influence-function family
/// and percentile intervals for the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CiChoice {
    Auto,
    Wald,
    Percentile,
    SymmetricT,
}

impl CiChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "auto" => Some(CiChoice::Auto),
            "wald" => Some(CiChoice::Wald),
            "percentile" => Some(CiChoice::Percentile),
            "symt" | "symmetric-t" => Some(CiChoice::SymmetricT),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub tau: f64,
    pub variance: f64,
    pub se: f64,
    pub variance_method: VarianceMethod,
    pub lo: f64,
    pub hi: f64,
    pub ci_method: CiMethod,
    pub level: f64,
    pub bootstrap_reps: usize,
    pub bootstrap_failures: usize,
    pub weights: Vec<WeightSummary>,
}

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub kinds: Vec<EstimatorKind>,
    pub ci: CiChoice,
    pub b: usize,
    pub seed: u64,
    pub level: f64,
    pub calibration_tol: f64,
    pub calibration_max_iter: usize,
    pub nuisance_override: Option<NuisanceOverride>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            kinds: EstimatorKind::ALL.to_vec(),
            ci: CiChoice::Auto,
            b: 500,
            seed: 1,
            level: 0.95,
            calibration_tol: DEFAULT_TOL,
            calibration_max_iter: DEFAULT_MAX_ITER,
            nuisance_override: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub reports: Vec<EstimateReport>,
    pub diagnostics: Vec<String>,
}

/// Point estimate and its own variance (influence-function kinds only).
#[derive(Debug, Clone, Copy)]
pub struct PointEstimate {
    pub tau: f64,
    pub eif_var: f64,
}

struct PipelineOut {
    points: Vec<PointEstimate>,
    weights: Vec<Vec<WeightSummary>>,
    diagnostics: Vec<String>,
}

fn run_pipeline(ds: &TrialDataset, spec: &ModelSpec, opts: &AnalysisOptions) -> Result<PipelineOut> {
    let vals = match (&opts.nuisance_override, fit_nuisances(ds, spec)) {
        (None, fit) => fit?.values,
        (Some(o), Ok(fit)) => {
            let mut v = fit.values;
            v.apply_override(ds, o)?;
            v
        }
        // estimators that need only the supplied constants can still run
        (Some(o), Err(e)) => {
            let mut v = NuisanceValues::constant(ds, o)?;
            v.diagnostics.push(format!("model fitting failed ({e}); using the supplied constants only"));
            v
        }
    };
    let cal = if opts.kinds.contains(&EstimatorKind::EifC) {
        Some(calibrate_all(ds, &spec.calibration, opts.calibration_tol, opts.calibration_max_iter)?)
    } else {
        None
    };
    let mut points = Vec::with_capacity(opts.kinds.len());
    let mut weights = Vec::with_capacity(opts.kinds.len());
    for &k in &opts.kinds {
        let est = estimate(ds, &vals, k, cal.as_ref())?;
        points.push(PointEstimate {
            tau: est.tau,
            eif_var: if k.is_eif() { est.variance() } else { f64::NAN },
        });
        weights.push(est.weights);
    }
    Ok(PipelineOut {
        points,
        weights,
        diagnostics: vals.diagnostics,
    })
}

/// Fits the model on `ds`, computes the requested estimators and their intervals.
pub fn analyze(ds: &TrialDataset, spec: &ModelSpec, opts: &AnalysisOptions) -> Result<Analysis> {
    let main = run_pipeline(ds, spec, opts)?;
    let draws = if opts.b >= 2 {
        Some(bootstrap(ds, opts.b, opts.seed, |d| {
            run_pipeline(d, spec, opts).map(|o| o.points)
        })?)
    } else {
        None
    };
    let mut diagnostics = main.diagnostics;
    if let Some(d) = &draws {
        for (r, msg) in &d.failures {
            diagnostics.push(format!("bootstrap replicate {r} failed: {msg}"));
        }
    }
    let t = ds.t();
    let mut reports = Vec::with_capacity(opts.kinds.len());
    for (j, &kind) in opts.kinds.iter().enumerate() {
        let p = main.points[j];
        let reps: Option<Vec<PointEstimate>> = draws.as_ref().map(|d| d.values.iter().map(|v| v[j]).collect());
        let (b_used, failures) = draws
            .as_ref()
            .map_or((0, 0), |d| (d.values.len(), d.failures.len()));
        let summarize = |variance: f64, vm: VarianceMethod, (lo, hi): (f64, f64), cm: CiMethod| EstimateReport {
            estimator: kind.label(t).to_string(),
            tau: p.tau,
            variance,
            se: variance.sqrt(),
            variance_method: vm,
            lo,
            hi,
            ci_method: cm,
            level: opts.level,
            bootstrap_reps: b_used,
            bootstrap_failures: failures,
            weights: main.weights[j].clone(),
        };
        let report = match (&reps, opts.ci, kind.is_eif()) {
            (None, CiChoice::Percentile, _) => {
                return Err(Error::InvalidInput("percentile intervals need B >= 2".into()))
            }
            (None, _, true) => summarize(p.eif_var, VarianceMethod::Eif, wald_ci(p.tau, p.eif_var, opts.level), CiMethod::Wald),
            (None, _, false) => {
                diagnostics.push(format!("{}: no interval without bootstrap replicates", kind.label(t)));
                summarize(f64::NAN, VarianceMethod::Bootstrap, (f64::NAN, f64::NAN), CiMethod::Percentile)
            }
            (Some(r), CiChoice::Wald, _) => {
                let taus: Vec<f64> = r.iter().map(|x| x.tau).collect();
                let v = sample_variance(&taus);
                summarize(v, VarianceMethod::Bootstrap, wald_ci(p.tau, v, opts.level), CiMethod::Wald)
            }
            (Some(r), CiChoice::Auto | CiChoice::SymmetricT, true) => {
                let pairs: Vec<(f64, f64)> = r.iter().map(|x| (x.tau, x.eif_var)).collect();
                let (ci, dropped) = symmetric_t_ci(p.tau, p.eif_var, &pairs, opts.level)?;
                if dropped > 0 {
                    diagnostics.push(format!(
                        "{}: {dropped} replicate(s) with zero variance dropped",
                        kind.label(t)
                    ));
                }
                summarize(p.eif_var, VarianceMethod::Eif, ci, CiMethod::SymmetricT)
            }
            (Some(r), _, _) => {
                let taus: Vec<f64> = r.iter().map(|x| x.tau).collect();
                let v = sample_variance(&taus);
                summarize(v, VarianceMethod::Bootstrap, percentile_ci(&taus, opts.level)?, CiMethod::Percentile)
            }
        };
        reports.push(report);
    }
    Ok(Analysis { reports, diagnostics })
}
