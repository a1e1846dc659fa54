//! Entropy calibration weights `w = 1 + exp(lambda' h)`, found by damped
//! Newton iterations on the convex dual.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::TrialDataset;
use crate::error::{Error, Result};
use crate::nuisance::{FeatureMap, HistoryTable, NuisanceValues};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Moments {
    First,
    FirstTwo,
    FirstTwoInteractions,
}

impl Moments {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "first" => Some(Moments::First),
            "first2" | "first-two" => Some(Moments::FirstTwo),
            "first2x" | "first-two+interactions" => Some(Moments::FirstTwoInteractions),
            _ => None,
        }
    }

    /// Number of moment columns for `p` features of which `binary` are 0/1.
    pub fn count(&self, p: usize, binary: usize) -> usize {
        match self {
            Moments::First => p,
            Moments::FirstTwo => 2 * p - binary,
            Moments::FirstTwoInteractions => 2 * p - binary + p * (p.saturating_sub(1)) / 2,
        }
    }

    /// Appends the moment vector of `x`. Squares of binary columns are skipped.
    pub fn expand(&self, x: &[f64], binary: &[bool], out: &mut Vec<f64>) {
        out.extend_from_slice(x);
        if *self == Moments::First {
            return;
        }
        for (v, b) in x.iter().zip(binary) {
            if !b {
                out.push(v * v);
            }
        }
        if *self == Moments::FirstTwoInteractions {
            for j in 0..x.len() {
                for k in j + 1..x.len() {
                    out.push(x[j] * x[k]);
                }
            }
        }
    }
}

/// Features and moments used to build calibration constraints.
#[derive(Debug, Clone)]
pub struct CalibrationSpec {
    pub features: Arc<dyn FeatureMap>,
    pub moments: Moments,
    /// Response weights balance baseline covariates only, not the observed
    /// outcome history.
    pub baseline_only: bool,
    /// Response weights are fitted on responders of both arms together. By
    /// default they use the control arm only, the one they reweight.
    pub pooled_response: bool,
}

impl CalibrationSpec {
    pub fn new(features: Arc<dyn FeatureMap>, moments: Moments) -> Self {
        CalibrationSpec {
            features,
            moments,
            baseline_only: false,
            pooled_response: false,
        }
    }

    pub fn baseline_only(mut self) -> Self {
        self.baseline_only = true;
        self
    }

    pub fn pooled_response(mut self) -> Self {
        self.pooled_response = true;
        self
    }
}

/// Find `w_i = 1 + exp(lambda' h_i)` over `subset` with
/// `sum_S w_i h_i = scale * target` and, when `normalize_total` is set,
/// `sum_S w_i = scale`.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub subset: Vec<usize>,
    pub moments: DMatrix<f64>,
    pub target: Vec<f64>,
    pub scale: f64,
    pub normalize_total: bool,
}

#[derive(Debug, Clone)]
pub struct WeightSet {
    pub subset: Vec<usize>,
    pub weights: Vec<f64>,
    /// Multipliers for the original moment columns.
    pub lambda: Vec<f64>,
    /// Multiplier of the total-count constraint (zero when absent).
    pub intercept: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Dual objective after each accepted step, starting from the initial point.
    pub objective_trace: Vec<f64>,
    /// Reference set equals the subset, so the only solution is the limit `w = 1`.
    pub boundary: bool,
}

impl WeightSet {
    /// Weights scattered into an `n`-vector, `NaN` outside the subset.
    pub fn dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![f64::NAN; n];
        for (&i, &w) in self.subset.iter().zip(&self.weights) {
            out[i] = w;
        }
        out
    }
}

struct Standardized {
    cols: Vec<usize>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

fn standardize(h: &DMatrix<f64>, center: bool) -> Standardized {
    let n = h.nrows() as f64;
    let mut out = Standardized {
        cols: Vec::new(),
        center: Vec::new(),
        scale: Vec::new(),
    };
    for j in 0..h.ncols() {
        let col = h.column(j);
        let mean = col.sum() / n;
        let c = if center { mean } else { 0.0 };
        let var = col.iter().map(|v| (v - c) * (v - c)).sum::<f64>() / n;
        let mag = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(var.sqrt() > 1e-12 * mag.max(1e-300)) {
            // constant column: redundant given the total constraint, or all zero
            if center || mag == 0.0 {
                continue;
            }
        }
        out.cols.push(j);
        out.center.push(c);
        out.scale.push(var.sqrt());
    }
    out
}

fn residual_of(problem: &CalibrationProblem, w: &[f64]) -> f64 {
    let h = &problem.moments;
    let mut r = 0.0f64;
    for j in 0..h.ncols() {
        let s: f64 = (0..h.nrows()).map(|i| w[i] * h[(i, j)]).sum();
        r = r.max((s - problem.scale * problem.target[j]).abs());
    }
    if problem.normalize_total {
        r = r.max((w.iter().sum::<f64>() - problem.scale).abs());
    }
    r
}

pub fn solve_entropy_weights(problem: &CalibrationProblem, tol: f64, max_iter: usize) -> Result<WeightSet> {
    let ns = problem.subset.len();
    let m = problem.moments.ncols();
    if ns == 0 {
        return Err(Error::InvalidInput("calibration subset is empty".into()));
    }
    if problem.moments.nrows() != ns || problem.target.len() != m {
        return Err(Error::InvalidInput("calibration dimensions do not match".into()));
    }
    if m == 0 && !problem.normalize_total {
        return Err(Error::InvalidInput("calibration needs at least one constraint".into()));
    }
    if !(problem.scale > 0.0) || problem.target.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("calibration target must be finite with positive scale".into()));
    }
    if problem.normalize_total {
        let ratio = problem.scale / ns as f64;
        if (ratio - 1.0).abs() <= 1e-12 {
            let weights = vec![1.0; ns];
            let residual = residual_of(problem, &weights);
            if residual > tol {
                return Err(Error::CalibrationFailed { iterations: 0, residual });
            }
            return Ok(WeightSet {
                subset: problem.subset.clone(),
                weights,
                lambda: vec![0.0; m],
                intercept: f64::NEG_INFINITY,
                residual,
                iterations: 0,
                objective_trace: Vec::new(),
                boundary: true,
            });
        }
        if ratio < 1.0 {
            return Err(Error::CalibrationFailed {
                iterations: 0,
                residual: (ns as f64 - problem.scale).abs(),
            });
        }
    }

    let st = standardize(&problem.moments, problem.normalize_total);
    let off = usize::from(problem.normalize_total);
    let k = off + st.cols.len();
    let mut ht = DMatrix::zeros(ns, k);
    let mut target = DVector::zeros(k);
    if problem.normalize_total {
        ht.column_mut(0).fill(1.0);
        target[0] = problem.scale;
    }
    for (c, &j) in st.cols.iter().enumerate() {
        for i in 0..ns {
            ht[(i, off + c)] = (problem.moments[(i, j)] - st.center[c]) / st.scale[c];
        }
        target[off + c] = problem.scale * (problem.target[j] - st.center[c]) / st.scale[c];
    }

    let dual = |lam: &DVector<f64>| -> (f64, DVector<f64>) {
        let u = &ht * lam;
        let obj = u.iter().map(|v| v.exp() + v).sum::<f64>() - lam.dot(&target);
        (obj, u)
    };
    let mut lam = DVector::zeros(k);
    if problem.normalize_total {
        lam[0] = (problem.scale / ns as f64 - 1.0).ln();
    }
    let (mut obj, mut u) = dual(&lam);
    let mut trace = vec![obj];
    let mut iterations = 0;
    let to_weights = |u: &DVector<f64>| -> Vec<f64> { u.iter().map(|v| 1.0 + v.exp()).collect() };
    let mut best = residual_of(problem, &to_weights(&u));
    while best > tol && iterations < max_iter {
        iterations += 1;
        let ex: Vec<f64> = u.iter().map(|v| v.exp()).collect();
        let mut grad = -target.clone();
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..ns {
            let row = ht.row(i);
            for a in 0..k {
                grad[a] += (1.0 + ex[i]) * row[a];
                let ea = ex[i] * row[a];
                for b in a..k {
                    hess[(a, b)] += ea * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        let step = newton_step(hess, &grad)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let cand = &lam + &step * t;
            let (o, cu) = dual(&cand);
            if o.is_finite() && o < obj {
                accepted = Some((cand, o, cu));
                break;
            }
            // near the optimum the dual can no longer resolve progress; fall back to the residual
            if o.is_finite() && o <= obj + 1e-12 * obj.abs().max(1.0) {
                let r = residual_of(problem, &to_weights(&cu));
                if r < best {
                    accepted = Some((cand, o, cu));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, o, cu)) = accepted else { break };
        lam = cand;
        obj = o;
        u = cu;
        trace.push(obj);
        best = residual_of(problem, &to_weights(&u));
    }

    // back to the original moment columns
    let mut lambda = vec![0.0; m];
    let mut intercept = if problem.normalize_total { lam[0] } else { 0.0 };
    for (c, &j) in st.cols.iter().enumerate() {
        lambda[j] = lam[off + c] / st.scale[c];
        intercept -= lambda[j] * st.center[c];
    }
    let weights = to_weights(&u);
    let residual = residual_of(problem, &weights);
    if !(residual <= tol) {
        return Err(Error::CalibrationFailed { iterations, residual });
    }
    Ok(WeightSet {
        subset: problem.subset.clone(),
        weights,
        lambda,
        intercept,
        residual,
        iterations,
        objective_trace: trace,
        boundary: false,
    })
}

fn newton_step(hess: DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let k = hess.nrows();
    let base = (0..k).map(|j| hess[(j, j)]).sum::<f64>() / k as f64;
    let mut jitter = 0.0;
    for _ in 0..12 {
        let mut h = hess.clone();
        for j in 0..k {
            h[(j, j)] += jitter;
        }
        if let Some(ch) = nalgebra::linalg::Cholesky::new(h) {
            return Ok(-ch.solve(grad));
        }
        jitter = if jitter == 0.0 { 1e-12 * base.max(1e-300) } else { jitter * 10.0 };
    }
    Err(Error::Numerical("calibration Hessian is not positive definite".into()))
}

fn moment_rows(table: &HistoryTable, n: usize, moments: Moments) -> (Vec<Option<Vec<f64>>>, usize) {
    let rows: Vec<Option<Vec<f64>>> = (0..n).map(|i| table.row(i)).collect();
    let p = rows.iter().flatten().next().map_or(0, |r| r.len());
    let binary: Vec<bool> = (0..p)
        .map(|j| rows.iter().flatten().all(|r| r[j] == 0.0 || r[j] == 1.0))
        .collect();
    let expanded = rows
        .into_iter()
        .map(|r| {
            r.map(|x| {
                let mut out = Vec::new();
                moments.expand(&x, &binary, &mut out);
                out
            })
        })
        .collect::<Vec<_>>();
    let m = expanded.iter().flatten().next().map_or(0, |r| r.len());
    (expanded, m)
}

fn problem_from(
    h: &[Option<Vec<f64>>],
    m: usize,
    reference: &[usize],
    subset: Vec<usize>,
) -> CalibrationProblem {
    let mut target = vec![0.0; m];
    for &i in reference {
        let r = h[i].as_ref().expect("reference row present");
        for j in 0..m {
            target[j] += r[j];
        }
    }
    let nref = reference.len() as f64;
    target.iter_mut().for_each(|v| *v /= nref);
    let moments = DMatrix::from_fn(subset.len(), m, |r, c| h[subset[r]].as_ref().expect("subset row present")[c]);
    CalibrationProblem {
        subset,
        moments,
        target,
        scale: nref,
        normalize_total: true,
    }
}

/// Treatment weights for `arm`: the arm is balanced to the full sample.
pub fn build_treatment_targets(ds: &TrialDataset, spec: &CalibrationSpec, arm: u8) -> Result<CalibrationProblem> {
    let table = HistoryTable::build(ds, spec.features.as_ref(), 1);
    let (h, m) = moment_rows(&table, ds.n(), spec.moments);
    let reference: Vec<usize> = (0..ds.n()).collect();
    let subset: Vec<usize> = (0..ds.n()).filter(|&i| ds.treatment(i) == arm).collect();
    if subset.is_empty() {
        return Err(Error::EmptySubset {
            what: "treatment calibration",
            time: 0,
            arm,
        });
    }
    Ok(problem_from(&h, m, &reference, subset))
}

/// Response weights at visit `s`: control-arm responders balanced to the
/// control subjects observed at `s - 1`, using moments of `H_{s-1}`.
pub fn build_sequential_response_targets(ds: &TrialDataset, spec: &CalibrationSpec, s: usize) -> Result<CalibrationProblem> {
    let visit = if spec.baseline_only { 1 } else { s };
    let table = HistoryTable::build(ds, spec.features.as_ref(), visit);
    let (h, m) = moment_rows(&table, ds.n(), spec.moments);
    let control = |i: usize| spec.pooled_response || ds.treatment(i) == 0;
    let reference: Vec<usize> = (0..ds.n()).filter(|&i| control(i) && ds.response(i, s - 1)).collect();
    let subset: Vec<usize> = (0..ds.n()).filter(|&i| control(i) && ds.response(i, s)).collect();
    if subset.is_empty() {
        return Err(Error::EmptySubset {
            what: "response calibration",
            time: s,
            arm: if spec.pooled_response { 2 } else { 0 },
        });
    }
    Ok(problem_from(&h, m, &reference, subset))
}

/// The full set of weights used by the calibrated estimator.
#[derive(Debug, Clone)]
pub struct CalibrationWeights {
    pub a1: WeightSet,
    pub a0: WeightSet,
    /// `r[s-1]` holds the visit-`s` response weights.
    pub r: Vec<WeightSet>,
}

pub fn calibrate_all(ds: &TrialDataset, spec: &CalibrationSpec, tol: f64, max_iter: usize) -> Result<CalibrationWeights> {
    let a1 = solve_entropy_weights(&build_treatment_targets(ds, spec, 1)?, tol, max_iter)?;
    let a0 = solve_entropy_weights(&build_treatment_targets(ds, spec, 0)?, tol, max_iter)?;
    let r = (1..=ds.t())
        .map(|s| solve_entropy_weights(&build_sequential_response_targets(ds, spec, s)?, tol, max_iter))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationWeights { a1, a0, r })
}

/// Writes one row per (subject, weight type): inverse-probability weights from
/// the fitted nuisances next to the calibration weights, each also divided by
/// its mean over the subjects it applies to.
pub fn write_weights_csv(
    path: impl AsRef<Path>,
    ds: &TrialDataset,
    vals: &NuisanceValues,
    cal: Option<&CalibrationWeights>,
) -> Result<()> {
    let n = ds.n();
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    if let Some(e) = &vals.e {
        columns.push((
            "ipw_a1".into(),
            (0..n).map(|i| if ds.treatment(i) == 1 { 1.0 / e[0][i] } else { f64::NAN }).collect(),
        ));
        columns.push((
            "ipw_a0".into(),
            (0..n).map(|i| if ds.treatment(i) == 0 { 1.0 / (1.0 - e[0][i]) } else { f64::NAN }).collect(),
        ));
    }
    for s in 1..=ds.t() {
        if let (Some(p0), Some(p1)) = (&vals.pi[0], &vals.pi[1]) {
            columns.push((
                format!("ipw_r{s}"),
                (0..n)
                    .map(|i| {
                        if !ds.response(i, s) {
                            return f64::NAN;
                        }
                        let p = if ds.treatment(i) == 1 { &p1[s - 1] } else { &p0[s - 1] };
                        1.0 / p[i]
                    })
                    .collect(),
            ));
        }
    }
    if let Some(c) = cal {
        columns.push(("cal_a1".into(), c.a1.dense(n)));
        columns.push(("cal_a0".into(), c.a0.dense(n)));
        for (k, w) in c.r.iter().enumerate() {
            columns.push((format!("cal_r{}", k + 1), w.dense(n)));
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "subject,weight_type,weight,normalized_weight")?;
    for (name, w) in &columns {
        let present: Vec<f64> = w.iter().copied().filter(|v| v.is_finite()).collect();
        let mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
        for (i, v) in w.iter().enumerate() {
            if v.is_finite() {
                writeln!(f, "{},{},{:?},{:?}", i + 1, name, v, v / mean)?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(h: &[f64], m: usize, target: Vec<f64>, scale: f64) -> CalibrationProblem {
        let n = h.len() / m;
        CalibrationProblem {
            subset: (0..n).collect(),
            moments: DMatrix::from_row_slice(n, m, h),
            target,
            scale,
            normalize_total: false,
        }
    }

    #[test]
    fn unit_moment_three_subjects() {
        let w = solve_entropy_weights(&plain(&[1.0, 1.0, 1.0], 1, vec![6.0], 1.0), 1e-10, 100).unwrap();
        for v in &w.weights {
            assert!((v - 2.0).abs() < 1e-10);
        }
        assert!(w.lambda[0].abs() < 1e-10);
    }

    #[test]
    fn unit_moment_two_subjects() {
        let w = solve_entropy_weights(&plain(&[1.0, 1.0], 1, vec![3.0], 1.0), 1e-10, 100).unwrap();
        for v in &w.weights {
            assert!((v - 1.5).abs() < 1e-10);
        }
    }

    #[test]
    fn counting_moments() {
        assert_eq!(Moments::First.count(1, 0), 1);
        assert_eq!(Moments::FirstTwo.count(2, 0), 4);
        assert_eq!(Moments::FirstTwoInteractions.count(5, 0), 5 + 5 + 10);
        let mut out = Vec::new();
        Moments::FirstTwoInteractions.expand(&[1.0, 2.0, 3.0], &[false; 3], &mut out);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 1.0, 4.0, 9.0, 2.0, 3.0, 6.0]);
    }

    #[test]
    fn infeasible_target_reports_residual() {
        // weights exceed one, so the total cannot be below the subset size
        let err = solve_entropy_weights(&plain(&[1.0, 1.0], 1, vec![1.0], 1.0), 1e-8, 50).unwrap_err();
        assert!(matches!(err, Error::CalibrationFailed { .. }));
    }
}
