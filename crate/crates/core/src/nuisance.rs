//! Nuisance functions: propensity scores, response probabilities, sequential
//! outcome means and pattern means, fitted by backward recursion.
//!
//! Fitted values are cached per subject in [`NuisanceValues`]; entries that
//! are undefined for a subject (history not observed) hold `NaN`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::calibrate::{CalibrationSpec, Moments};
use crate::dataset::TrialDataset;
use crate::error::{Error, Result};
use crate::regress::{BasisSpec, ColumnBasis, FitOptions, Link, RegressionModel};

/// Maps the baseline vector (covariates plus stratum dummies) to model features.
pub trait FeatureMap: Send + Sync + fmt::Debug {
    fn map(&self, baseline: &[f64], out: &mut Vec<f64>);

    /// Features of `H_{s-1}`; by default the mapped baseline followed by the raw outcomes.
    fn map_history(&self, baseline: &[f64], outcomes: &[f64], out: &mut Vec<f64>) {
        self.map(baseline, out);
        out.extend_from_slice(outcomes);
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RawFeatures;

impl FeatureMap for RawFeatures {
    fn map(&self, baseline: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(baseline);
    }
}

/// A feature map from a closure.
#[derive(Clone)]
pub struct FnFeatures {
    name: String,
    f: Arc<dyn Fn(&[f64], &mut Vec<f64>) + Send + Sync>,
}

impl FnFeatures {
    pub fn new(name: &str, f: impl Fn(&[f64], &mut Vec<f64>) + Send + Sync + 'static) -> Self {
        FnFeatures {
            name: name.to_string(),
            f: Arc::new(f),
        }
    }
}

impl fmt::Debug for FnFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnFeatures({})", self.name)
    }
}

impl FeatureMap for FnFeatures {
    fn map(&self, baseline: &[f64], out: &mut Vec<f64>) {
        (self.f)(baseline, out)
    }
}

/// One indicator per cell of a fully binary history, dropping the all-zero
/// cell. With an intercept this gives a saturated model.
#[derive(Debug, Clone, Copy, Default)]
pub struct SaturatedFeatures;

impl FeatureMap for SaturatedFeatures {
    fn map(&self, baseline: &[f64], out: &mut Vec<f64>) {
        self.map_history(baseline, &[], out)
    }

    fn map_history(&self, baseline: &[f64], outcomes: &[f64], out: &mut Vec<f64>) {
        let bits = baseline.iter().chain(outcomes);
        let k = baseline.len() + outcomes.len();
        let cell = bits
            .enumerate()
            .fold(0usize, |acc, (j, v)| acc | (usize::from(*v != 0.0) << j));
        for c in 1..(1usize << k) {
            out.push(if c == cell { 1.0 } else { 0.0 });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BasisKind {
    Linear,
    Polynomial(usize),
    Spline { interior_knots: usize },
}

impl BasisKind {
    pub fn spec(&self, q: usize) -> BasisSpec {
        match *self {
            BasisKind::Linear => BasisSpec::identity(q),
            BasisKind::Polynomial(d) => BasisSpec::uniform(q, ColumnBasis::Polynomial(d)),
            BasisKind::Spline { interior_knots } => BasisSpec::splines(q, interior_knots),
        }
    }

    fn default_ridge(&self) -> f64 {
        match self {
            BasisKind::Spline { .. } => 1e-6,
            _ => 0.0,
        }
    }
}

/// Features and basis for one nuisance function.
#[derive(Debug, Clone)]
pub struct NuisanceSpec {
    pub features: Arc<dyn FeatureMap>,
    pub basis: BasisKind,
    pub ridge: Option<f64>,
}

impl NuisanceSpec {
    pub fn new(features: Arc<dyn FeatureMap>, basis: BasisKind) -> Self {
        NuisanceSpec {
            features,
            basis,
            ridge: None,
        }
    }

    pub fn raw(basis: BasisKind) -> Self {
        Self::new(Arc::new(RawFeatures), basis)
    }

    fn options(&self, fit: &FitOptions) -> FitOptions {
        FitOptions {
            ridge: self.ridge.unwrap_or_else(|| fit.ridge.max(self.basis.default_ridge())),
            ..*fit
        }
    }
}

/// Model choices for every nuisance: propensity score, response probability,
/// outcome mean and pattern mean, plus the calibration moments.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub ps: NuisanceSpec,
    pub rp: NuisanceSpec,
    pub om: NuisanceSpec,
    pub pm: NuisanceSpec,
    pub calibration: CalibrationSpec,
    pub fit: FitOptions,
}

impl ModelSpec {
    /// The same features and basis for every nuisance.
    pub fn uniform(features: Arc<dyn FeatureMap>, basis: BasisKind, moments: Moments) -> Self {
        let n = NuisanceSpec::new(features.clone(), basis);
        ModelSpec {
            ps: n.clone(),
            rp: n.clone(),
            om: n.clone(),
            pm: n,
            calibration: CalibrationSpec::new(features, moments),
            fit: FitOptions::default(),
        }
    }
}

/// Feature rows of `H_{s-1}` for every subject with `R_{s-1} = 1`.
pub(crate) struct HistoryTable {
    pos: Vec<usize>,
    data: DMatrix<f64>,
}

const ABSENT: usize = usize::MAX;

impl HistoryTable {
    pub(crate) fn build(ds: &TrialDataset, features: &dyn FeatureMap, s: usize) -> Self {
        let mut pos = vec![ABSENT; ds.n()];
        let mut data = Vec::new();
        let mut base = Vec::with_capacity(ds.baseline_dim());
        let mut count = 0;
        let mut width = 0;
        for (i, slot) in pos.iter_mut().enumerate() {
            if !ds.response(i, s - 1) {
                continue;
            }
            base.clear();
            ds.baseline_into(i, &mut base);
            let before = data.len();
            features.map_history(&base, ds.outcomes_upto(i, s - 1), &mut data);
            width = data.len() - before;
            *slot = count;
            count += 1;
        }
        HistoryTable {
            pos,
            data: DMatrix::from_row_slice(count, width, &data),
        }
    }

    pub(crate) fn row(&self, i: usize) -> Option<Vec<f64>> {
        match self.pos[i] {
            ABSENT => None,
            r => Some(self.data.row(r).iter().copied().collect()),
        }
    }

    fn matrix(&self, subjects: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(subjects.len(), self.data.ncols(), |r, c| {
            self.data[(self.pos[subjects[r]], c)]
        })
    }

    fn predict(&self, model: &RegressionModel) -> Vec<f64> {
        let design = model.basis.expand(&self.data);
        let eta = design * nalgebra::DVector::from_column_slice(&model.coefficients);
        self.pos
            .iter()
            .map(|&p| {
                if p == ABSENT {
                    return f64::NAN;
                }
                match model.link {
                    Link::Identity => eta[p],
                    Link::Logit => crate::regress::expit(eta[p]).clamp(model.clip, 1.0 - model.clip),
                }
            })
            .collect()
    }
}

/// A fitted regression tagged with the nuisance it estimates.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub nuisance: &'static str,
    pub time: usize,
    pub arm: Option<u8>,
    pub level: Option<usize>,
    pub model: RegressionModel,
}

fn fit_on(
    link: Link,
    spec: &NuisanceSpec,
    table: &HistoryTable,
    rows: &[usize],
    y: &[f64],
    fit: &FitOptions,
) -> Result<RegressionModel> {
    let raw = table.matrix(rows);
    let opts = spec.options(fit);
    RegressionModel::fit(link, &spec.basis.spec(raw.ncols()), &raw, y, &opts)
}

fn note(diag: &mut Vec<String>, what: &str, time: usize, arm: Option<u8>, model: &RegressionModel) {
    for d in &model.diagnostics {
        match arm {
            Some(a) => diag.push(format!("{what} (time {time}, arm {a}): {d}")),
            None => diag.push(format!("{what} (time {time}): {d}")),
        }
    }
}

/// Propensity score `e(H_{s-1})` for `s = 1..t`; returns `e[s-1][i]`.
pub fn fit_propensity(
    ds: &TrialDataset,
    spec: &NuisanceSpec,
    fit: &FitOptions,
    diag: &mut Vec<String>,
) -> Result<(Vec<FittedModel>, Vec<Vec<f64>>)> {
    let mut models = Vec::with_capacity(ds.t());
    let mut values = Vec::with_capacity(ds.t());
    for s in 1..=ds.t() {
        let table = HistoryTable::build(ds, spec.features.as_ref(), s);
        let rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.response(i, s - 1)).collect();
        let y: Vec<f64> = rows.iter().map(|&i| f64::from(ds.treatment(i))).collect();
        let treated = y.iter().filter(|&&v| v == 1.0).count();
        if treated == 0 || treated == y.len() {
            return Err(Error::SingleArm { time: s - 1 });
        }
        let model = fit_on(Link::Logit, spec, &table, &rows, &y, fit)?;
        note(diag, "propensity score", s - 1, None, &model);
        values.push(table.predict(&model));
        models.push(FittedModel {
            nuisance: "e",
            time: s - 1,
            arm: None,
            level: None,
            model,
        });
    }
    Ok((models, values))
}

/// Response probability `pi_s(a, H_{s-1})`; returns `pi[a][s-1][i]`, evaluated
/// for every subject with `R_{s-1} = 1` regardless of arm.
pub fn fit_response(
    ds: &TrialDataset,
    spec: &NuisanceSpec,
    fit: &FitOptions,
    diag: &mut Vec<String>,
) -> Result<(Vec<FittedModel>, [Vec<Vec<f64>>; 2])> {
    let mut models = Vec::new();
    let mut values: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for s in 1..=ds.t() {
        let table = HistoryTable::build(ds, spec.features.as_ref(), s);
        for a in 0..2u8 {
            let rows: Vec<usize> = (0..ds.n())
                .filter(|&i| ds.response(i, s - 1) && ds.treatment(i) == a)
                .collect();
            if rows.is_empty() {
                return Err(Error::EmptySubset {
                    what: "response probability",
                    time: s,
                    arm: a,
                });
            }
            let y: Vec<f64> = rows.iter().map(|&i| f64::from(u8::from(ds.response(i, s)))).collect();
            let model = fit_on(Link::Logit, spec, &table, &rows, &y, fit)?;
            note(diag, "response probability", s, Some(a), &model);
            values[a as usize].push(table.predict(&model));
            models.push(FittedModel {
                nuisance: "pi",
                time: s,
                arm: Some(a),
                level: None,
                model,
            });
        }
    }
    Ok((models, values))
}

/// Sequential outcome mean `mu_t^a(H_s)` for `s = 0..t`; returns `mu[s][i]`,
/// where `mu[t][i] = Y_t` for completers.
pub fn fit_outcome_means(
    ds: &TrialDataset,
    spec: &NuisanceSpec,
    fit: &FitOptions,
    arm: u8,
    diag: &mut Vec<String>,
) -> Result<(Vec<FittedModel>, Vec<Vec<f64>>)> {
    let t = ds.t();
    let mut values = vec![Vec::new(); t + 1];
    values[t] = (0..ds.n())
        .map(|i| ds.outcome(i, t).unwrap_or(f64::NAN))
        .collect();
    let mut models = Vec::with_capacity(t);
    for s in (1..=t).rev() {
        let table = HistoryTable::build(ds, spec.features.as_ref(), s);
        let rows: Vec<usize> = (0..ds.n())
            .filter(|&i| ds.response(i, s) && ds.treatment(i) == arm)
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptySubset {
                what: "outcome mean",
                time: s,
                arm,
            });
        }
        let y: Vec<f64> = rows.iter().map(|&i| values[s][i]).collect();
        let model = fit_on(Link::Identity, spec, &table, &rows, &y, fit)?;
        note(diag, "outcome mean", s, Some(arm), &model);
        values[s - 1] = table.predict(&model);
        models.push(FittedModel {
            nuisance: "mu",
            time: s,
            arm: Some(arm),
            level: None,
            model,
        });
    }
    Ok((models, values))
}

/// Pattern means `g_{s+1}(H_0)` for `s = 1..t`; returns `g[s-1][i]`.
///
/// `pi1[s-1]` holds `pi_s(1, H_{s-1})` and `mu0[s]` holds `mu_t^0(H_s)`.
pub fn fit_pattern_means(
    ds: &TrialDataset,
    spec: &NuisanceSpec,
    fit: &FitOptions,
    pi1: &[Vec<f64>],
    mu0: &[Vec<f64>],
    diag: &mut Vec<String>,
) -> Result<(Vec<FittedModel>, Vec<Vec<f64>>)> {
    let t = ds.t();
    let tables: Vec<HistoryTable> = (1..=t)
        .map(|s| HistoryTable::build(ds, spec.features.as_ref(), s))
        .collect();
    let mut models = Vec::new();
    let mut out = Vec::with_capacity(t);
    for s in 1..=t {
        // response at level s, evaluated on H_s
        let mut current: Vec<f64> = (0..ds.n())
            .map(|i| {
                let stay = if s < t { pi1[s][i] } else { 0.0 };
                (1.0 - stay) * mu0[s][i]
            })
            .collect();
        for l in (1..=s).rev() {
            let rows: Vec<usize> = (0..ds.n())
                .filter(|&i| ds.response(i, l) && ds.treatment(i) == 1)
                .collect();
            if rows.is_empty() {
                return Err(Error::EmptySubset {
                    what: "pattern mean",
                    time: l,
                    arm: 1,
                });
            }
            let y: Vec<f64> = rows.iter().map(|&i| current[i]).collect();
            let model = fit_on(Link::Identity, spec, &tables[l - 1], &rows, &y, fit)?;
            note(diag, "pattern mean", s, Some(1), &model);
            let fitted = tables[l - 1].predict(&model);
            current = if l > 1 {
                fitted
                    .iter()
                    .zip(&pi1[l - 1])
                    .map(|(g, p)| p * g)
                    .collect()
            } else {
                fitted
            };
            models.push(FittedModel {
                nuisance: "g",
                time: s,
                arm: Some(1),
                level: Some(l),
                model,
            });
        }
        out.push(current);
    }
    Ok((models, out))
}

/// Per-subject nuisance evaluations consumed by the estimators.
#[derive(Debug, Clone, Default)]
pub struct NuisanceValues {
    /// `e[s-1][i] = e(H_{s-1})`.
    pub e: Option<Vec<Vec<f64>>>,
    /// `pi[a][s-1][i] = pi_s(a, H_{s-1})`.
    pub pi: [Option<Vec<Vec<f64>>>; 2],
    /// `mu[a][s][i] = mu_t^a(H_s)` for `s = 0..=t`.
    pub mu: [Option<Vec<Vec<f64>>>; 2],
    /// `g[s-1][i] = g_{s+1}(H_0)`.
    pub g: Option<Vec<Vec<f64>>>,
    pub diagnostics: Vec<String>,
}

/// All fitted models and their per-subject values.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub models: Vec<FittedModel>,
    pub values: NuisanceValues,
}

impl NuisanceFit {
    pub fn write_coefficients_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "nuisance,time,arm,level,index,coefficient")?;
        for m in &self.models {
            for (k, c) in m.model.coefficients.iter().enumerate() {
                writeln!(
                    f,
                    "{},{},{},{},{},{:?}",
                    m.nuisance,
                    m.time,
                    m.arm.map_or(String::new(), |a| a.to_string()),
                    m.level.map_or(String::new(), |l| l.to_string()),
                    k,
                    c
                )?;
            }
        }
        Ok(())
    }
}

/// Fits every nuisance function in dependency order.
pub fn fit_nuisances(ds: &TrialDataset, spec: &ModelSpec) -> Result<NuisanceFit> {
    let mut diag = Vec::new();
    let (mut models, e) = fit_propensity(ds, &spec.ps, &spec.fit, &mut diag)?;
    let (m, [pi0, pi1]) = fit_response(ds, &spec.rp, &spec.fit, &mut diag)?;
    models.extend(m);
    let (m, mu0) = fit_outcome_means(ds, &spec.om, &spec.fit, 0, &mut diag)?;
    models.extend(m);
    let (m, mu1) = fit_outcome_means(ds, &spec.om, &spec.fit, 1, &mut diag)?;
    models.extend(m);
    let (m, g) = fit_pattern_means(ds, &spec.pm, &spec.fit, &pi1, &mu0, &mut diag)?;
    models.extend(m);
    Ok(NuisanceFit {
        models,
        values: NuisanceValues {
            e: Some(e),
            pi: [Some(pi0), Some(pi1)],
            mu: [Some(mu0), Some(mu1)],
            g: Some(g),
            diagnostics: diag,
        },
    })
}

/// A nuisance value given as one constant or one constant per time index.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ConstValue {
    Scalar(f64),
    PerTime(Vec<f64>),
}

impl ConstValue {
    fn at(&self, k: usize) -> Result<f64> {
        match self {
            ConstValue::Scalar(v) => Ok(*v),
            ConstValue::PerTime(v) => v
                .get(k)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("override has no value for index {k}"))),
        }
    }
}

/// Constant nuisance values supplied by the user. `e`, `pi1`, `pi0` and `g`
/// are indexed by `s = 1..t`; `mu0` and `mu1` by the history index `0..t-1`.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NuisanceOverride {
    pub e: Option<ConstValue>,
    pub pi1: Option<ConstValue>,
    pub pi0: Option<ConstValue>,
    pub mu0: Option<ConstValue>,
    pub mu1: Option<ConstValue>,
    pub g: Option<ConstValue>,
}

impl NuisanceOverride {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidInput(format!("nuisance override: {e}")))
    }
}

impl NuisanceValues {
    /// Values built only from constants; unset nuisances stay absent.
    pub fn constant(ds: &TrialDataset, o: &NuisanceOverride) -> Result<Self> {
        let mut v = NuisanceValues::default();
        v.apply_override(ds, o)?;
        Ok(v)
    }

    pub fn apply_override(&mut self, ds: &TrialDataset, o: &NuisanceOverride) -> Result<()> {
        let t = ds.t();
        // values at H_{s-1} for s = 1..t, defined where R_{s-1} = 1
        let by_time = |c: &ConstValue| -> Result<Vec<Vec<f64>>> {
            (1..=t)
                .map(|s| {
                    let v = c.at(s - 1)?;
                    Ok((0..ds.n())
                        .map(|i| if ds.response(i, s - 1) { v } else { f64::NAN })
                        .collect())
                })
                .collect()
        };
        if let Some(c) = &o.e {
            self.e = Some(by_time(c)?);
        }
        if let Some(c) = &o.pi0 {
            self.pi[0] = Some(by_time(c)?);
        }
        if let Some(c) = &o.pi1 {
            self.pi[1] = Some(by_time(c)?);
        }
        if let Some(c) = &o.g {
            // g_{s+1} is a function of H_0, defined for everyone
            let g: Vec<Vec<f64>> = (1..=t)
                .map(|s| c.at(s - 1).map(|v| vec![v; ds.n()]))
                .collect::<Result<_>>()?;
            self.g = Some(g);
        }
        for (a, c) in [(0usize, &o.mu0), (1, &o.mu1)] {
            if let Some(c) = c {
                let mut mu = by_time(c)?;
                mu.push((0..ds.n()).map(|i| ds.outcome(i, t).unwrap_or(f64::NAN)).collect());
                self.mu[a] = Some(mu);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_features_one_hot() {
        let mut out = Vec::new();
        SaturatedFeatures.map_history(&[1.0, 0.0], &[1.0], &mut out);
        assert_eq!(out.len(), 7);
        assert_eq!(out.iter().sum::<f64>(), 1.0);
        assert_eq!(out[4], 1.0);
        out.clear();
        SaturatedFeatures.map_history(&[0.0, 0.0], &[], &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }
}
