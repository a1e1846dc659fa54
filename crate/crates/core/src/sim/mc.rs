//! Monte Carlo harness: replicate, fit, estimate, interval, aggregate.

use std::fmt::Write as _;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use super::{
    generate_with, longitudinal_spec, parametric, true_tau, z_map, DgpConfig, Setting, SpecCell,
    TauMethod, CROSS_TAU, LONG_TAU,
};
use crate::calibrate::{calibrate_all, CalibrationSpec, CalibrationWeights, Moments, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::dataset::TrialDataset;
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorKind};
use crate::inference::{
    bootstrap, percentile_ci, sample_variance, substream, symmetric_t_ci, wald_ci, PointEstimate,
};
use crate::nuisance::{
    fit_nuisances, fit_outcome_means, fit_pattern_means, fit_propensity, fit_response, BasisKind, ModelSpec,
    NuisanceValues, SaturatedFeatures,
};
use crate::regress::FitOptions;

#[derive(Debug, Clone)]
pub struct McConfig {
    /// Design, sample size per replicate and master seed.
    pub dgp: DgpConfig,
    /// Specification cells; only used by the single-visit design.
    pub cells: Vec<SpecCell>,
    pub kinds: Vec<EstimatorKind>,
    pub reps: usize,
    /// Bootstrap replicates per Monte Carlo replicate; below 2 disables the bootstrap.
    pub b: usize,
    pub level: f64,
    /// Overrides the reference value of the true effect.
    pub true_tau: Option<f64>,
    /// Replaces the fixed working models of the multi-visit and discrete designs.
    pub spec: Option<ModelSpec>,
}

impl McConfig {
    pub fn new(setting: Setting, n: usize, reps: usize, b: usize, seed: u64) -> Self {
        McConfig {
            dgp: DgpConfig::new(setting, n, seed),
            cells: SpecCell::grid(),
            kinds: EstimatorKind::ALL.to_vec(),
            reps,
            b,
            level: 0.95,
            true_tau: None,
            spec: None,
        }
    }
}

/// Metrics for one estimator in one cell. Bias, SD, SE and CI length are on
/// the outcome scale; coverage is a fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRow {
    pub cell: String,
    pub kind: EstimatorKind,
    pub estimator: String,
    pub reps: usize,
    pub bias: f64,
    /// `NaN` with fewer than two replicates.
    pub sd: f64,
    pub se: f64,
    pub coverage: f64,
    pub ci_length: f64,
    /// Replicates that produced an interval.
    pub ci_reps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub setting: Setting,
    pub n: usize,
    pub reps: usize,
    pub b: usize,
    pub level: f64,
    pub true_tau: f64,
    pub rows: Vec<SimRow>,
    pub failed: Vec<(usize, String)>,
    /// Average fraction of subjects missing at each visit.
    pub missing_rates: Vec<f64>,
}

enum Design {
    Cross(Vec<SpecCell>),
    Fixed(ModelSpec),
}

impl Design {
    fn cell_labels(&self) -> Vec<String> {
        match self {
            Design::Cross(cells) => cells.iter().map(SpecCell::label).collect(),
            Design::Fixed(_) => vec!["-".to_string()],
        }
    }

    fn points(&self, ds: &TrialDataset, kinds: &[EstimatorKind]) -> Result<Vec<PointEstimate>> {
        let calibrated = kinds.contains(&EstimatorKind::EifC);
        match self {
            Design::Fixed(spec) => {
                let vals = fit_nuisances(ds, spec)?.values;
                let cal = if calibrated {
                    Some(calibrate_all(ds, &spec.calibration, DEFAULT_TOL, DEFAULT_MAX_ITER)?)
                } else {
                    None
                };
                points_for(ds, &vals, kinds, cal.as_ref())
            }
            Design::Cross(cells) => {
                let need = |z: bool| cells.iter().any(|c| [c.ps, c.rp, c.om].contains(&z));
                let z = need(true).then(|| fit_variant(ds, true)).transpose()?;
                let x = need(false).then(|| fit_variant(ds, false)).transpose()?;
                let cal = if calibrated {
                    let spec = CalibrationSpec::new(z_map(), Moments::First);
                    Some(calibrate_all(ds, &spec, DEFAULT_TOL, DEFAULT_MAX_ITER)?)
                } else {
                    None
                };
                let pick = |c: bool| if c { z.as_ref() } else { x.as_ref() }.expect("variant fitted");
                let mut out = Vec::with_capacity(cells.len() * kinds.len());
                for c in cells {
                    let vals = NuisanceValues {
                        e: pick(c.ps).e.clone(),
                        pi: pick(c.rp).pi.clone(),
                        mu: pick(c.om).mu.clone(),
                        g: pick(c.om).g.clone(),
                        diagnostics: Vec::new(),
                    };
                    out.extend(points_for(ds, &vals, kinds, cal.as_ref())?);
                }
                Ok(out)
            }
        }
    }
}

/// All single-visit nuisances with either the transformed or the raw covariates.
fn fit_variant(ds: &TrialDataset, correct: bool) -> Result<NuisanceValues> {
    let spec = parametric(correct);
    let fit = FitOptions::default();
    let mut diag = Vec::new();
    let (_, e) = fit_propensity(ds, &spec, &fit, &mut diag)?;
    let (_, [pi0, pi1]) = fit_response(ds, &spec, &fit, &mut diag)?;
    let (_, mu0) = fit_outcome_means(ds, &spec, &fit, 0, &mut diag)?;
    let (_, mu1) = fit_outcome_means(ds, &spec, &fit, 1, &mut diag)?;
    let (_, g) = fit_pattern_means(ds, &spec, &fit, &pi1, &mu0, &mut diag)?;
    Ok(NuisanceValues {
        e: Some(e),
        pi: [Some(pi0), Some(pi1)],
        mu: [Some(mu0), Some(mu1)],
        g: Some(g),
        diagnostics: diag,
    })
}

fn points_for(
    ds: &TrialDataset,
    vals: &NuisanceValues,
    kinds: &[EstimatorKind],
    cal: Option<&CalibrationWeights>,
) -> Result<Vec<PointEstimate>> {
    kinds
        .iter()
        .map(|&k| {
            let est = estimate(ds, vals, k, cal)?;
            Ok(PointEstimate {
                tau: est.tau,
                eif_var: if k.is_eif() { est.variance() } else { f64::NAN },
            })
        })
        .collect()
}

/// `(se, lo, hi)` for one estimate.
type Interval = Option<(f64, f64, f64)>;

struct RepOut {
    taus: Vec<f64>,
    intervals: Vec<Interval>,
    missing: Vec<f64>,
}

fn interval(
    setting: Setting,
    kind: EstimatorKind,
    p: PointEstimate,
    reps: Option<&[PointEstimate]>,
    level: f64,
) -> Interval {
    let eif_wald = || {
        let (lo, hi) = wald_ci(p.tau, p.eif_var, level);
        Some((p.eif_var.sqrt(), lo, hi))
    };
    let Some(reps) = reps else {
        return if kind.is_eif() { eif_wald() } else { None };
    };
    let taus: Vec<f64> = reps.iter().map(|r| r.tau).collect();
    let v = sample_variance(&taus);
    if setting == Setting::CrossSectional {
        let (lo, hi) = wald_ci(p.tau, v, level);
        return Some((v.sqrt(), lo, hi));
    }
    if kind.is_eif() {
        let pairs: Vec<(f64, f64)> = reps.iter().map(|r| (r.tau, r.eif_var)).collect();
        symmetric_t_ci(p.tau, p.eif_var, &pairs, level)
            .ok()
            .map(|((lo, hi), _)| (p.eif_var.sqrt(), lo, hi))
    } else {
        percentile_ci(&taus, level).ok().map(|(lo, hi)| (v.sqrt(), lo, hi))
    }
}

fn replicate(cfg: &McConfig, design: &Design, r: usize) -> Result<RepOut> {
    let master = cfg.dgp.seed;
    let ds = generate_with(&cfg.dgp, &mut substream(master, 2 * r as u64))?;
    let points = design.points(&ds, &cfg.kinds)?;
    let draws = if cfg.b >= 2 {
        let seed = substream(master, 2 * r as u64 + 1).gen::<u64>();
        Some(bootstrap(&ds, cfg.b, seed, |d| design.points(d, &cfg.kinds))?)
    } else {
        None
    };
    let k = cfg.kinds.len();
    let intervals = points
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let reps: Option<Vec<PointEstimate>> = draws.as_ref().map(|d| d.values.iter().map(|v| v[j]).collect());
            interval(cfg.dgp.setting, cfg.kinds[j % k], p, reps.as_deref(), cfg.level)
        })
        .collect();
    let missing = (1..=ds.t())
        .map(|s| (0..ds.n()).filter(|&i| !ds.response(i, s)).count() as f64 / ds.n() as f64)
        .collect();
    Ok(RepOut {
        taus: points.iter().map(|p| p.tau).collect(),
        intervals,
        missing,
    })
}

fn reference_tau(cfg: &McConfig) -> Result<f64> {
    if let Some(v) = cfg.true_tau {
        return Ok(v);
    }
    let d = &cfg.dgp;
    let defaults = DgpConfig::new(d.setting, d.n, d.seed);
    let standard = d.covariates == defaults.covariates && d.cross == defaults.cross && d.long == defaults.long;
    match d.setting {
        Setting::DiscreteOracle => true_tau(d, TauMethod::Enumeration),
        Setting::CrossSectional if standard => Ok(CROSS_TAU),
        Setting::LongitudinalT2 if standard => Ok(LONG_TAU),
        _ => true_tau(d, TauMethod::McLargeN { draws: 1_000_000 }),
    }
}

/// Runs the Monte Carlo study. Replicate `r` draws its data from substream
/// `2r` of the master seed and seeds its bootstrap from substream `2r + 1`,
/// so the report does not depend on the number of threads.
pub fn run_mc(cfg: &McConfig) -> Result<SimReport> {
    if cfg.reps == 0 {
        return Err(Error::InvalidInput("reps must be at least 1".into()));
    }
    if cfg.kinds.is_empty() {
        return Err(Error::InvalidInput("no estimators requested".into()));
    }
    cfg.dgp.validate()?;
    let design = match cfg.dgp.setting {
        Setting::CrossSectional => {
            if cfg.cells.is_empty() {
                return Err(Error::InvalidInput("no specification cells requested".into()));
            }
            Design::Cross(cfg.cells.clone())
        }
        _ if cfg.spec.is_some() => Design::Fixed(cfg.spec.clone().expect("checked")),
        Setting::LongitudinalT2 => Design::Fixed(longitudinal_spec()),
        Setting::DiscreteOracle => Design::Fixed(ModelSpec::uniform(
            Arc::new(SaturatedFeatures),
            BasisKind::Linear,
            Moments::First,
        )),
    };
    let tau0 = reference_tau(cfg)?;
    let outs: Vec<Result<RepOut>> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| replicate(cfg, &design, r))
        .collect();
    let mut ok = Vec::with_capacity(cfg.reps);
    let mut failed = Vec::new();
    for (r, o) in outs.into_iter().enumerate() {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => failed.push((r, e.to_string())),
        }
    }
    if ok.is_empty() {
        return Err(Error::Numerical(format!(
            "all {} replicates failed; first error: {}",
            cfg.reps, failed[0].1
        )));
    }
    let t = if cfg.dgp.setting == Setting::CrossSectional {
        1
    } else if cfg.dgp.setting == Setting::LongitudinalT2 {
        2
    } else {
        cfg.dgp.discrete.t
    };
    let mut rows = Vec::new();
    for (c, cell) in design.cell_labels().into_iter().enumerate() {
        for (k, &kind) in cfg.kinds.iter().enumerate() {
            let j = c * cfg.kinds.len() + k;
            let taus: Vec<f64> = ok.iter().map(|o| o.taus[j]).collect();
            let cis: Vec<(f64, f64, f64)> = ok.iter().filter_map(|o| o.intervals[j]).collect();
            let m = taus.len() as f64;
            let mean_tau = taus.iter().sum::<f64>() / m;
            let nc = cis.len() as f64;
            let avg = |f: &dyn Fn(&(f64, f64, f64)) -> f64| {
                if cis.is_empty() {
                    f64::NAN
                } else {
                    cis.iter().map(f).sum::<f64>() / nc
                }
            };
            rows.push(SimRow {
                cell: cell.clone(),
                kind,
                estimator: kind.label(t).to_string(),
                reps: taus.len(),
                bias: mean_tau - tau0,
                sd: if taus.len() >= 2 { sample_variance(&taus).sqrt() } else { f64::NAN },
                se: avg(&|c| c.0),
                coverage: avg(&|c| if c.1 <= tau0 && tau0 <= c.2 { 1.0 } else { 0.0 }),
                ci_length: avg(&|c| c.2 - c.1),
                ci_reps: cis.len(),
            });
        }
    }
    let visits = ok[0].missing.len();
    let missing_rates = (0..visits)
        .map(|s| ok.iter().map(|o| o.missing[s]).sum::<f64>() / ok.len() as f64)
        .collect();
    Ok(SimReport {
        setting: cfg.dgp.setting,
        n: cfg.dgp.n,
        reps: cfg.reps,
        b: cfg.b,
        level: cfg.level,
        true_tau: tau0,
        rows,
        failed,
        missing_rates,
    })
}

fn pct(v: f64) -> String {
    if v.is_finite() {
        format!("{:.2}", 100.0 * v)
    } else {
        "NA".to_string()
    }
}

impl SimReport {
    pub fn row(&self, cell: &str, estimator: &str) -> Option<&SimRow> {
        self.rows.iter().find(|r| r.cell == cell && r.estimator == estimator)
    }

    pub const CSV_HEADER: &'static str =
        "setting,cell,estimator,reps,true_tau,bias,sd,sd_defined,se,coverage,ci_length,ci_reps";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{:?},{:?},{:?},{},{:?},{:?},{:?},{}",
                self.setting.name(),
                r.cell,
                r.estimator,
                r.reps,
                self.true_tau,
                r.bias,
                r.sd,
                r.sd.is_finite(),
                r.se,
                r.coverage,
                r.ci_length,
                r.ci_reps
            )?;
        }
        Ok(())
    }

    /// Plain-text tables; all metrics except counts are multiplied by 100.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{}: n = {}, reps = {} ({} failed), B = {}, level = {}, true tau = {:.5}",
            self.setting.name(),
            self.n,
            self.reps,
            self.failed.len(),
            self.b,
            self.level,
            self.true_tau
        );
        let rates: Vec<String> = self.missing_rates.iter().map(|v| format!("{:.3}", v)).collect();
        let _ = writeln!(s, "missing fraction by visit: {}", rates.join(", "));
        let mut estimators: Vec<&str> = Vec::new();
        let mut cells: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !estimators.contains(&r.estimator.as_str()) {
                estimators.push(&r.estimator);
            }
            if !cells.contains(&r.cell.as_str()) {
                cells.push(&r.cell);
            }
        }
        if self.setting == Setting::CrossSectional {
            let yes = |c: char| if c == 'y' { "yes" } else { "no" };
            let header = |title: &str, s: &mut String| {
                let _ = writeln!(s, "\n{title}");
                let _ = write!(s, "{:<4}{:<4}{:<4}", "PS", "RP", "OM");
                for e in &estimators {
                    let _ = write!(s, "{:>18}", e);
                }
                let _ = writeln!(s);
            };
            type Cellfmt = fn(&SimRow) -> String;
            let blocks: [(&str, Cellfmt); 2] = [
                ("Coverage % (mean CI length x100)", |r| format!("{} ({})", pct(r.coverage), pct(r.ci_length))),
                ("Bias x100 (SD x100)", |r| format!("{} ({})", pct(r.bias), pct(r.sd))),
            ];
            for (title, f) in blocks {
                header(title, &mut s);
                for c in &cells {
                    let ch: Vec<char> = c.chars().collect();
                    let _ = write!(s, "{:<4}{:<4}{:<4}", yes(ch[0]), yes(ch[1]), yes(ch[2]));
                    for e in &estimators {
                        let v = self.row(c, e).map_or_else(|| "-".to_string(), f);
                        let _ = write!(s, "{:>18}", v);
                    }
                    let _ = writeln!(s);
                }
            }
        } else {
            let _ = writeln!(
                s,
                "\n{:<10}{:>10}{:>10}{:>10}{:>10}{:>10}",
                "estimator", "bias", "SD", "SE", "coverage", "length"
            );
            for r in &self.rows {
                let _ = writeln!(
                    s,
                    "{:<10}{:>10}{:>10}{:>10}{:>10}{:>10}",
                    r.estimator,
                    pct(r.bias),
                    pct(r.sd),
                    pct(r.se),
                    pct(r.coverage),
                    pct(r.ci_length)
                );
            }
        }
        s
    }
}
