//! Point estimators of the jump-to-reference treatment effect at the last visit.
//!
//! Per subject, with `e0 = e(H_0)`, `P1 = pi_1(1, H_0)` and `M0 = mu_t^0(H_0)`:
//!
//! * `Omega = R_t Y_t + sum_s R_{s-1} (1 - R_s) mu_t^0(H_{s-1})`
//! * `G = P1 * sum_s g_{s+1}(H_0)`
//! * `B_s = sum_{k<=s} pibar_{k-1}(0) {1 - pi_k(1, H_{k-1})} delta(H_{k-1}) - 1`
//! * `Delta_s = mu_t^0(H_s) - mu_t^0(H_{s-1})`
//!
//! Ratio-form estimators report linearised per-subject contributions so that
//! the mean of the contributions is the estimate and their spread gives the
//! usual sandwich variance.

pub mod cross;

use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationWeights;
use crate::dataset::TrialDataset;
use crate::error::{Error, Result};
use crate::nuisance::NuisanceValues;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    /// Response probability with pattern mean; with one visit this is the
    /// response probability with outcome mean estimator.
    RpPm,
    PsOm,
    PsOmN,
    PsRp,
    PsRpN,
    Eif,
    EifN,
    EifC,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 8] = [
        EstimatorKind::Eif,
        EstimatorKind::EifN,
        EstimatorKind::EifC,
        EstimatorKind::PsRp,
        EstimatorKind::PsRpN,
        EstimatorKind::PsOm,
        EstimatorKind::PsOmN,
        EstimatorKind::RpPm,
    ];

    /// Conventional label; one-visit data uses the cross-sectional names.
    pub fn label(&self, t: usize) -> &'static str {
        let cross = t == 1;
        match self {
            EstimatorKind::RpPm if cross => "rp-om",
            EstimatorKind::RpPm => "rp-pm",
            EstimatorKind::PsOm => "ps-om",
            EstimatorKind::PsOmN => "ps-om-N",
            EstimatorKind::PsRp => "ps-rp",
            EstimatorKind::PsRpN => "ps-rp-N",
            EstimatorKind::Eif if cross => "tr",
            EstimatorKind::Eif => "mr",
            EstimatorKind::EifN if cross => "tr-N",
            EstimatorKind::EifN => "mr-N",
            EstimatorKind::EifC if cross => "tr-C",
            EstimatorKind::EifC => "mr-C",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "rp-pm" | "rp-om" | "rppm" | "rpom" => EstimatorKind::RpPm,
            "ps-om" | "psom" => EstimatorKind::PsOm,
            "ps-om-n" | "psomn" => EstimatorKind::PsOmN,
            "ps-rp" | "psrp" => EstimatorKind::PsRp,
            "ps-rp-n" | "psrpn" => EstimatorKind::PsRpN,
            "mr" | "tr" | "eif" => EstimatorKind::Eif,
            "mr-n" | "tr-n" | "eifn" => EstimatorKind::EifN,
            "mr-c" | "tr-c" | "eifc" => EstimatorKind::EifC,
            _ => return None,
        })
    }

    pub fn is_eif(&self) -> bool {
        matches!(self, EstimatorKind::Eif | EstimatorKind::EifN | EstimatorKind::EifC)
    }

    fn name(&self) -> &'static str {
        self.label(2)
    }
}

/// Largest and 99th-percentile weight, each relative to the mean weight.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSummary {
    pub term: String,
    pub max: f64,
    pub p99: f64,
}

#[derive(Debug, Clone)]
pub struct EstimateValue {
    pub kind: EstimatorKind,
    pub tau: f64,
    /// Per-subject contributions whose mean is `tau`.
    pub contributions: Vec<f64>,
    pub weights: Vec<WeightSummary>,
}

impl EstimateValue {
    /// Centered contributions; for the influence-function family these are the
    /// estimated influence function values.
    pub fn influence(&self) -> Vec<f64> {
        self.contributions.iter().map(|c| c - self.tau).collect()
    }

    /// `n^-2 * sum phi_i^2`.
    pub fn variance(&self) -> f64 {
        let n = self.contributions.len() as f64;
        self.contributions
            .iter()
            .map(|c| (c - self.tau) * (c - self.tau))
            .sum::<f64>()
            / (n * n)
    }
}

fn required<'a, T>(v: &'a Option<T>, kind: EstimatorKind, nuisance: &'static str) -> Result<&'a T> {
    v.as_ref().ok_or(Error::MissingNuisance {
        estimator: kind.name(),
        nuisance,
    })
}

/// Read-only view of the per-subject quantities shared by the estimators.
struct Ctx<'a> {
    ds: &'a TrialDataset,
    kind: EstimatorKind,
    vals: &'a NuisanceValues,
}

impl<'a> Ctx<'a> {
    fn e(&self) -> Result<&'a Vec<Vec<f64>>> {
        required(&self.vals.e, self.kind, "propensity score")
    }
    fn pi(&self, a: usize) -> Result<&'a Vec<Vec<f64>>> {
        required(
            &self.vals.pi[a],
            self.kind,
            if a == 1 { "response probability (arm 1)" } else { "response probability (arm 0)" },
        )
    }
    fn mu0(&self) -> Result<&'a Vec<Vec<f64>>> {
        required(&self.vals.mu[0], self.kind, "outcome mean (arm 0)")
    }
    fn g(&self) -> Result<&'a Vec<Vec<f64>>> {
        required(&self.vals.g, self.kind, "pattern mean")
    }

    fn a(&self, i: usize) -> f64 {
        f64::from(self.ds.treatment(i))
    }

    fn rt_yt(&self, i: usize) -> f64 {
        self.ds.outcome(i, self.ds.t()).unwrap_or(0.0)
    }

    fn omega(&self, i: usize) -> Result<f64> {
        let k = self.ds.observed_visits(i);
        if k == self.ds.t() {
            Ok(self.rt_yt(i))
        } else {
            Ok(self.mu0()?[k][i])
        }
    }

    /// `pibar_s(0, H_{s-1})`.
    fn pibar0(&self, i: usize, s: usize) -> Result<f64> {
        let p0 = self.pi(0)?;
        Ok((1..=s).map(|k| p0[k - 1][i]).product())
    }

    /// `delta(H_{s-1})`, one at `s = 1`.
    fn delta(&self, i: usize, s: usize) -> Result<f64> {
        if s == 1 {
            return Ok(1.0);
        }
        let e = self.e()?;
        let e0 = e[0][i];
        let es = e[s - 1][i];
        Ok((es / e0) / ((1.0 - es) / (1.0 - e0)))
    }

    /// `B_s` for a subject with `R_{s-1} = 1`.
    fn bracket(&self, i: usize, s: usize) -> Result<f64> {
        let p1 = self.pi(1)?;
        let mut acc = 0.0;
        for k in 1..=s {
            acc += self.pibar0(i, k - 1)? * (1.0 - p1[k - 1][i]) * self.delta(i, k)?;
        }
        Ok(acc - 1.0)
    }

    /// `(G, P1, M0)`.
    fn pattern_terms(&self, i: usize) -> Result<(f64, f64, f64)> {
        let p1 = self.pi(1)?[0][i];
        let g: f64 = self.g()?.iter().map(|gs| gs[i]).sum();
        Ok((p1 * g, p1, self.mu0()?[0][i]))
    }

    fn delta_mu(&self, i: usize, s: usize) -> Result<f64> {
        let mu0 = self.mu0()?;
        Ok(mu0[s][i] - mu0[s - 1][i])
    }
}

/// Accumulates `sum a_i / sum b_i` and its linearisation.
struct Ratio {
    num: Vec<f64>,
    den: Vec<f64>,
}

impl Ratio {
    fn new(n: usize) -> Self {
        Ratio {
            num: vec![0.0; n],
            den: vec![0.0; n],
        }
    }

    fn add_to(&self, term: &str, out: &mut [f64], summaries: &mut Vec<WeightSummary>) -> Result<f64> {
        let n = self.num.len() as f64;
        let a: f64 = self.num.iter().sum();
        let b: f64 = self.den.iter().sum();
        if !(b.abs() > 0.0) {
            return Err(Error::Numerical(format!("normalising weights sum to zero in {term}")));
        }
        let r = a / b;
        let bbar = b / n;
        for (o, (ai, bi)) in out.iter_mut().zip(self.num.iter().zip(&self.den)) {
            *o += r + (ai - r * bi) / bbar;
        }
        summaries.push(summarize(term, &self.den));
        Ok(r)
    }
}

fn summarize(term: &str, w: &[f64]) -> WeightSummary {
    let mut nz: Vec<f64> = w.iter().copied().filter(|v| *v != 0.0).collect();
    if nz.is_empty() {
        return WeightSummary {
            term: term.to_string(),
            max: f64::NAN,
            p99: f64::NAN,
        };
    }
    let mean = nz.iter().sum::<f64>() / nz.len() as f64;
    nz.sort_by(f64::total_cmp);
    let p99 = crate::regress::quantile_sorted(&nz, 0.99);
    WeightSummary {
        term: term.to_string(),
        max: nz[nz.len() - 1] / mean,
        p99: p99 / mean,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Computes one estimator. `weights` is only used by the calibrated kind.
pub fn estimate(
    ds: &TrialDataset,
    vals: &NuisanceValues,
    kind: EstimatorKind,
    weights: Option<&CalibrationWeights>,
) -> Result<EstimateValue> {
    let cx = Ctx { ds, kind, vals };
    let n = ds.n();
    let t = ds.t();
    let mut c = vec![0.0; n];
    let mut summaries = Vec::new();
    match kind {
        EstimatorKind::RpPm => {
            for (i, ci) in c.iter_mut().enumerate() {
                let (g, p1, m0) = cx.pattern_terms(i)?;
                *ci = g - p1 * m0;
            }
        }
        EstimatorKind::PsOm => {
            let e = cx.e()?;
            for (i, ci) in c.iter_mut().enumerate() {
                let (a, e0) = (cx.a(i), e[0][i]);
                *ci = (a / e0 - (1.0 - a) / (1.0 - e0)) * cx.omega(i)?;
            }
            summaries.push(summarize("A/e", &ipw(&cx, e, 1)));
            summaries.push(summarize("(1-A)/(1-e)", &ipw(&cx, e, 0)));
        }
        EstimatorKind::PsOmN => {
            let e = cx.e()?;
            let mut r1 = Ratio::new(n);
            let mut r0 = Ratio::new(n);
            for i in 0..n {
                let (a, e0, om) = (cx.a(i), e[0][i], cx.omega(i)?);
                r1.num[i] = a / e0 * om;
                r1.den[i] = a / e0;
                r0.num[i] = (1.0 - a) / (1.0 - e0) * om;
                r0.den[i] = (1.0 - a) / (1.0 - e0);
            }
            let mut neg = vec![0.0; n];
            r1.add_to("A/e", &mut c, &mut summaries)?;
            r0.add_to("(1-A)/(1-e)", &mut neg, &mut summaries)?;
            c.iter_mut().zip(&neg).for_each(|(x, y)| *x -= y);
        }
        EstimatorKind::PsRp => {
            let e = cx.e()?;
            let mut w0 = vec![0.0; n];
            for (i, ci) in c.iter_mut().enumerate() {
                let (a, e0) = (cx.a(i), e[0][i]);
                let mut v = a / e0 * cx.rt_yt(i);
                if a == 0.0 && ds.response(i, t) {
                    let w = cx.bracket(i, t)? / ((1.0 - e0) * cx.pibar0(i, t)?);
                    w0[i] = w.abs();
                    v += w * cx.rt_yt(i);
                }
                *ci = v;
            }
            summaries.push(summarize("A/e", &ipw(&cx, e, 1)));
            summaries.push(summarize("|B_t|/((1-e) pibar_t)", &w0));
        }
        EstimatorKind::PsRpN => {
            let e = cx.e()?;
            let mut r1 = Ratio::new(n);
            let mut r0 = Ratio::new(n);
            for i in 0..n {
                let (a, e0) = (cx.a(i), e[0][i]);
                r1.num[i] = a / e0 * cx.rt_yt(i);
                r1.den[i] = a / e0;
                if a == 0.0 && ds.response(i, t) {
                    let w = 1.0 / ((1.0 - e0) * cx.pibar0(i, t)?);
                    r0.num[i] = w * cx.bracket(i, t)? * cx.rt_yt(i);
                    r0.den[i] = w;
                }
            }
            r1.add_to("A/e", &mut c, &mut summaries)?;
            r0.add_to("(1-A) R_t/((1-e) pibar_t)", &mut c, &mut summaries)?;
        }
        EstimatorKind::Eif => {
            let e = cx.e()?;
            for (i, ci) in c.iter_mut().enumerate() {
                let (a, e0) = (cx.a(i), e[0][i]);
                let (g, p1, m0) = cx.pattern_terms(i)?;
                let mut v = a / e0 * cx.omega(i)? + (1.0 - a / e0) * (g + (1.0 - p1) * m0) - m0;
                if a == 0.0 {
                    v += control_increments(&cx, i)?.iter().map(|(w, d)| w * d).sum::<f64>() / (1.0 - e0);
                }
                *ci = v;
            }
            summaries.push(summarize("A/e", &ipw(&cx, e, 1)));
        }
        EstimatorKind::EifN | EstimatorKind::EifC => {
            let dense = match kind {
                EstimatorKind::EifC => Some(dense_weights(weights.ok_or(Error::MissingWeights)?, ds)?),
                _ => None,
            };
            let e = cx.e()?;
            let mut treated = Ratio::new(n);
            let mut steps: Vec<Ratio> = (0..t).map(|_| Ratio::new(n)).collect();
            let mut plain = vec![0.0; n];
            for i in 0..n {
                let (a, e0) = (cx.a(i), e[0][i]);
                let (g, p1, m0) = cx.pattern_terms(i)?;
                plain[i] = g - p1 * m0;
                if a == 1.0 {
                    let w = match &dense {
                        Some(d) => d.a1[i],
                        None => 1.0 / e0,
                    };
                    treated.num[i] = w * (cx.omega(i)? - g - (1.0 - p1) * m0);
                    treated.den[i] = w;
                    continue;
                }
                let k = ds.observed_visits(i);
                let mut cal = dense.as_ref().map(|d| d.a0[i]);
                for s in 1..=k {
                    let w = match (&mut cal, &dense) {
                        (Some(cw), Some(d)) => {
                            *cw *= d.r[s - 1][i];
                            *cw
                        }
                        _ => 1.0 / ((1.0 - e0) * cx.pibar0(i, s)?),
                    };
                    steps[s - 1].num[i] = w * cx.bracket(i, s)? * cx.delta_mu(i, s)?;
                    steps[s - 1].den[i] = w;
                }
            }
            treated.add_to("treated", &mut c, &mut summaries)?;
            for (ci, p) in c.iter_mut().zip(&plain) {
                *ci += p;
            }
            for (s, r) in steps.iter().enumerate() {
                r.add_to(&format!("control, visit {}", s + 1), &mut c, &mut summaries)?;
            }
        }
    }
    if let Some(i) = c.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "{} contribution of subject {} is not finite",
            kind.label(t),
            i + 1
        )));
    }
    Ok(EstimateValue {
        kind,
        tau: mean(&c),
        contributions: c,
        weights: summaries,
    })
}

/// `(B_s / pibar_s(0), Delta_s)` for each observed visit of a control subject.
fn control_increments(cx: &Ctx<'_>, i: usize) -> Result<Vec<(f64, f64)>> {
    (1..=cx.ds.observed_visits(i))
        .map(|s| Ok((cx.bracket(i, s)? / cx.pibar0(i, s)?, cx.delta_mu(i, s)?)))
        .collect()
}

fn ipw(cx: &Ctx<'_>, e: &[Vec<f64>], arm: u8) -> Vec<f64> {
    (0..cx.ds.n())
        .map(|i| match (cx.ds.treatment(i), arm) {
            (1, 1) => 1.0 / e[0][i],
            (0, 0) => 1.0 / (1.0 - e[0][i]),
            _ => 0.0,
        })
        .collect()
}

struct Dense {
    a1: Vec<f64>,
    a0: Vec<f64>,
    r: Vec<Vec<f64>>,
}

fn dense_weights(w: &CalibrationWeights, ds: &TrialDataset) -> Result<Dense> {
    if w.r.len() != ds.t() {
        return Err(Error::InvalidInput(format!(
            "calibration weights cover {} visits, data has {}",
            w.r.len(),
            ds.t()
        )));
    }
    let n = ds.n();
    Ok(Dense {
        a1: w.a1.dense(n),
        a0: w.a0.dense(n),
        r: w.r.iter().map(|r| r.dense(n)).collect(),
    })
}

/// Influence-function estimator and its centered values `phi_i = N_i - tau`.
pub fn eif_values(ds: &TrialDataset, vals: &NuisanceValues) -> Result<(f64, Vec<f64>)> {
    let est = estimate(ds, vals, EstimatorKind::Eif, None)?;
    Ok((est.tau, est.influence()))
}

/// `delta(H_{s-1})` for `s = 1..t`, NaN where `R_{s-1} = 0`.
pub fn delta_values(ds: &TrialDataset, vals: &NuisanceValues) -> Result<Vec<Vec<f64>>> {
    let cx = Ctx {
        ds,
        kind: EstimatorKind::Eif,
        vals,
    };
    (1..=ds.t())
        .map(|s| {
            (0..ds.n())
                .map(|i| if ds.response(i, s - 1) { cx.delta(i, s) } else { Ok(f64::NAN) })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::{ConstValue, NuisanceOverride};

    fn ds_ps_om() -> TrialDataset {
        TrialDataset::from_rows(
            vec![vec![0.0]; 4],
            vec![1, 1, 0, 0],
            vec![vec![Some(3.0)], vec![None], vec![Some(1.0)], vec![Some(2.0)]],
        )
        .unwrap()
    }

    #[test]
    fn ps_om_hand_arithmetic() {
        let ds = ds_ps_om();
        let o = NuisanceOverride {
            e: Some(ConstValue::Scalar(0.5)),
            mu0: Some(ConstValue::Scalar(1.5)),
            ..Default::default()
        };
        let v = NuisanceValues::constant(&ds, &o).unwrap();
        let est = estimate(&ds, &v, EstimatorKind::PsOm, None).unwrap();
        assert!((est.tau - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rp_om_constants_factor_out() {
        let ds = ds_ps_om();
        let o = NuisanceOverride {
            pi1: Some(ConstValue::Scalar(0.8)),
            mu0: Some(ConstValue::Scalar(1.0)),
            g: Some(ConstValue::Scalar(2.0)),
            ..Default::default()
        };
        let v = NuisanceValues::constant(&ds, &o).unwrap();
        let est = estimate(&ds, &v, EstimatorKind::RpPm, None).unwrap();
        assert!((est.tau - 0.8).abs() < 1e-15);
    }

    #[test]
    fn missing_nuisance_is_named() {
        let ds = ds_ps_om();
        let v = NuisanceValues::default();
        match estimate(&ds, &v, EstimatorKind::PsOm, None) {
            Err(Error::MissingNuisance { nuisance, .. }) => assert_eq!(nuisance, "propensity score"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            estimate(&ds, &v, EstimatorKind::EifC, None),
            Err(Error::MissingWeights)
        ));
    }
}
