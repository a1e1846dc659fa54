//! Data-generating processes, model-specification grid and the Monte Carlo
//! harness.

mod discrete;
mod mc;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationSpec, Moments};
use crate::dataset::TrialDataset;
use crate::error::{Error, Result};
use crate::nuisance::{BasisKind, FeatureMap, FnFeatures, ModelSpec, NuisanceSpec, RawFeatures};
use crate::regress::{expit, FitOptions};

pub use discrete::{Atom, DiscreteDgp, Identification};
pub use mc::{run_mc, McConfig, SimReport, SimRow};

/// Pinned reference values of the true effect for the two continuous designs,
/// from an independent 10^8-draw script.
pub const CROSS_TAU: f64 = 0.06944;
pub const LONG_TAU: f64 = 0.43046;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    CrossSectional,
    LongitudinalT2,
    DiscreteOracle,
}

impl Setting {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cross" | "cross_sectional" => Some(Setting::CrossSectional),
            "long" | "longitudinal" | "longitudinal_t2" => Some(Setting::LongitudinalT2),
            "discrete" | "discrete_oracle" => Some(Setting::DiscreteOracle),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Setting::CrossSectional => "cross_sectional",
            Setting::LongitudinalT2 => "longitudinal_t2",
            Setting::DiscreteOracle => "discrete_oracle",
        }
    }
}

/// Covariates: `X_1..X_4 ~ N(mean, sd^2)`, `X_5 ~ Bernoulli(p5)`;
/// `logit e = ps_coef * (Z_1 + .. + Z_4)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateCoefs {
    pub x_mean: f64,
    pub x_sd: f64,
    pub p5: f64,
    pub ps_coef: f64,
}

impl Default for CovariateCoefs {
    fn default() -> Self {
        CovariateCoefs {
            x_mean: 0.25,
            x_sd: 1.0,
            p5: 0.5,
            ps_coef: 0.1,
        }
    }
}

/// `logit pi_1 = (2a-1) rp_scale S`, `mu^a = (om_base + a) om_scale S`, with
/// `S = Z_1 + .. + Z_5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossCoefs {
    pub rp_scale: f64,
    pub om_base: f64,
    pub om_scale: f64,
    pub noise_sd: f64,
}

impl Default for CrossCoefs {
    fn default() -> Self {
        CrossCoefs {
            rp_scale: 1.0 / 6.0,
            om_base: 2.0,
            om_scale: 1.0 / 6.0,
            noise_sd: 1.0,
        }
    }
}

/// Two visits. `logit pi_1 = (2a-1) rp1_scale S_4`,
/// `Y_1 ~ N((om_base + a) om1_scale S, sd^2)`,
/// `logit pi_2 = (2a-1)(S + rp2_y Y_1) rp2_scale`,
/// `Y_2 ~ N((om_base + a)(S + Y_1) om2_scale, sd^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongCoefs {
    pub rp1_scale: f64,
    pub om1_scale: f64,
    pub rp2_scale: f64,
    pub rp2_y: f64,
    pub om2_scale: f64,
    pub om_base: f64,
    pub noise_sd: f64,
}

impl Default for LongCoefs {
    fn default() -> Self {
        LongCoefs {
            rp1_scale: 5.0 / 9.0,
            om1_scale: 1.0 / 6.0,
            rp2_scale: 1.0 / 6.0,
            rp2_y: 0.1,
            om2_scale: 1.0 / 3.0,
            om_base: 2.0,
            noise_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub setting: Setting,
    pub n: usize,
    pub seed: u64,
    pub covariates: CovariateCoefs,
    pub cross: CrossCoefs,
    pub long: LongCoefs,
    pub discrete: DiscreteDgp,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            setting: Setting::CrossSectional,
            n: 500,
            seed: 1,
            covariates: CovariateCoefs::default(),
            cross: CrossCoefs::default(),
            long: LongCoefs::default(),
            discrete: DiscreteDgp::default(),
        }
    }
}

impl DgpConfig {
    pub fn new(setting: Setting, n: usize, seed: u64) -> Self {
        DgpConfig {
            setting,
            n,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidInput("n must be at least 1".into()));
        }
        let c = &self.covariates;
        let x = &self.cross;
        let l = &self.long;
        let all = [
            c.x_mean, c.x_sd, c.p5, c.ps_coef, x.rp_scale, x.om_base, x.om_scale, x.noise_sd, l.rp1_scale,
            l.om1_scale, l.rp2_scale, l.rp2_y, l.om2_scale, l.om_base, l.noise_sd,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("DGP coefficients must be finite".into()));
        }
        if !(0.0..=1.0).contains(&c.p5) || c.x_sd < 0.0 || x.noise_sd < 0.0 || l.noise_sd < 0.0 {
            return Err(Error::InvalidInput("invalid probability or standard deviation".into()));
        }
        if self.setting == Setting::DiscreteOracle {
            self.discrete.validate()?;
        }
        Ok(())
    }
}

/// `(x^2 + 2 sin x - 1.5) / sqrt 2`.
pub fn z_transform(x: f64) -> f64 {
    (x * x + 2.0 * x.sin() - 1.5) / std::f64::consts::SQRT_2
}

/// `Z_1..Z_4` transformed, `Z_5 = X_5`.
pub fn z_features(x: &[f64], out: &mut Vec<f64>) {
    out.extend(x[..4].iter().map(|&v| z_transform(v)));
    out.extend_from_slice(&x[4..]);
}

/// `(Z_1^2, Z_2, .., Z_5)`.
pub fn ps_long_features(x: &[f64], out: &mut Vec<f64>) {
    let z1 = z_transform(x[0]);
    out.push(z1 * z1);
    out.extend(x[1..4].iter().map(|&v| z_transform(v)));
    out.extend_from_slice(&x[4..]);
}

pub(crate) fn z_map() -> Arc<dyn FeatureMap> {
    Arc::new(FnFeatures::new("z", z_features))
}

fn draw_covariates(rng: &mut ChaCha8Rng, c: &CovariateCoefs) -> ([f64; 5], f64, f64) {
    let normal = Normal::new(c.x_mean, c.x_sd).expect("finite normal parameters");
    let mut x = [0.0; 5];
    for v in x.iter_mut().take(4) {
        *v = normal.sample(rng);
    }
    x[4] = if rng.gen::<f64>() < c.p5 { 1.0 } else { 0.0 };
    let s4: f64 = x[..4].iter().map(|&v| z_transform(v)).sum();
    (x, s4, s4 + x[4])
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.gen::<f64>() < p
}

pub(crate) fn gen_cross_with(rng: &mut ChaCha8Rng, n: usize, c: &CovariateCoefs, k: &CrossCoefs) -> Result<TrialDataset> {
    let noise = Normal::new(0.0, k.noise_sd).expect("finite noise sd");
    let mut xs = Vec::with_capacity(n);
    let mut a_all = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, s4, s) = draw_covariates(rng, c);
        let a = u8::from(bernoulli(rng, expit(c.ps_coef * s4)));
        let sign = 2.0 * f64::from(a) - 1.0;
        let r = bernoulli(rng, expit(sign * k.rp_scale * s));
        let y = (k.om_base + f64::from(a)) * k.om_scale * s + noise.sample(rng);
        xs.push(x.to_vec());
        a_all.push(a);
        ys.push(vec![r.then_some(y)]);
    }
    named(TrialDataset::from_rows(xs, a_all, ys)?)
}

pub(crate) fn gen_long_with(rng: &mut ChaCha8Rng, n: usize, c: &CovariateCoefs, k: &LongCoefs) -> Result<TrialDataset> {
    let noise = Normal::new(0.0, k.noise_sd).expect("finite noise sd");
    let mut xs = Vec::with_capacity(n);
    let mut a_all = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, s4, s) = draw_covariates(rng, c);
        let a = u8::from(bernoulli(rng, expit(c.ps_coef * s4)));
        let sign = 2.0 * f64::from(a) - 1.0;
        let base = k.om_base + f64::from(a);
        let mut y = vec![None, None];
        if bernoulli(rng, expit(sign * k.rp1_scale * s4)) {
            let y1 = base * k.om1_scale * s + noise.sample(rng);
            y[0] = Some(y1);
            if bernoulli(rng, expit(sign * (s + k.rp2_y * y1) * k.rp2_scale)) {
                y[1] = Some(base * (s + y1) * k.om2_scale + noise.sample(rng));
            }
        }
        xs.push(x.to_vec());
        a_all.push(a);
        ys.push(y);
    }
    named(TrialDataset::from_rows(xs, a_all, ys)?)
}

fn named(ds: TrialDataset) -> Result<TrialDataset> {
    let covs: Vec<String> = (1..=ds.p()).map(|j| format!("X{j}")).collect();
    let outs: Vec<String> = (1..=ds.t()).map(|s| format!("Y{s}")).collect();
    ds.with_names("A", &covs, &outs)
}

pub fn gen_cross(cfg: &DgpConfig) -> Result<TrialDataset> {
    cfg.validate()?;
    gen_cross_with(&mut ChaCha8Rng::seed_from_u64(cfg.seed), cfg.n, &cfg.covariates, &cfg.cross)
}

pub fn gen_long(cfg: &DgpConfig) -> Result<TrialDataset> {
    cfg.validate()?;
    gen_long_with(&mut ChaCha8Rng::seed_from_u64(cfg.seed), cfg.n, &cfg.covariates, &cfg.long)
}

/// Generates a dataset for any setting.
pub fn generate(cfg: &DgpConfig) -> Result<TrialDataset> {
    generate_with(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

pub(crate) fn generate_with(cfg: &DgpConfig, rng: &mut ChaCha8Rng) -> Result<TrialDataset> {
    cfg.validate()?;
    match cfg.setting {
        Setting::CrossSectional => gen_cross_with(rng, cfg.n, &cfg.covariates, &cfg.cross),
        Setting::LongitudinalT2 => gen_long_with(rng, cfg.n, &cfg.covariates, &cfg.long),
        Setting::DiscreteOracle => cfg.discrete.sample_with(cfg.n, rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauMethod {
    McLargeN { draws: usize },
    Enumeration,
}

/// True effect under jump-to-reference, from the response-probability and
/// pattern-mean formula evaluated with the generating functions.
pub fn true_tau(cfg: &DgpConfig, method: TauMethod) -> Result<f64> {
    cfg.validate()?;
    match (cfg.setting, method) {
        (Setting::DiscreteOracle, TauMethod::Enumeration) => Ok(cfg.discrete.true_tau()),
        (_, TauMethod::Enumeration) => Err(Error::InvalidInput(format!(
            "enumeration needs finite support; setting {} is continuous",
            cfg.setting.name()
        ))),
        (Setting::DiscreteOracle, TauMethod::McLargeN { .. }) => Ok(cfg.discrete.true_tau()),
        (setting, TauMethod::McLargeN { draws }) => {
            if draws == 0 {
                return Err(Error::InvalidInput("draws must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let c = &cfg.covariates;
            let noise = Normal::new(0.0, cfg.long.noise_sd).expect("finite noise sd");
            let mut acc = 0.0;
            for _ in 0..draws {
                let (_, s4, s) = draw_covariates(&mut rng, c);
                acc += match setting {
                    Setting::CrossSectional => {
                        let k = &cfg.cross;
                        expit(k.rp_scale * s) * k.om_scale * s
                    }
                    _ => {
                        let k = &cfg.long;
                        let mu2 = |a: f64, y1: f64| (k.om_base + a) * (s + y1) * k.om2_scale;
                        let y1 = (k.om_base + 1.0) * k.om1_scale * s + noise.sample(&mut rng);
                        let p2 = expit((s + k.rp2_y * y1) * k.rp2_scale);
                        let inner = p2 * mu2(1.0, y1) + (1.0 - p2) * mu2(0.0, y1);
                        let mu0_h0 = mu2(0.0, k.om_base * k.om1_scale * s);
                        expit(k.rp1_scale * s4) * (inner - mu0_h0)
                    }
                };
            }
            Ok(acc / draws as f64)
        }
    }
}

/// Which of the three working models use the transformed covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecCell {
    pub ps: bool,
    pub rp: bool,
    pub om: bool,
}

impl SpecCell {
    pub const fn new(ps: bool, rp: bool, om: bool) -> Self {
        SpecCell { ps, rp, om }
    }

    /// The eight cells, all-correct first and all-wrong last.
    pub fn grid() -> Vec<SpecCell> {
        let mut out = Vec::with_capacity(8);
        for ps in [true, false] {
            for rp in [true, false] {
                for om in [true, false] {
                    out.push(SpecCell { ps, rp, om });
                }
            }
        }
        out
    }

    pub fn correct(&self) -> usize {
        usize::from(self.ps) + usize::from(self.rp) + usize::from(self.om)
    }

    /// e.g. `yyn`.
    pub fn label(&self) -> String {
        [self.ps, self.rp, self.om]
            .iter()
            .map(|&b| if b { 'y' } else { 'n' })
            .collect()
    }

    pub fn parse(s: &str) -> Option<Self> {
        let b: Vec<bool> = s
            .chars()
            .map(|c| match c {
                'y' => Some(true),
                'n' => Some(false),
                _ => None,
            })
            .collect::<Option<_>>()?;
        (b.len() == 3).then(|| SpecCell::new(b[0], b[1], b[2]))
    }
}

pub(crate) fn parametric(correct: bool) -> NuisanceSpec {
    if correct {
        NuisanceSpec::new(z_map(), BasisKind::Linear)
    } else {
        NuisanceSpec::new(Arc::new(RawFeatures), BasisKind::Linear)
    }
}

/// Single-visit working models: transformed covariates when correct, raw
/// covariates otherwise; calibration on the first moments of `Z`.
pub fn apply_spec_cell(cell: SpecCell) -> ModelSpec {
    ModelSpec {
        ps: parametric(cell.ps),
        rp: parametric(cell.rp),
        om: parametric(cell.om),
        pm: parametric(cell.om),
        calibration: CalibrationSpec::new(z_map(), Moments::First),
        fit: FitOptions::default(),
    }
}

/// Two-visit working models: additive splines on `(Z_1^2, Z_2..Z_5)` and the
/// outcome history for the propensity score; main-effect (linear-predictor)
/// terms in raw `X` for response and in `Z` for the outcome and pattern
/// means; calibration on the first two moments of `Z`, with the response
/// weights fitted on both arms together.
pub fn longitudinal_spec() -> ModelSpec {
    ModelSpec {
        ps: NuisanceSpec::new(
            Arc::new(FnFeatures::new("z_ps", ps_long_features)),
            BasisKind::Spline { interior_knots: 3 },
        ),
        rp: NuisanceSpec::new(Arc::new(RawFeatures), BasisKind::Linear),
        om: NuisanceSpec::new(z_map(), BasisKind::Linear),
        pm: NuisanceSpec::new(z_map(), BasisKind::Linear),
        calibration: CalibrationSpec::new(z_map(), Moments::FirstTwo)
            .baseline_only()
            .pooled_response(),
        fit: FitOptions::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn z_at_zero() {
        assert!((z_transform(0.0) + 1.5 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cell_labels_round_trip() {
        for c in SpecCell::grid() {
            assert_eq!(SpecCell::parse(&c.label()), Some(c));
        }
        assert_eq!(SpecCell::grid()[0].label(), "yyy");
        assert_eq!(SpecCell::grid()[7].label(), "nnn");
    }

    #[test]
    fn long_data_is_monotone_by_construction() {
        let ds = gen_long(&DgpConfig::new(Setting::LongitudinalT2, 300, 3)).unwrap();
        for i in 0..ds.n() {
            if !ds.response(i, 1) {
                assert!(ds.outcome(i, 2).is_none());
            }
        }
    }
}
