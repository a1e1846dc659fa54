//! C interface to the j2r estimation engine.
//!
//! Every fallible function returns a [`J2rStatus`]. On failure the message is
//! kept per thread and can be read with [`j2r_last_error`]. Handles are opaque
//! and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use j2r_core::calibrate::CalibrationProblem;
use j2r_core::nuisance::RawFeatures;
use j2r_core::sim::{self, DgpConfig, Setting, TauMethod};
use j2r_core::{
    analyze, solve_entropy_weights, Analysis, AnalysisOptions, BasisKind, CiChoice, CsvSchema, Error,
    EstimatorKind, LoadOptions, ModelSpec, Moments, TrialDataset,
};
use nalgebra::DMatrix;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum J2rStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericalError = 4,
    IoError = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum J2rEstimator {
    Mr = 0,
    MrN = 1,
    MrC = 2,
    PsRp = 3,
    PsRpN = 4,
    PsOm = 5,
    PsOmN = 6,
    RpPm = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum J2rCi {
    Auto = 0,
    Wald = 1,
    Percentile = 2,
    SymmetricT = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum J2rBasis {
    Linear = 0,
    Polynomial = 1,
    Spline = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum J2rMoments {
    First = 0,
    FirstTwo = 1,
    FirstTwoInteractions = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum J2rSetting {
    CrossSectional = 0,
    Longitudinal = 1,
    Discrete = 2,
}

/// Analysis settings. Obtain defaults from [`j2r_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct J2rOptions {
    /// Bit `k` selects the estimator with `J2rEstimator` value `k`; zero means all.
    pub estimators: u32,
    pub ci: J2rCi,
    pub bootstrap_reps: usize,
    pub seed: u64,
    pub level: f64,
    pub basis: J2rBasis,
    /// Polynomial degree or number of interior spline knots.
    pub basis_param: usize,
    pub moments: J2rMoments,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct J2rEstimate {
    pub estimator: J2rEstimator,
    pub tau: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
    pub bootstrap_reps: usize,
    pub bootstrap_failures: usize,
}

/// Opaque dataset handle.
pub struct J2rDataset {
    inner: TrialDataset,
}

/// Opaque analysis result handle.
pub struct J2rAnalysis {
    inner: Analysis,
    kinds: Vec<EstimatorKind>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(J2rStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => J2rStatus::IoError,
            e if e.is_data_error() => J2rStatus::DataError,
            _ => J2rStatus::NumericalError,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(J2rStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> J2rStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => J2rStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            J2rStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(J2rStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn string_arg(p: *const c_char, name: &str) -> Result<String, Failure> {
    nonnull(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_string)
        .map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))
}

fn list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).collect()
}

fn kind_of(e: J2rEstimator) -> EstimatorKind {
    match e {
        J2rEstimator::Mr => EstimatorKind::Eif,
        J2rEstimator::MrN => EstimatorKind::EifN,
        J2rEstimator::MrC => EstimatorKind::EifC,
        J2rEstimator::PsRp => EstimatorKind::PsRp,
        J2rEstimator::PsRpN => EstimatorKind::PsRpN,
        J2rEstimator::PsOm => EstimatorKind::PsOm,
        J2rEstimator::PsOmN => EstimatorKind::PsOmN,
        J2rEstimator::RpPm => EstimatorKind::RpPm,
    }
}

const ESTIMATORS: [J2rEstimator; 8] = [
    J2rEstimator::Mr,
    J2rEstimator::MrN,
    J2rEstimator::MrC,
    J2rEstimator::PsRp,
    J2rEstimator::PsRpN,
    J2rEstimator::PsOm,
    J2rEstimator::PsOmN,
    J2rEstimator::RpPm,
];

fn selected(mask: u32) -> Result<Vec<J2rEstimator>, Failure> {
    if mask >> ESTIMATORS.len() != 0 {
        return Err(invalid(format!("estimator mask {mask:#x} has unknown bits")));
    }
    Ok(ESTIMATORS
        .iter()
        .copied()
        .filter(|&e| mask == 0 || mask & (1 << e as u32) != 0)
        .collect())
}

fn setting_of(s: J2rSetting) -> Setting {
    match s {
        J2rSetting::CrossSectional => Setting::CrossSectional,
        J2rSetting::Longitudinal => Setting::LongitudinalT2,
        J2rSetting::Discrete => Setting::DiscreteOracle,
    }
}

fn boxed<T>(value: T, out: *mut *mut T) {
    // SAFETY: callers check `out` before building the value.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn j2r_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn j2r_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Static label such as "mr-C" (`visits` > 1) or "tr-C" (`visits` == 1).
#[no_mangle]
pub extern "C" fn j2r_estimator_label(estimator: J2rEstimator, visits: usize) -> *const c_char {
    let label = kind_of(estimator).label(visits);
    match label {
        "rp-om" => c"rp-om",
        "rp-pm" => c"rp-pm",
        "ps-om" => c"ps-om",
        "ps-om-N" => c"ps-om-N",
        "ps-rp" => c"ps-rp",
        "ps-rp-N" => c"ps-rp-N",
        "tr" => c"tr",
        "mr" => c"mr",
        "tr-N" => c"tr-N",
        "mr-N" => c"mr-N",
        "tr-C" => c"tr-C",
        _ => c"mr-C",
    }
    .as_ptr()
}

#[no_mangle]
pub extern "C" fn j2r_options_default() -> J2rOptions {
    J2rOptions {
        estimators: 0,
        ci: J2rCi::Auto,
        bootstrap_reps: 500,
        seed: 1,
        level: 0.95,
        basis: J2rBasis::Spline,
        basis_param: 3,
        moments: J2rMoments::FirstTwo,
    }
}

/// Reads a wide CSV. `covariates` and `outcomes` are comma-separated column
/// names; outcomes are listed in visit order. Empty cells mean missing.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn j2r_dataset_load_csv(
    path: *const c_char,
    treatment: *const c_char,
    covariates: *const c_char,
    outcomes: *const c_char,
    out: *mut *mut J2rDataset,
) -> J2rStatus {
    guard(|| {
        nonnull(out, "out")?;
        let path = string_arg(path, "path")?;
        let treatment = string_arg(treatment, "treatment")?;
        let covariates = string_arg(covariates, "covariates")?;
        let outcomes = string_arg(outcomes, "outcomes")?;
        let schema = CsvSchema::new(&treatment, &list(&covariates), &list(&outcomes));
        let (ds, _) = TrialDataset::load_csv(path, &schema, LoadOptions::default())?;
        boxed(J2rDataset { inner: ds }, out);
        Ok(())
    })
}

/// Builds a dataset from row-major arrays: `covariates` is `n * p`, `outcomes`
/// is `n * t` with NaN for missing values, `treatment` holds 0 or 1.
///
/// # Safety
/// Arrays must hold the stated number of elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn j2r_dataset_from_arrays(
    n: usize,
    p: usize,
    t: usize,
    covariates: *const f64,
    treatment: *const u8,
    outcomes: *const f64,
    out: *mut *mut J2rDataset,
) -> J2rStatus {
    guard(|| {
        nonnull(out, "out")?;
        nonnull(treatment, "treatment")?;
        nonnull(outcomes, "outcomes")?;
        if p > 0 {
            nonnull(covariates, "covariates")?;
        }
        let x = if p > 0 { std::slice::from_raw_parts(covariates, n * p) } else { &[] };
        let a = std::slice::from_raw_parts(treatment, n);
        let y = std::slice::from_raw_parts(outcomes, n * t);
        let rows_x: Vec<Vec<f64>> = (0..n).map(|i| x[i * p..(i + 1) * p].to_vec()).collect();
        let rows_y: Vec<Vec<Option<f64>>> = (0..n)
            .map(|i| y[i * t..(i + 1) * t].iter().map(|&v| (!v.is_nan()).then_some(v)).collect())
            .collect();
        let ds = TrialDataset::from_rows(rows_x, a.to_vec(), rows_y)?;
        boxed(J2rDataset { inner: ds }, out);
        Ok(())
    })
}

/// Draws a dataset from one of the built-in simulation designs.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn j2r_dataset_generate(
    setting: J2rSetting,
    n: usize,
    seed: u64,
    out: *mut *mut J2rDataset,
) -> J2rStatus {
    guard(|| {
        nonnull(out, "out")?;
        let ds = sim::generate(&DgpConfig::new(setting_of(setting), n, seed))?;
        boxed(J2rDataset { inner: ds }, out);
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn j2r_dataset_free(ds: *mut J2rDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of subjects, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn j2r_dataset_n(ds: *const J2rDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.n())
}

/// Number of post-baseline visits, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn j2r_dataset_visits(ds: *const J2rDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.t())
}

/// Number of baseline covariates, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn j2r_dataset_covariates(ds: *const J2rDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.p())
}

/// Fits the nuisance models and computes the selected estimators with
/// intervals. A null `options` uses the defaults.
///
/// # Safety
/// `ds` must be a live handle; `options` null or valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn j2r_analyze(
    ds: *const J2rDataset,
    options: *const J2rOptions,
    out: *mut *mut J2rAnalysis,
) -> J2rStatus {
    guard(|| {
        nonnull(ds, "ds")?;
        nonnull(out, "out")?;
        let o = options.as_ref().copied().unwrap_or_else(|| j2r_options_default());
        if !(o.level > 0.0 && o.level < 1.0) {
            return Err(invalid(format!("level {} is not in (0, 1)", o.level)));
        }
        let basis = match o.basis {
            J2rBasis::Linear => BasisKind::Linear,
            J2rBasis::Polynomial if o.basis_param >= 1 => BasisKind::Polynomial(o.basis_param),
            J2rBasis::Spline => BasisKind::Spline {
                interior_knots: o.basis_param,
            },
            J2rBasis::Polynomial => return Err(invalid("polynomial degree must be at least 1")),
        };
        let moments = match o.moments {
            J2rMoments::First => Moments::First,
            J2rMoments::FirstTwo => Moments::FirstTwo,
            J2rMoments::FirstTwoInteractions => Moments::FirstTwoInteractions,
        };
        let ci = match o.ci {
            J2rCi::Auto => CiChoice::Auto,
            J2rCi::Wald => CiChoice::Wald,
            J2rCi::Percentile => CiChoice::Percentile,
            J2rCi::SymmetricT => CiChoice::SymmetricT,
        };
        let estimators = selected(o.estimators)?;
        let kinds: Vec<EstimatorKind> = estimators.iter().map(|&e| kind_of(e)).collect();
        let opts = AnalysisOptions {
            kinds: kinds.clone(),
            ci,
            b: o.bootstrap_reps,
            seed: o.seed,
            level: o.level,
            ..AnalysisOptions::default()
        };
        let spec = ModelSpec::uniform(Arc::new(RawFeatures), basis, moments);
        let analysis = analyze(&(*ds).inner, &spec, &opts)?;
        boxed(
            J2rAnalysis {
                inner: analysis,
                kinds,
            },
            out,
        );
        Ok(())
    })
}

/// Number of estimates in an analysis, or 0 for a null handle.
///
/// # Safety
/// `an` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn j2r_analysis_len(an: *const J2rAnalysis) -> usize {
    an.as_ref().map_or(0, |a| a.inner.reports.len())
}

/// Copies estimate `index` into `out`.
///
/// # Safety
/// `an` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn j2r_analysis_get(an: *const J2rAnalysis, index: usize, out: *mut J2rEstimate) -> J2rStatus {
    guard(|| {
        nonnull(an, "analysis")?;
        nonnull(out, "out")?;
        let a = &*an;
        let r = a
            .inner
            .reports
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range")))?;
        let kind = a.kinds[index];
        let estimator = ESTIMATORS
            .iter()
            .copied()
            .find(|&e| kind_of(e) == kind)
            .unwrap_or(J2rEstimator::Mr);
        *out = J2rEstimate {
            estimator,
            tau: r.tau,
            se: r.se,
            lo: r.lo,
            hi: r.hi,
            bootstrap_reps: r.bootstrap_reps,
            bootstrap_failures: r.bootstrap_failures,
        };
        Ok(())
    })
}

/// # Safety
/// `an` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn j2r_analysis_free(an: *mut J2rAnalysis) {
    if !an.is_null() {
        drop(Box::from_raw(an));
    }
}

/// Solves for weights `w_i = 1 + exp(lambda' h_i)` with
/// `sum_i w_i h_i = scale * target` and, if `normalize_total` is nonzero,
/// `sum_i w_i = scale`. `moments` is row-major `rows * m`; `weights` receives
/// `rows` values and `lambda`, if not null, `m` values.
///
/// # Safety
/// Arrays must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn j2r_calibrate(
    rows: usize,
    m: usize,
    moments: *const f64,
    target: *const f64,
    scale: f64,
    normalize_total: i32,
    tol: f64,
    max_iter: usize,
    weights: *mut f64,
    lambda: *mut f64,
) -> J2rStatus {
    guard(|| {
        nonnull(weights, "weights")?;
        if m > 0 {
            nonnull(moments, "moments")?;
            nonnull(target, "target")?;
        }
        let h = if m > 0 { std::slice::from_raw_parts(moments, rows * m) } else { &[] };
        let tg = if m > 0 { std::slice::from_raw_parts(target, m) } else { &[] };
        let problem = CalibrationProblem {
            subset: (0..rows).collect(),
            moments: DMatrix::from_row_slice(rows, m, h),
            target: tg.to_vec(),
            scale,
            normalize_total: normalize_total != 0,
        };
        let w = solve_entropy_weights(&problem, tol, max_iter)?;
        std::slice::from_raw_parts_mut(weights, rows).copy_from_slice(&w.weights);
        if !lambda.is_null() {
            std::slice::from_raw_parts_mut(lambda, m).copy_from_slice(&w.lambda);
        }
        Ok(())
    })
}

/// True effect of a built-in design. The discrete design is enumerated
/// exactly; the continuous ones use `draws` Monte Carlo draws.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn j2r_true_tau(setting: J2rSetting, draws: usize, seed: u64, out: *mut f64) -> J2rStatus {
    guard(|| {
        nonnull(out, "out")?;
        let cfg = DgpConfig::new(setting_of(setting), 1, seed);
        let method = match setting {
            J2rSetting::Discrete => TauMethod::Enumeration,
            _ => TauMethod::McLargeN { draws },
        };
        *out = sim::true_tau(&cfg, method)?;
        Ok(())
    })
}
