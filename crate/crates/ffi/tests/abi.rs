use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use j2r::*;

fn last_error() -> String {
    let p = j2r_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn generated(setting: J2rSetting, n: usize, seed: u64) -> *mut J2rDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { j2r_dataset_generate(setting, n, seed, &mut ds) }, J2rStatus::Ok);
    ds
}

#[test]
fn generate_and_analyze_round_trip() {
    let ds = generated(J2rSetting::Longitudinal, 300, 4);
    unsafe {
        assert_eq!(j2r_dataset_n(ds), 300);
        assert_eq!(j2r_dataset_visits(ds), 2);
        assert_eq!(j2r_dataset_covariates(ds), 5);
    }
    let mut opts = j2r_options_default();
    opts.bootstrap_reps = 0;
    opts.basis = J2rBasis::Linear;
    opts.estimators = (1 << J2rEstimator::Mr as u32) | (1 << J2rEstimator::MrN as u32);
    let mut an = ptr::null_mut();
    assert_eq!(unsafe { j2r_analyze(ds, &opts, &mut an) }, J2rStatus::Ok);
    assert_eq!(unsafe { j2r_analysis_len(an) }, 2);
    let mut est = J2rEstimate {
        estimator: J2rEstimator::RpPm,
        tau: 0.0,
        se: 0.0,
        lo: 0.0,
        hi: 0.0,
        bootstrap_reps: 0,
        bootstrap_failures: 0,
    };
    assert_eq!(unsafe { j2r_analysis_get(an, 1, &mut est) }, J2rStatus::Ok);
    assert_eq!(est.estimator, J2rEstimator::MrN);
    assert!(est.se > 0.0 && est.lo < est.tau && est.tau < est.hi);
    assert_eq!(unsafe { j2r_analysis_get(an, 2, &mut est) }, J2rStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));
    unsafe {
        j2r_analysis_free(an);
        j2r_dataset_free(ds);
    }
}

#[test]
fn ffi_matches_core_library() {
    let ds = generated(J2rSetting::CrossSectional, 400, 9);
    let mut opts = j2r_options_default();
    opts.bootstrap_reps = 0;
    opts.basis = J2rBasis::Linear;
    opts.moments = J2rMoments::First;
    opts.estimators = 1 << J2rEstimator::Mr as u32;
    let mut an = ptr::null_mut();
    assert_eq!(unsafe { j2r_analyze(ds, &opts, &mut an) }, J2rStatus::Ok);
    let mut est = std::mem::MaybeUninit::<J2rEstimate>::uninit();
    assert_eq!(unsafe { j2r_analysis_get(an, 0, est.as_mut_ptr()) }, J2rStatus::Ok);
    let est = unsafe { est.assume_init() };

    let core_ds = j2r_core::sim::generate(&j2r_core::sim::DgpConfig::new(
        j2r_core::sim::Setting::CrossSectional,
        400,
        9,
    ))
    .unwrap();
    let spec = j2r_core::ModelSpec::uniform(
        std::sync::Arc::new(j2r_core::nuisance::RawFeatures),
        j2r_core::BasisKind::Linear,
        j2r_core::Moments::First,
    );
    let vals = j2r_core::fit_nuisances(&core_ds, &spec).unwrap().values;
    let direct = j2r_core::estimate(&core_ds, &vals, j2r_core::EstimatorKind::Eif, None).unwrap();
    assert_eq!(est.tau, direct.tau);
    unsafe {
        j2r_analysis_free(an);
        j2r_dataset_free(ds);
    }
}

#[test]
fn from_arrays_and_csv_agree() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "A,X1,Y1,Y2\n1,0.5,1.0,2.0\n0,-0.3,0.2,\n1,1.1,,\n0,0.0,0.4,0.1\n").unwrap();
    let c = |s: &str| CString::new(s).unwrap();
    let mut from_csv = ptr::null_mut();
    let status = unsafe {
        j2r_dataset_load_csv(
            c(path.to_str().unwrap()).as_ptr(),
            c("A").as_ptr(),
            c("X1").as_ptr(),
            c("Y1, Y2").as_ptr(),
            &mut from_csv,
        )
    };
    assert_eq!(status, J2rStatus::Ok, "{}", last_error());
    let x = [0.5, -0.3, 1.1, 0.0];
    let a = [1u8, 0, 1, 0];
    let nan = f64::NAN;
    let y = [1.0, 2.0, 0.2, nan, nan, nan, 0.4, 0.1];
    let mut from_arrays = ptr::null_mut();
    let status = unsafe { j2r_dataset_from_arrays(4, 1, 2, x.as_ptr(), a.as_ptr(), y.as_ptr(), &mut from_arrays) };
    assert_eq!(status, J2rStatus::Ok);
    unsafe {
        for ds in [from_csv, from_arrays] {
            assert_eq!((j2r_dataset_n(ds), j2r_dataset_covariates(ds), j2r_dataset_visits(ds)), (4, 1, 2));
            j2r_dataset_free(ds);
        }
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut ds = ptr::null_mut();
    let c = |s: &str| CString::new(s).unwrap();
    let status = unsafe {
        j2r_dataset_load_csv(
            c("/nonexistent/file.csv").as_ptr(),
            c("A").as_ptr(),
            c("X").as_ptr(),
            c("Y").as_ptr(),
            &mut ds,
        )
    };
    assert_eq!(status, J2rStatus::IoError);
    assert!(ds.is_null());

    let status = unsafe { j2r_dataset_load_csv(ptr::null(), ptr::null(), ptr::null(), ptr::null(), &mut ds) };
    assert_eq!(status, J2rStatus::NullPointer);
    assert!(last_error().contains("null"));

    // Y2 observed after Y1 missing.
    let y = [f64::NAN, 1.0, 0.0, 0.0];
    let status = unsafe { j2r_dataset_from_arrays(2, 0, 2, ptr::null(), [1u8, 0].as_ptr(), y.as_ptr(), &mut ds) };
    assert_eq!(status, J2rStatus::DataError);
    assert!(last_error().contains("non-monotone"));

    let gen = generated(J2rSetting::CrossSectional, 100, 1);
    let mut opts = j2r_options_default();
    opts.estimators = 1 << 9;
    let mut an = ptr::null_mut();
    assert_eq!(unsafe { j2r_analyze(gen, &opts, &mut an) }, J2rStatus::InvalidArgument);
    opts.estimators = 0;
    opts.level = 1.5;
    assert_eq!(unsafe { j2r_analyze(gen, &opts, &mut an) }, J2rStatus::InvalidArgument);
    assert!(an.is_null());
    unsafe {
        j2r_dataset_free(gen);
        j2r_dataset_free(ptr::null_mut());
        j2r_analysis_free(ptr::null_mut());
    }
}

#[test]
fn calibration_closed_form() {
    // h = 1, three subjects, total 6: the unconstrained optimum w = 2 is feasible.
    let h = [1.0, 1.0, 1.0];
    let target = [1.0];
    let mut w = [0.0; 3];
    let mut lambda = [f64::NAN];
    let status = unsafe { j2r_calibrate(3, 1, h.as_ptr(), target.as_ptr(), 6.0, 0, 1e-10, 50, w.as_mut_ptr(), lambda.as_mut_ptr()) };
    assert_eq!(status, J2rStatus::Ok);
    for wi in w {
        assert!((wi - 2.0).abs() < 1e-10);
    }
    assert!(lambda[0].abs() < 1e-8);

    let status = unsafe { j2r_calibrate(3, 1, h.as_ptr(), target.as_ptr(), -1.0, 0, 1e-10, 50, w.as_mut_ptr(), ptr::null_mut()) };
    assert_ne!(status, J2rStatus::Ok);
}

#[test]
fn discrete_truth_is_exact() {
    let mut tau = f64::NAN;
    assert_eq!(unsafe { j2r_true_tau(J2rSetting::Discrete, 0, 0, &mut tau) }, J2rStatus::Ok);
    let cfg = j2r_core::sim::DgpConfig::new(j2r_core::sim::Setting::DiscreteOracle, 1, 0);
    assert_eq!(tau, cfg.discrete.true_tau());
}

#[test]
fn labels_and_version() {
    let label = |e, t| unsafe { CStr::from_ptr(j2r_estimator_label(e, t)) }.to_str().unwrap().to_string();
    assert_eq!(label(J2rEstimator::MrC, 2), "mr-C");
    assert_eq!(label(J2rEstimator::MrC, 1), "tr-C");
    assert_eq!(label(J2rEstimator::RpPm, 1), "rp-om");
    assert_eq!(label(J2rEstimator::PsRpN, 3), "ps-rp-N");
    let v = unsafe { CStr::from_ptr(j2r_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/j2r.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in ["j2r_analyze", "j2r_dataset_free", "j2r_last_error", "J2R_STATUS_DATA_ERROR", "typedef struct J2rDataset J2rDataset"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ J2rOptions o = j2r_options_default(); J2rDataset *d = 0; \
             return (int)j2r_dataset_generate(J2R_SETTING_DISCRETE, 10, o.seed, &d); }}\n"
        ),
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match Command::new(&cc).args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status() {
        Ok(s) => assert!(s.success(), "header does not compile"),
        Err(e) => eprintln!("skipping C compile check: {cc} unavailable ({e})"),
    }
}
