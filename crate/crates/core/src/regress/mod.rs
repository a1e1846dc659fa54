//! Least squares and logistic regression on basis-expanded designs.

mod basis;

pub use basis::{expand_basis, quantile_sorted, BasisSpec, ColumnBasis, FittedBasis};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub ridge: f64,
    pub fallback_ridge: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Predicted probabilities are clipped to `[clip, 1 - clip]`.
    pub clip: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            ridge: 0.0,
            fallback_ridge: 1e-4,
            tol: 1e-8,
            max_iter: 100,
            clip: 0.01,
        }
    }
}

/// Minimises `||y - X b||^2 + ridge * ||b_free||^2`, where the intercept
/// (a leading all-ones column) is left unpenalised.
pub fn fit_ols(design: &DMatrix<f64>, y: &[f64], ridge: f64) -> Result<Vec<f64>> {
    check_dims(design, y)?;
    let gram = design.tr_mul(design);
    let rhs = design.tr_mul(&DVector::from_column_slice(y));
    solve_penalized(gram, rhs, ridge, has_intercept(design))
}

/// Weighted variant: minimises `sum w_i (y_i - x_i b)^2 + ridge * ||b_free||^2`.
pub fn fit_wls(design: &DMatrix<f64>, y: &[f64], w: &[f64], ridge: f64) -> Result<Vec<f64>> {
    check_dims(design, y)?;
    let mut xw = design.clone();
    for (i, wi) in w.iter().enumerate() {
        xw.row_mut(i).scale_mut(*wi);
    }
    let gram = xw.tr_mul(design);
    let rhs = xw.tr_mul(&DVector::from_column_slice(y));
    solve_penalized(gram, rhs, ridge, has_intercept(design))
}

fn check_dims(design: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if design.nrows() != y.len() {
        return Err(Error::InvalidInput(format!(
            "design has {} rows, response has {}",
            design.nrows(),
            y.len()
        )));
    }
    if design.nrows() == 0 {
        return Err(Error::InvalidInput("cannot fit on zero rows".into()));
    }
    Ok(())
}

fn has_intercept(design: &DMatrix<f64>) -> bool {
    design.ncols() > 0 && design.column(0).iter().all(|&v| v == 1.0)
}

fn penalty_diag(p: usize, ridge: f64, intercept: bool) -> impl Iterator<Item = f64> {
    (0..p).map(move |j| if j == 0 && intercept { 0.0 } else { ridge })
}

/// Solves `(G + ridge P) b = r` by Cholesky on the equilibrated system.
fn solve_penalized(mut gram: DMatrix<f64>, rhs: DVector<f64>, ridge: f64, intercept: bool) -> Result<Vec<f64>> {
    let p = gram.ncols();
    for (j, r) in penalty_diag(p, ridge, intercept).enumerate() {
        gram[(j, j)] += r;
    }
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let d = gram[(j, j)];
            if d > 0.0 {
                d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    for j in 0..p {
        for k in 0..p {
            gram[(j, k)] /= scale[j] * scale[k];
        }
    }
    let chol = nalgebra::linalg::Cholesky::new(gram).ok_or(Error::RankDeficient { columns: p })?;
    let l = chol.l_dirty();
    let min_pivot = (0..p).map(|j| l[(j, j)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot * min_pivot > 1e-11) {
        return Err(Error::RankDeficient { columns: p });
    }
    let scaled_rhs = DVector::from_iterator(p, (0..p).map(|j| rhs[j] / scale[j]));
    let sol = chol.solve(&scaled_rhs);
    Ok((0..p).map(|j| sol[j] / scale[j]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub ridge: f64,
    /// The response was all zeros or all ones; only the intercept is set.
    pub constant: bool,
}

/// Penalised logistic regression by iteratively reweighted least squares
/// (Newton steps with step halving on the penalised log-likelihood).
pub fn fit_logistic(design: &DMatrix<f64>, y: &[f64], ridge: f64, opts: &FitOptions) -> Result<LogisticFit> {
    check_dims(design, y)?;
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("logistic response must be 0/1".into()));
    }
    let n = design.nrows();
    let p = design.ncols();
    let intercept = has_intercept(design);
    let ybar = y.iter().sum::<f64>() / n as f64;
    if ybar == 0.0 || ybar == 1.0 {
        let mut coefficients = vec![0.0; p];
        if intercept {
            let c = ybar.clamp(opts.clip, 1.0 - opts.clip);
            coefficients[0] = (c / (1.0 - c)).ln();
        }
        return Ok(LogisticFit {
            coefficients,
            iterations: 0,
            converged: true,
            ridge,
            constant: true,
        });
    }
    let pen: Vec<f64> = penalty_diag(p, ridge, intercept).collect();
    let mut beta = DVector::zeros(p);
    if intercept {
        beta[0] = (ybar / (1.0 - ybar)).ln();
    }
    let yv = DVector::from_column_slice(y);
    let objective = |b: &DVector<f64>| -> f64 {
        let eta = design * b;
        let mut ll = 0.0;
        for i in 0..n {
            ll += y[i] * eta[i] - softplus(eta[i]);
        }
        let penalty: f64 = (0..p).map(|j| pen[j] * b[j] * b[j]).sum();
        ll - 0.5 * penalty
    };
    let mut current = objective(&beta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let eta = design * &beta;
        let mut prob = DVector::zeros(n);
        let mut xw = design.clone();
        for i in 0..n {
            let pi = expit(eta[i]);
            prob[i] = pi;
            xw.row_mut(i).scale_mut(pi * (1.0 - pi));
        }
        let gram = xw.tr_mul(design);
        let mut grad = design.tr_mul(&(&yv - &prob));
        for j in 0..p {
            grad[j] -= pen[j] * beta[j];
        }
        // weights collapsing to zero mid-way signal separation, not a bad design
        let step = match solve_penalized(gram, grad, ridge, intercept) {
            Ok(s) => DVector::from_vec(s),
            Err(Error::RankDeficient { .. }) if iterations > 1 => break,
            Err(e) => return Err(e),
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = &beta + &step * t;
            let obj = objective(&cand);
            if obj.is_finite() && obj >= current - 1e-12 * current.abs().max(1.0) {
                accepted = Some((cand, obj));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, obj)) = accepted else { break };
        let delta = (&cand - &beta).amax();
        let size = cand.amax();
        beta = cand;
        current = obj;
        if delta <= opts.tol * (1.0 + size) {
            converged = true;
            break;
        }
    }
    Ok(LogisticFit {
        coefficients: beta.iter().copied().collect(),
        iterations,
        converged,
        ridge,
        constant: false,
    })
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Logit,
}

/// A regression model on raw inputs: basis, coefficients and link.
#[derive(Debug, Clone)]
pub struct RegressionModel {
    pub basis: FittedBasis,
    pub coefficients: Vec<f64>,
    pub link: Link,
    pub clip: f64,
    pub diagnostics: Vec<String>,
}

impl RegressionModel {
    pub fn fit(link: Link, spec: &BasisSpec, raw: &DMatrix<f64>, y: &[f64], opts: &FitOptions) -> Result<Self> {
        let mut diagnostics = Vec::new();
        let mut spec = spec.clone();
        let mut ridge = opts.ridge;
        let mut basis = FittedBasis::fit(&spec, raw)?;
        if raw.nrows() < basis.width() {
            diagnostics.push(format!(
                "{} rows for {} basis columns; using identity basis with ridge {}",
                raw.nrows(),
                basis.width(),
                opts.fallback_ridge
            ));
            spec = BasisSpec::identity(raw.ncols());
            ridge = ridge.max(opts.fallback_ridge);
            basis = FittedBasis::fit(&spec, raw)?;
        }
        let design = basis.expand(raw);
        let coefficients = match link {
            Link::Identity => match fit_ols(&design, y, ridge) {
                Ok(c) => c,
                Err(Error::RankDeficient { .. }) if ridge < opts.fallback_ridge => {
                    diagnostics.push(format!("rank-deficient design; refit with ridge {}", opts.fallback_ridge));
                    fit_ols(&design, y, opts.fallback_ridge)?
                }
                Err(e) => return Err(e),
            },
            Link::Logit => {
                let first = match fit_logistic(&design, y, ridge, opts) {
                    Ok(f) => Some(f),
                    Err(Error::RankDeficient { .. }) if ridge < opts.fallback_ridge => {
                        diagnostics.push(format!("rank-deficient design; refit with ridge {}", opts.fallback_ridge));
                        None
                    }
                    Err(e) => return Err(e),
                };
                let fit = match first {
                    Some(f) if f.constant => {
                        diagnostics.push("constant binary response; predictions clipped".into());
                        f
                    }
                    Some(f) if f.converged && !separated(&design, &f.coefficients) => f,
                    Some(_) if ridge >= opts.fallback_ridge => {
                        diagnostics.push("logistic fit did not converge cleanly".into());
                        fit_logistic(&design, y, ridge, opts)?
                    }
                    Some(_) => {
                        diagnostics.push(format!(
                            "possible separation; refit with ridge {}",
                            opts.fallback_ridge
                        ));
                        fit_logistic(&design, y, opts.fallback_ridge, opts)?
                    }
                    None => fit_logistic(&design, y, opts.fallback_ridge, opts)?,
                };
                fit.coefficients
            }
        };
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical("non-finite regression coefficients".into()));
        }
        Ok(RegressionModel {
            basis,
            coefficients,
            link,
            clip: opts.clip,
            diagnostics,
        })
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        let mut row = Vec::with_capacity(self.basis.width());
        self.basis.expand_row(x, &mut row);
        dot(&row, &self.coefficients)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let eta = self.linear_predictor(x);
        match self.link {
            Link::Identity => eta,
            Link::Logit => expit(eta).clamp(self.clip, 1.0 - self.clip),
        }
    }
}

fn separated(design: &DMatrix<f64>, beta: &[f64]) -> bool {
    let b = DVector::from_column_slice(beta);
    (design * b).iter().any(|e| e.abs() > 30.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_is_recovered() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = fit_ols(&x, &[1.0, 3.0, 5.0, 7.0], 0.0).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 3.0, 3.0]);
        assert!(matches!(fit_ols(&x, &[1.0, 2.0, 3.0], 0.0), Err(Error::RankDeficient { .. })));
        assert!(fit_ols(&x, &[1.0, 2.0, 3.0], 1e-4).is_ok());
    }

    #[test]
    fn constant_binary_response_gives_clipped_constant() {
        let raw = DMatrix::from_row_slice(3, 1, &[0.1, 0.5, 0.9]);
        let m = RegressionModel::fit(Link::Logit, &BasisSpec::identity(1), &raw, &[1.0, 1.0, 1.0], &FitOptions::default())
            .unwrap();
        assert!((m.predict(&[0.3]) - 0.99).abs() < 1e-12);
        assert_eq!(m.diagnostics.len(), 1);
    }

    #[test]
    fn separated_data_falls_back_to_ridge() {
        let raw = DMatrix::from_row_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let m = RegressionModel::fit(Link::Logit, &BasisSpec::identity(1), &raw, &y, &FitOptions::default()).unwrap();
        assert!(m.diagnostics.iter().any(|d| d.contains("separation")));
        assert!(m.coefficients.iter().all(|c| c.is_finite()));
        assert_eq!(m.predict(&[5.0]), 0.99);
        assert_eq!(m.predict(&[-5.0]), 0.01);
    }
}
