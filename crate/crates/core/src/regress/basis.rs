//! Column-wise basis expansions: identity, polynomial and natural cubic splines.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ColumnBasis {
    Identity,
    Polynomial(usize),
    /// Natural cubic spline with knots at evenly spaced training quantiles
    /// plus the two boundary knots at the observed min and max.
    NaturalSpline { interior_knots: usize },
}

/// Basis assignment for every raw column, plus optional pairwise products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub columns: Vec<ColumnBasis>,
    #[serde(default)]
    pub interactions: Vec<(usize, usize)>,
}

impl BasisSpec {
    pub fn uniform(q: usize, basis: ColumnBasis) -> Self {
        BasisSpec {
            columns: vec![basis; q],
            interactions: Vec::new(),
        }
    }

    pub fn identity(q: usize) -> Self {
        Self::uniform(q, ColumnBasis::Identity)
    }

    pub fn splines(q: usize, interior_knots: usize) -> Self {
        Self::uniform(q, ColumnBasis::NaturalSpline { interior_knots })
    }

    pub fn with_interactions(mut self, pairs: Vec<(usize, usize)>) -> Self {
        self.interactions = pairs;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
enum FittedColumn {
    Identity,
    Polynomial(usize),
    Spline { lo: f64, range: f64, knots: Vec<f64> },
}

impl FittedColumn {
    fn width(&self) -> usize {
        match self {
            FittedColumn::Identity => 1,
            FittedColumn::Polynomial(d) => *d,
            FittedColumn::Spline { knots, .. } => knots.len() - 1,
        }
    }
}

/// A basis whose data-dependent parts (knots) have been fixed on training data.
/// Expanded rows always start with an intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedBasis {
    columns: Vec<FittedColumn>,
    interactions: Vec<(usize, usize)>,
    width: usize,
}

impl FittedBasis {
    pub fn fit(spec: &BasisSpec, raw: &DMatrix<f64>) -> Result<Self> {
        if spec.columns.len() != raw.ncols() {
            return Err(Error::InvalidInput(format!(
                "basis covers {} columns, data has {}",
                spec.columns.len(),
                raw.ncols()
            )));
        }
        for &(a, b) in &spec.interactions {
            if a >= raw.ncols() || b >= raw.ncols() {
                return Err(Error::InvalidInput(format!("interaction ({a}, {b}) out of range")));
            }
        }
        let mut columns = Vec::with_capacity(raw.ncols());
        for (j, cb) in spec.columns.iter().enumerate() {
            let col: Vec<f64> = raw.column(j).iter().copied().collect();
            let binary = col.iter().all(|&v| v == 0.0 || v == 1.0);
            let fitted = match *cb {
                _ if binary => FittedColumn::Identity,
                ColumnBasis::Identity => FittedColumn::Identity,
                ColumnBasis::Polynomial(d) => {
                    if d == 0 {
                        return Err(Error::InvalidInput("polynomial degree must be positive".into()));
                    }
                    FittedColumn::Polynomial(d)
                }
                ColumnBasis::NaturalSpline { interior_knots } => spline_column(&col, interior_knots),
            };
            columns.push(fitted);
        }
        let width = 1 + columns.iter().map(FittedColumn::width).sum::<usize>() + spec.interactions.len();
        Ok(FittedBasis {
            columns,
            interactions: spec.interactions.clone(),
            width,
        })
    }

    /// Number of expanded columns including the intercept.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn input_width(&self) -> usize {
        self.columns.len()
    }

    /// Interior and boundary knots for column `j`, on the original scale.
    pub fn knots(&self, j: usize) -> Option<Vec<f64>> {
        match &self.columns[j] {
            FittedColumn::Spline { lo, range, knots } => {
                Some(knots.iter().map(|k| lo + k * range).collect())
            }
            _ => None,
        }
    }

    pub fn expand_row(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.columns.len());
        out.push(1.0);
        for (v, col) in x.iter().zip(&self.columns) {
            match col {
                FittedColumn::Identity => out.push(*v),
                FittedColumn::Polynomial(d) => {
                    let mut p = 1.0;
                    for _ in 0..*d {
                        p *= v;
                        out.push(p);
                    }
                }
                FittedColumn::Spline { lo, range, knots } => {
                    natural_spline_row((v - lo) / range, knots, out)
                }
            }
        }
        for &(a, b) in &self.interactions {
            out.push(x[a] * x[b]);
        }
    }

    pub fn expand(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        let n = raw.nrows();
        let mut data = Vec::with_capacity(n * self.width);
        let mut row = Vec::with_capacity(raw.ncols());
        for i in 0..n {
            row.clear();
            row.extend(raw.row(i).iter().copied());
            self.expand_row(&row, &mut data);
        }
        DMatrix::from_row_slice(n, self.width, &data)
    }
}

/// Fixes the basis on `raw` and returns it together with the expanded design.
pub fn expand_basis(spec: &BasisSpec, raw: &DMatrix<f64>) -> Result<(FittedBasis, DMatrix<f64>)> {
    let basis = FittedBasis::fit(spec, raw)?;
    let design = basis.expand(raw);
    Ok((basis, design))
}

fn spline_column(col: &[f64], interior: usize) -> FittedColumn {
    let mut sorted = col.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    let range = hi - lo;
    if !(range > 0.0) {
        return FittedColumn::Identity;
    }
    let mut knots = Vec::with_capacity(interior + 2);
    for k in 0..=interior + 1 {
        let q = quantile_sorted(&sorted, k as f64 / (interior + 1) as f64);
        let u = (q - lo) / range;
        if knots.last().map_or(true, |&prev: &f64| u > prev + 1e-9) {
            knots.push(u);
        }
    }
    // the last knot must be the upper boundary
    if let Some(last) = knots.last_mut() {
        *last = 1.0;
    }
    if knots.len() < 3 {
        return FittedColumn::Identity;
    }
    FittedColumn::Spline { lo, range, knots }
}

/// Linear-interpolation quantile (R's type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn natural_spline_row(u: f64, knots: &[f64], out: &mut Vec<f64>) {
    let k = knots.len();
    let last = knots[k - 1];
    let cube = |z: f64| if z > 0.0 { z * z * z } else { 0.0 };
    let d = |j: usize| (cube(u - knots[j]) - cube(u - last)) / (last - knots[j]);
    out.push(u);
    let dk = d(k - 2);
    for j in 0..k - 2 {
        out.push(d(j) - dk);
    }
}
