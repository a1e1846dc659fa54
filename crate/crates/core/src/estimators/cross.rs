//! Single-visit estimators written directly in terms of `e(X)`, `pi_1(a, X)`
//! and `mu_1^a(X)`. They are kept separate from the longitudinal code so the
//! two can be checked against each other.

/// Per-subject data and nuisance values for one-visit data. `y[i]` is ignored
/// when `r[i]` is false.
#[derive(Debug, Clone, Copy)]
pub struct CrossInputs<'a> {
    pub a: &'a [u8],
    pub r: &'a [bool],
    pub y: &'a [f64],
    pub e: &'a [f64],
    pub pi1: &'a [f64],
    pub pi0: &'a [f64],
    pub mu1: &'a [f64],
    pub mu0: &'a [f64],
}

struct Row {
    a: f64,
    r: f64,
    ry: f64,
    e: f64,
    pi1: f64,
    pi0: f64,
    mu1: f64,
    mu0: f64,
}

impl CrossInputs<'_> {
    fn n(&self) -> usize {
        self.a.len()
    }

    fn row(&self, i: usize) -> Row {
        let r = self.r[i];
        Row {
            a: f64::from(self.a[i]),
            r: if r { 1.0 } else { 0.0 },
            ry: if r { self.y[i] } else { 0.0 },
            e: self.e[i],
            pi1: self.pi1[i],
            pi0: self.pi0[i],
            mu1: self.mu1[i],
            mu0: self.mu0[i],
        }
    }

    fn mean(&self, f: impl Fn(&Row) -> f64) -> f64 {
        (0..self.n()).map(|i| f(&self.row(i))).sum::<f64>() / self.n() as f64
    }

    fn ratio(&self, num: impl Fn(&Row) -> f64, den: impl Fn(&Row) -> f64) -> f64 {
        let (mut a, mut b) = (0.0, 0.0);
        for i in 0..self.n() {
            let row = self.row(i);
            a += num(&row);
            b += den(&row);
        }
        a / b
    }
}

pub fn rp_om(x: &CrossInputs) -> f64 {
    x.mean(|s| s.pi1 * (s.mu1 - s.mu0))
}

pub fn ps_om(x: &CrossInputs) -> f64 {
    x.mean(|s| {
        let filled = s.ry + (1.0 - s.r) * s.mu0;
        s.a / s.e * filled - (1.0 - s.a) / (1.0 - s.e) * filled
    })
}

pub fn ps_om_n(x: &CrossInputs) -> f64 {
    let filled = |s: &Row| s.ry + (1.0 - s.r) * s.mu0;
    x.ratio(|s| s.a / s.e * filled(s), |s| s.a / s.e)
        - x.ratio(|s| (1.0 - s.a) / (1.0 - s.e) * filled(s), |s| (1.0 - s.a) / (1.0 - s.e))
}

pub fn ps_rp(x: &CrossInputs) -> f64 {
    x.mean(|s| s.a / s.e * s.ry - (1.0 - s.a) / (1.0 - s.e) * s.pi1 / s.pi0 * s.ry)
}

pub fn ps_rp_n(x: &CrossInputs) -> f64 {
    x.ratio(|s| s.a / s.e * s.ry, |s| s.a / s.e)
        - x.ratio(
            |s| (1.0 - s.a) / (1.0 - s.e) * s.pi1 / s.pi0 * s.ry,
            |s| (1.0 - s.a) / (1.0 - s.e) * s.r / s.pi0,
        )
}

/// Uncentered influence-function kernel for each subject.
pub fn tr_kernel(x: &CrossInputs) -> Vec<f64> {
    (0..x.n())
        .map(|i| {
            let s = x.row(i);
            let resid = s.ry - s.r * s.mu0;
            (s.a / s.e - (1.0 - s.a) / (1.0 - s.e) * s.pi1 / s.pi0) * resid
                - (s.a - s.e) / s.e * s.pi1 * (s.mu1 - s.mu0)
        })
        .collect()
}

pub fn tr(x: &CrossInputs) -> f64 {
    let k = tr_kernel(x);
    k.iter().sum::<f64>() / k.len() as f64
}

pub fn tr_n(x: &CrossInputs) -> f64 {
    let resid = |s: &Row| s.ry - s.r * s.mu0;
    x.ratio(|s| s.a / s.e * (resid(s) - s.pi1 * (s.mu1 - s.mu0)), |s| s.a / s.e)
        - x.ratio(
            |s| (1.0 - s.a) / (1.0 - s.e) * s.pi1 / s.pi0 * resid(s),
            |s| (1.0 - s.a) / (1.0 - s.e) * s.r / s.pi0,
        )
        + x.mean(|s| s.pi1 * (s.mu1 - s.mu0))
}

/// Calibrated version; `w_a1`, `w_a0` and `w_r1` are read only where they apply
/// (treated, control, and responders respectively).
pub fn tr_c(x: &CrossInputs, w_a1: &[f64], w_a0: &[f64], w_r1: &[f64]) -> f64 {
    let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..x.n() {
        let s = x.row(i);
        if x.a[i] == 1 {
            a += w_a1[i] * (s.ry - s.r * s.mu0 - s.pi1 * (s.mu1 - s.mu0));
            b += w_a1[i];
        } else if x.r[i] {
            let w = w_a0[i] * w_r1[i];
            c += w * s.pi1 * (s.ry - s.mu0);
            d += w;
        }
    }
    a / b - c / d + x.mean(|s| s.pi1 * (s.mu1 - s.mu0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_hand_case() {
        let x = CrossInputs {
            a: &[1],
            r: &[true],
            y: &[2.0],
            e: &[0.5],
            pi1: &[1.0],
            pi0: &[1.0],
            mu1: &[2.0],
            mu0: &[1.0],
        };
        assert_eq!(tr_kernel(&x), vec![1.0]);
    }
}
