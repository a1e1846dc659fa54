//! A finite-support design with binary `X_1, X_2` and binary outcomes, for
//! which every population quantity can be computed by enumeration.
//!
//! Cells are indexed `x = x_1 + 2 x_2` and two-visit histories
//! `h = x + 4 y_1`. Outcomes take the values `0` and `y_high`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TrialDataset;
use crate::error::{Error, Result};
use crate::nuisance::NuisanceValues;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscreteDgp {
    pub t: usize,
    pub px: [f64; 4],
    pub e: [f64; 4],
    /// `pi1[a][x]`.
    pub pi1: [[f64; 4]; 2],
    /// `q1[a][x] = P(Y_1 = y_high | x, a, R_1 = 1)`.
    pub q1: [[f64; 4]; 2],
    /// `pi2[a][h]`.
    pub pi2: [[f64; 8]; 2],
    /// `q2[a][h]`.
    pub q2: [[f64; 8]; 2],
    pub y_high: f64,
}

impl Default for DiscreteDgp {
    fn default() -> Self {
        DiscreteDgp::dyadic(2)
    }
}

/// One point of the observed-data support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub x: usize,
    pub a: u8,
    /// Number of observed visits.
    pub k: usize,
    pub y: [u8; 2],
    pub prob: f64,
}

/// Population values of the identification formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Identification {
    pub response_pattern: f64,
    pub propensity_outcome: f64,
    pub propensity_response: f64,
    pub eif_mean: f64,
}

impl DiscreteDgp {
    /// All probabilities are multiples of 1/4, so the population of
    /// `4^(2t+2)` subjects reproduces the distribution exactly.
    pub fn dyadic(t: usize) -> Self {
        DiscreteDgp {
            t,
            px: [0.25; 4],
            e: [0.5, 0.25, 0.75, 0.5],
            pi1: [[0.5, 0.75, 0.25, 0.75], [0.75, 0.5, 0.5, 0.25]],
            q1: [[0.25, 0.5, 0.5, 0.75], [0.5, 0.75, 0.75, 0.25]],
            pi2: [
                [0.75, 0.5, 0.5, 0.75, 0.5, 0.25, 0.75, 0.5],
                [0.5, 0.75, 0.25, 0.5, 0.75, 0.5, 0.5, 0.25],
            ],
            q2: [
                [0.25, 0.5, 0.75, 0.5, 0.5, 0.75, 0.25, 0.75],
                [0.75, 0.5, 0.25, 0.5, 0.25, 0.5, 0.75, 0.75],
            ],
            y_high: 1.0,
        }
    }

    pub fn population_size(&self) -> usize {
        4usize.pow(2 * self.t as u32 + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.t) {
            return Err(Error::InvalidInput("discrete design supports t = 1 or 2".into()));
        }
        let probs = self
            .px
            .iter()
            .chain(&self.e)
            .chain(self.pi1.iter().flatten())
            .chain(self.q1.iter().flatten())
            .chain(self.pi2.iter().flatten())
            .chain(self.q2.iter().flatten());
        if probs.clone().any(|p| !(0.0..=1.0).contains(p)) || !self.y_high.is_finite() {
            return Err(Error::InvalidInput("discrete design probabilities must lie in [0, 1]".into()));
        }
        if (self.px.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput("cell probabilities must sum to one".into()));
        }
        Ok(())
    }

    fn py1(&self, a: usize, x: usize, y1: usize) -> f64 {
        let q = self.q1[a][x];
        if y1 == 1 {
            q
        } else {
            1.0 - q
        }
    }

    /// Every atom with positive probability.
    pub fn atoms(&self) -> Vec<Atom> {
        let mut out = Vec::new();
        let mut push = |atom: Atom| {
            if atom.prob > 0.0 {
                out.push(atom);
            }
        };
        for x in 0..4 {
            for a in 0..2usize {
                let pa = if a == 1 { self.e[x] } else { 1.0 - self.e[x] };
                let base = self.px[x] * pa;
                let p1 = self.pi1[a][x];
                push(Atom {
                    x,
                    a: a as u8,
                    k: 0,
                    y: [0, 0],
                    prob: base * (1.0 - p1),
                });
                for y1 in 0..2usize {
                    let p_y1 = base * p1 * self.py1(a, x, y1);
                    if self.t == 1 {
                        push(Atom {
                            x,
                            a: a as u8,
                            k: 1,
                            y: [y1 as u8, 0],
                            prob: p_y1,
                        });
                        continue;
                    }
                    let h = x + 4 * y1;
                    let p2 = self.pi2[a][h];
                    push(Atom {
                        x,
                        a: a as u8,
                        k: 1,
                        y: [y1 as u8, 0],
                        prob: p_y1 * (1.0 - p2),
                    });
                    for y2 in 0..2usize {
                        let q = if y2 == 1 { self.q2[a][h] } else { 1.0 - self.q2[a][h] };
                        push(Atom {
                            x,
                            a: a as u8,
                            k: 2,
                            y: [y1 as u8, y2 as u8],
                            prob: p_y1 * p2 * q,
                        });
                    }
                }
            }
        }
        out
    }

    /// `P(A = 1 | H_1, R_1 = 1)`.
    pub fn e1(&self, x: usize, y1: usize) -> f64 {
        let num = self.e[x] * self.pi1[1][x] * self.py1(1, x, y1);
        let den = num + (1.0 - self.e[x]) * self.pi1[0][x] * self.py1(0, x, y1);
        num / den
    }

    /// `mu_t^a(H_s)` for `s < t`; `y1` is read only when `s = 1`.
    pub fn mu(&self, a: usize, s: usize, x: usize, y1: usize) -> f64 {
        let yh = self.y_high;
        match (self.t, s) {
            (1, _) => yh * self.q1[a][x],
            (_, 1) => yh * self.q2[a][x + 4 * y1],
            _ => (0..2).map(|v| self.py1(a, x, v) * yh * self.q2[a][x + 4 * v]).sum(),
        }
    }

    /// `g_{s+1}(H_0)` for `s = 1..t`.
    pub fn g(&self, s: usize, x: usize) -> f64 {
        if self.t == 1 {
            return self.mu(1, 0, x, 0);
        }
        (0..2)
            .map(|y1| {
                let p2 = self.pi2[1][x + 4 * y1];
                let stay = if s == 1 {
                    (1.0 - p2) * self.mu(0, 1, x, y1)
                } else {
                    p2 * self.mu(1, 1, x, y1)
                };
                self.py1(1, x, y1) * stay
            })
            .sum()
    }

    pub fn true_tau(&self) -> f64 {
        (0..4)
            .map(|x| {
                let g: f64 = (1..=self.t).map(|s| self.g(s, x)).sum();
                self.px[x] * self.pi1[1][x] * (g - self.mu(0, 0, x, 0))
            })
            .sum()
    }

    fn y_value(&self, atom: &Atom, s: usize) -> f64 {
        self.y_high * f64::from(atom.y[s - 1])
    }

    /// `mu_t^0(H_s)` at an atom, with `Y_t` at `s = t`.
    fn mu0_at(&self, atom: &Atom, s: usize) -> f64 {
        if s == self.t {
            self.y_value(atom, self.t)
        } else {
            self.mu(0, s, atom.x, atom.y[0] as usize)
        }
    }

    fn pi_at(&self, a: usize, s: usize, atom: &Atom) -> f64 {
        if s == 1 {
            self.pi1[a][atom.x]
        } else {
            self.pi2[a][atom.x + 4 * atom.y[0] as usize]
        }
    }

    fn delta_at(&self, s: usize, atom: &Atom) -> f64 {
        if s == 1 {
            return 1.0;
        }
        let e0 = self.e[atom.x];
        let e1 = self.e1(atom.x, atom.y[0] as usize);
        (e1 / e0) * ((1.0 - e0) / (1.0 - e1))
    }

    fn bracket_at(&self, s: usize, atom: &Atom) -> f64 {
        let mut acc = 0.0;
        let mut pibar = 1.0;
        for k in 1..=s {
            acc += pibar * (1.0 - self.pi_at(1, k, atom)) * self.delta_at(k, atom);
            pibar *= self.pi_at(0, k, atom);
        }
        acc - 1.0
    }

    fn pibar0_at(&self, s: usize, atom: &Atom) -> f64 {
        (1..=s).map(|k| self.pi_at(0, k, atom)).product()
    }

    /// Uncentered efficient influence function at an atom.
    pub fn eif_kernel(&self, atom: &Atom) -> f64 {
        let a = f64::from(atom.a);
        let e0 = self.e[atom.x];
        let p1 = self.pi1[1][atom.x];
        let g: f64 = p1 * (1..=self.t).map(|s| self.g(s, atom.x)).sum::<f64>();
        let m0 = self.mu(0, 0, atom.x, 0);
        let omega = self.mu0_at(atom, atom.k);
        let mut v = a / e0 * omega + (1.0 - a / e0) * (g + (1.0 - p1) * m0) - m0;
        if atom.a == 0 {
            for s in 1..=atom.k {
                let d = self.mu0_at(atom, s) - self.mu0_at(atom, s - 1);
                v += self.bracket_at(s, atom) / ((1.0 - e0) * self.pibar0_at(s, atom)) * d;
            }
        }
        v
    }

    /// The three identification formulas and the mean of the efficient
    /// influence function kernel, all as exact population averages.
    pub fn identification(&self) -> Identification {
        let mut ps_om = 0.0;
        let mut ps_rp = 0.0;
        let mut eif = 0.0;
        let t = self.t;
        for atom in self.atoms() {
            let a = f64::from(atom.a);
            let e0 = self.e[atom.x];
            let omega = self.mu0_at(&atom, atom.k);
            ps_om += atom.prob * (a / e0 - (1.0 - a) / (1.0 - e0)) * omega;
            if atom.k == t {
                let y = self.y_value(&atom, t);
                let w = if atom.a == 1 {
                    1.0 / e0
                } else {
                    self.bracket_at(t, &atom) / ((1.0 - e0) * self.pibar0_at(t, &atom))
                };
                ps_rp += atom.prob * w * y;
            }
            eif += atom.prob * self.eif_kernel(&atom);
        }
        Identification {
            response_pattern: self.true_tau(),
            propensity_outcome: ps_om,
            propensity_response: ps_rp,
            eif_mean: eif,
        }
    }

    /// `V{phi}` by enumeration.
    pub fn eif_variance(&self) -> f64 {
        let tau = self.true_tau();
        self.atoms()
            .iter()
            .map(|at| {
                let d = self.eif_kernel(at) - tau;
                at.prob * d * d
            })
            .sum()
    }

    fn row(&self, atom: &Atom) -> (Vec<f64>, u8, Vec<Option<f64>>) {
        let x = vec![(atom.x & 1) as f64, (atom.x >> 1) as f64];
        let y = (1..=self.t)
            .map(|s| (s <= atom.k).then(|| self.y_value(atom, s)))
            .collect();
        (x, atom.a, y)
    }

    fn build(&self, rows: Vec<(Vec<f64>, u8, Vec<Option<f64>>)>) -> Result<TrialDataset> {
        let mut xs = Vec::with_capacity(rows.len());
        let mut a = Vec::with_capacity(rows.len());
        let mut ys = Vec::with_capacity(rows.len());
        for (x, ai, y) in rows {
            xs.push(x);
            a.push(ai);
            ys.push(y);
        }
        let ds = TrialDataset::from_rows(xs, a, ys)?;
        let outs: Vec<String> = (1..=self.t).map(|s| format!("Y{s}")).collect();
        ds.with_names("A", &["X1".to_string(), "X2".to_string()], &outs)
    }

    /// The population as a dataset in which each atom appears
    /// `prob * size` times. Fails unless every multiplicity is an integer.
    pub fn population(&self, size: usize) -> Result<TrialDataset> {
        let mut rows = Vec::with_capacity(size);
        for atom in self.atoms() {
            let m = atom.prob * size as f64;
            let r = m.round();
            if (m - r).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "population size {size} does not give integer multiplicities"
                )));
            }
            for _ in 0..r as usize {
                rows.push(self.row(&atom));
            }
        }
        self.build(rows)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<TrialDataset> {
        self.sample_with(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub(crate) fn sample_with(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<TrialDataset> {
        self.validate()?;
        let atoms = self.atoms();
        let mut cum = Vec::with_capacity(atoms.len());
        let mut acc = 0.0;
        for at in &atoms {
            acc += at.prob;
            cum.push(acc);
        }
        let rows = (0..n)
            .map(|_| {
                let u = rng.gen::<f64>() * acc;
                let j = cum.partition_point(|&c| c <= u).min(atoms.len() - 1);
                self.row(&atoms[j])
            })
            .collect();
        self.build(rows)
    }

    /// True nuisance values for the subjects of `ds` (covariates `X_1, X_2`).
    pub fn true_values(&self, ds: &TrialDataset) -> Result<NuisanceValues> {
        if ds.t() != self.t || ds.p() != 2 {
            return Err(Error::InvalidInput("dataset does not match the discrete design".into()));
        }
        let n = ds.n();
        let t = self.t;
        let cell = |i: usize| {
            let x = ds.covariates(i);
            usize::from(x[0] != 0.0) + 2 * usize::from(x[1] != 0.0)
        };
        let y1 = |i: usize| ds.outcome(i, 1).map(|v| usize::from(v != 0.0));
        let nan = f64::NAN;
        let e0: Vec<f64> = (0..n).map(|i| self.e[cell(i)]).collect();
        let mut e = vec![e0];
        if t == 2 {
            e.push((0..n).map(|i| y1(i).map_or(nan, |y| self.e1(cell(i), y))).collect());
        }
        let pi = |a: usize| -> Vec<Vec<f64>> {
            let mut v = vec![(0..n).map(|i| self.pi1[a][cell(i)]).collect::<Vec<_>>()];
            if t == 2 {
                v.push((0..n).map(|i| y1(i).map_or(nan, |y| self.pi2[a][cell(i) + 4 * y])).collect());
            }
            v
        };
        let mu = |a: usize| -> Vec<Vec<f64>> {
            let mut v = vec![(0..n).map(|i| self.mu(a, 0, cell(i), 0)).collect::<Vec<_>>()];
            if t == 2 {
                v.push((0..n).map(|i| y1(i).map_or(nan, |y| self.mu(a, 1, cell(i), y))).collect());
            }
            v.push((0..n).map(|i| ds.outcome(i, t).unwrap_or(nan)).collect());
            v
        };
        let g = (1..=t).map(|s| (0..n).map(|i| self.g(s, cell(i))).collect()).collect();
        Ok(NuisanceValues {
            e: Some(e),
            pi: [Some(pi(0)), Some(pi(1))],
            mu: [Some(mu(0)), Some(mu(1))],
            g: Some(g),
            diagnostics: Vec::new(),
        })
    }
}
