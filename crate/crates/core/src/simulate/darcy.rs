//! Stochastic Darcy flow `-div(kappa grad u) = 0.5 + alpha w` on the unit
//! square with zero Dirichlet data, on an `n x n` node grid.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{square_grid, FunctionSample};
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const FORCE: f64 = 0.5;
pub const KAPPA_HIGH: f64 = 12.0;
pub const KAPPA_LOW: f64 = 3.0;
pub const GRF_SHIFT: f64 = 9.0;
pub const GRF_POWER: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DarcyInstance {
    pub n: usize,
    /// Node values, row-major with `x` fastest.
    pub kappa: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
}

/// Orthonormal cosine basis of the Neumann Laplacian, `basis[j][p]`, and its
/// eigenvalues on a unit interval with `n` cells.
fn cosine_basis(n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let basis = (0..n)
        .map(|j| {
            let c = if j == 0 { 1.0 } else { 2f64.sqrt() };
            (0..n).map(|p| c * (PI * j as f64 * (p as f64 + 0.5) / n as f64).cos()).collect()
        })
        .collect();
    let nf = n as f64;
    let eig = (0..n).map(|j| (2.0 * nf * (PI * j as f64 / (2.0 * nf)).sin()).powi(2)).collect();
    (basis, eig)
}

/// Gaussian random field with covariance `(-Lap + shift)^(-power)`: each
/// cosine coefficient has standard deviation `(lambda + shift)^(-power / 2)`.
pub fn sample_grf(n: usize, shift: f64, power: f64, rng: &mut Rng) -> Vec<f64> {
    let (basis, eig) = cosine_basis(n);
    let mut field = vec![0.0; n * n];
    for jy in 0..n {
        for jx in 0..n {
            let lambda = eig[jx] + eig[jy];
            let coef = (lambda + shift).powf(-power / 2.0) * rng::normal(rng);
            for q in 0..n {
                let by = coef * basis[jy][q];
                for p in 0..n {
                    field[q * n + p] += by * basis[jx][p];
                }
            }
        }
    }
    field
}

/// Exact pointwise variance of [`sample_grf`].
pub fn grf_variance(n: usize, shift: f64, power: f64) -> Vec<f64> {
    let (basis, eig) = cosine_basis(n);
    let mut var = vec![0.0; n * n];
    for jy in 0..n {
        for jx in 0..n {
            let w = (eig[jx] + eig[jy] + shift).powf(-power);
            for q in 0..n {
                for p in 0..n {
                    var[q * n + p] += w * (basis[jy][q] * basis[jx][p]).powi(2);
                }
            }
        }
    }
    var
}

pub fn push_forward_kappa(g: &[f64]) -> Vec<f64> {
    g.iter().map(|v| if *v > 0.0 { KAPPA_HIGH } else { KAPPA_LOW }).collect()
}

pub fn sample_kappa(n: usize, rng: &mut Rng) -> Vec<f64> {
    push_forward_kappa(&sample_grf(n, GRF_SHIFT, GRF_POWER, rng))
}

fn face(k1: f64, k2: f64) -> f64 {
    2.0 * k1 * k2 / (k1 + k2)
}

/// Symmetric positive definite system on the interior nodes, stored as a
/// lower band: `band[k][d]` is entry `(k, k - d)`, `d <= n - 2`.
struct Banded {
    m: usize,
    width: usize,
    band: Vec<Vec<f64>>,
}

fn interior(n: usize, i: usize, j: usize) -> Option<usize> {
    (i >= 1 && j >= 1 && i <= n - 2 && j <= n - 2).then(|| (j - 1) * (n - 2) + (i - 1))
}

fn assemble(kappa: &[f64], n: usize) -> Result<Banded> {
    if n < 3 || kappa.len() != n * n {
        return Err(Error::Dimension(format!("kappa has {} values for a {n}x{n} grid", kappa.len())));
    }
    if let Some(i) = kappa.iter().position(|k| !(*k > 0.0 && k.is_finite())) {
        return Err(Error::Invalid(format!("kappa[{i}] = {} is not positive", kappa[i])));
    }
    let h = 1.0 / (n - 1) as f64;
    let inv_h2 = 1.0 / (h * h);
    let m = (n - 2) * (n - 2);
    let width = n - 2;
    let mut band = vec![vec![0.0; width + 1]; m];
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            let k = interior(n, i, j).expect("interior");
            let kp = kappa[j * n + i];
            for (ni, nj) in [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)] {
                let a = face(kp, kappa[nj * n + ni]) * inv_h2;
                band[k][0] += a;
                if let Some(l) = interior(n, ni, nj) {
                    if l < k {
                        band[k][k - l] -= a;
                    }
                }
            }
        }
    }
    Ok(Banded { m, width, band })
}

impl Banded {
    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.m];
        for k in 0..self.m {
            y[k] += self.band[k][0] * x[k];
            for d in 1..=self.width.min(k) {
                let a = self.band[k][d];
                y[k] += a * x[k - d];
                y[k - d] += a * x[k];
            }
        }
        y
    }

    /// In-place band Cholesky `A = L L^T` followed by the two triangular
    /// solves.
    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let (m, w) = (self.m, self.width);
        let mut l = self.band.clone();
        for k in 0..m {
            for d in (1..=w.min(k)).rev() {
                let j = k - d;
                let mut s = l[k][d];
                for e in 1..=w.min(j) {
                    if d + e <= w {
                        s -= l[k][d + e] * l[j][e];
                    }
                }
                l[k][d] = s / l[j][0];
            }
            let mut s = l[k][0];
            for d in 1..=w.min(k) {
                s -= l[k][d] * l[k][d];
            }
            if !(s > 0.0) {
                return Err(Error::numerical("darcy solve", format!("matrix not positive definite at row {k}")));
            }
            l[k][0] = s.sqrt();
        }
        let mut y = rhs.to_vec();
        for k in 0..m {
            let mut s = y[k];
            for d in 1..=w.min(k) {
                s -= l[k][d] * y[k - d];
            }
            y[k] = s / l[k][0];
        }
        for k in (0..m).rev() {
            let mut s = y[k];
            for d in 1..=w.min(m - 1 - k) {
                s -= l[k + d][d] * y[k + d];
            }
            y[k] = s / l[k][0];
        }
        Ok(y)
    }
}

/// Dense copy of the interior operator (row-major, `m x m`), for oracles.
pub fn operator_dense(kappa: &[f64], n: usize) -> Result<Vec<f64>> {
    let a = assemble(kappa, n)?;
    let m = a.m;
    let mut dense = vec![0.0; m * m];
    for k in 0..m {
        dense[k * m + k] = a.band[k][0];
        for d in 1..=a.width.min(k) {
            dense[k * m + k - d] = a.band[k][d];
            dense[(k - d) * m + k] = a.band[k][d];
        }
    }
    Ok(dense)
}

/// Right-hand side `0.5 + alpha w / h` on the interior nodes.
pub fn rhs(n: usize, alpha: f64, noise: &[f64]) -> Vec<f64> {
    let h = 1.0 / (n - 1) as f64;
    noise.iter().map(|w| FORCE + alpha * w / h).collect()
}

#[derive(Clone, Debug)]
pub struct DarcySolution {
    pub n: usize,
    /// Node values including the zero boundary, row-major with `x` fastest.
    pub u: Vec<f64>,
    /// Relative residual `|A u - f|_inf / |f|_inf` of the interior system.
    pub residual: f64,
}

impl DarcySolution {
    pub fn to_sample(&self) -> FunctionSample {
        FunctionSample::new(2, square_grid(self.n), self.u.clone()).expect("grid sample")
    }

    /// Interior values in unknown order.
    pub fn interior(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = Vec::with_capacity((n - 2) * (n - 2));
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                out.push(self.u[j * n + i]);
            }
        }
        out
    }
}

/// Solves with the given interior noise vector (length `(n - 2)^2`).
pub fn solve_with_noise(kappa: &[f64], n: usize, alpha: f64, noise: &[f64]) -> Result<DarcySolution> {
    let a = assemble(kappa, n)?;
    if noise.len() != a.m {
        return Err(Error::Dimension(format!("{} noise values for {} unknowns", noise.len(), a.m)));
    }
    let f = rhs(n, alpha, noise);
    let x = a.solve(&f)?;
    let r = a.matvec(&x);
    let fnorm = f.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let residual = r.iter().zip(&f).fold(0.0_f64, |m, (p, q)| m.max((p - q).abs())) / fnorm;
    if !(residual < 1e-10) {
        return Err(Error::numerical("darcy solve", format!("residual {residual:.3e}")));
    }
    let mut u = vec![0.0; n * n];
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            u[j * n + i] = x[interior(n, i, j).expect("interior")];
        }
    }
    Ok(DarcySolution { n, u, residual })
}

/// Solves one instance, drawing the white noise from the instance seed.
pub fn solve_darcy(instance: &DarcyInstance) -> Result<DarcySolution> {
    let n = instance.n;
    let mut rng = rng::stream(rng::derive(instance.seed, "darcy-noise"), 0);
    let noise = rng::normals(&mut rng, (n - 2) * (n - 2));
    solve_with_noise(&instance.kappa, n, instance.alpha, &noise)
}

/// Instance `i` of master seed `seed`: kappa from the random field, noise from
/// a sub-seed.
pub fn sample_instance(i: usize, n: usize, alpha: f64, seed: u64) -> DarcyInstance {
    let mut rng = rng::stream(seed, i as u64);
    let kappa = sample_kappa(n, &mut rng);
    let sub = rand::Rng::random::<u64>(&mut rng);
    DarcyInstance { n, kappa, alpha, seed: sub }
}
