//! Nonlinear two-point boundary value problem
//! `u'' - u^2 u' = f` on `[-1, 1]`, `u(-1) = X_a`, `u(1) = X_b`.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{linspace, FunctionSample};
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const LO: f64 = -1.0;
pub const HI: f64 = 1.0;
/// Newton stops once the `h^2`-scaled residual is below this.
pub const NEWTON_TOL: f64 = 1e-12;
pub const MAX_NEWTON: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BvpParams {
    pub a: f64,
    pub b: f64,
    pub x_a: f64,
    pub x_b: f64,
    pub seed: u64,
}

impl BvpParams {
    /// `a, b ~ U[-3, 3]`, `X_a ~ N(a, 0.3^2)`, `X_b ~ U(b - 0.3, b + 0.4)`.
    pub fn sample(rng: &mut Rng, seed: u64) -> Self {
        let a = rng.random_range(-3.0..=3.0);
        let b = rng.random_range(-3.0..=3.0);
        let x_a = a + 0.3 * rng::normal(rng);
        let x_b = rng.random_range(b - 0.3..b + 0.4);
        Self { a, b, x_a, x_b, seed }
    }
}

/// Right-hand side choice; `Zero` is a test hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Forcing {
    Standard,
    Zero,
}

pub fn forcing(x: f64) -> f64 {
    let (s, c) = (PI * x).sin_cos();
    -PI * PI * s - PI * c * s * s
}

/// Solution of the second-order scheme on one grid.
#[derive(Clone, Debug)]
pub struct GridSolution {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    /// Infinity norm of the `h^2`-scaled discrete residual.
    pub residual: f64,
    pub iterations: usize,
}

fn residual(x: &[f64], u: &[f64], h: f64, rhs: &impl Fn(f64) -> f64, out: &mut [f64]) -> f64 {
    let mut worst = 0.0_f64;
    for i in 1..u.len() - 1 {
        let r = (u[i + 1] - 2.0 * u[i] + u[i - 1]) - u[i] * u[i] * (u[i + 1] - u[i - 1]) * h / 2.0 - h * h * rhs(x[i]);
        out[i - 1] = r;
        worst = worst.max(r.abs());
    }
    worst
}

/// Thomas algorithm; `lower[0]` and `upper[n - 1]` are ignored.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) -> Result<()> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    if beta == 0.0 {
        return Err(Error::numerical("bvp newton", "singular jacobian"));
    }
    rhs[0] /= beta;
    for i in 1..n {
        c[i - 1] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * c[i - 1];
        if beta == 0.0 {
            return Err(Error::numerical("bvp newton", "singular jacobian"));
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
    Ok(())
}

/// Damped Newton on the central-difference discretisation with `n` nodes.
pub fn solve_fd(x_a: f64, x_b: f64, n: usize, forcing_kind: Forcing) -> Result<GridSolution> {
    if n < 3 {
        return Err(Error::Invalid(format!("grid of {n} nodes")));
    }
    let rhs = |x: f64| match forcing_kind {
        Forcing::Standard => forcing(x),
        Forcing::Zero => 0.0,
    };
    let x = linspace(LO, HI, n);
    let h = (HI - LO) / (n - 1) as f64;
    let mut u: Vec<f64> = x.iter().map(|xi| x_a + (x_b - x_a) * (xi - LO) / (HI - LO)).collect();
    let m = n - 2;
    let mut r = vec![0.0; m];
    let mut trial_r = vec![0.0; m];
    let (mut lower, mut diag, mut upper) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut norm = residual(&x, &u, h, &rhs, &mut r);

    for it in 0..MAX_NEWTON {
        if norm < NEWTON_TOL {
            return Ok(GridSolution { x, u, residual: norm, iterations: it });
        }
        for k in 0..m {
            let i = k + 1;
            let ui = u[i];
            lower[k] = 1.0 + ui * ui * h / 2.0;
            diag[k] = -2.0 - ui * (u[i + 1] - u[i - 1]) * h;
            upper[k] = 1.0 - ui * ui * h / 2.0;
        }
        let mut step: Vec<f64> = r.iter().map(|v| -v).collect();
        solve_tridiagonal(&lower, &diag, &upper, &mut step)?;

        let mut lambda = 1.0;
        let mut trial = u.clone();
        loop {
            for k in 0..m {
                trial[k + 1] = u[k + 1] + lambda * step[k];
            }
            let t = residual(&x, &trial, h, &rhs, &mut trial_r);
            if t < norm || lambda < 1e-4 {
                u.copy_from_slice(&trial);
                std::mem::swap(&mut r, &mut trial_r);
                norm = t;
                break;
            }
            lambda *= 0.5;
        }
        if !norm.is_finite() {
            return Err(Error::numerical("bvp newton", format!("non-finite residual at iteration {it}")));
        }
    }
    if norm < NEWTON_TOL {
        return Ok(GridSolution { x, u, residual: norm, iterations: MAX_NEWTON });
    }
    Err(Error::numerical(
        "bvp newton",
        format!("no convergence after {MAX_NEWTON} iterations, residual {norm:.3e}"),
    ))
}

/// Solution on an `n`-node grid, Richardson-extrapolated from the
/// second-order scheme on `n` and `2n - 1` nodes (fourth-order accurate).
pub fn solve_with(x_a: f64, x_b: f64, grid_n: usize, forcing_kind: Forcing) -> Result<FunctionSample> {
    if grid_n < 50 {
        return Err(Error::Invalid(format!("grid_n = {grid_n}, need at least 50")));
    }
    let coarse = solve_fd(x_a, x_b, grid_n, forcing_kind)?;
    let fine = solve_fd(x_a, x_b, 2 * grid_n - 1, forcing_kind)?;
    let mut values: Vec<f64> = coarse.u.iter().enumerate().map(|(i, uc)| (4.0 * fine.u[2 * i] - uc) / 3.0).collect();
    values[0] = x_a;
    values[grid_n - 1] = x_b;
    FunctionSample::new(1, coarse.x, values)
}

pub fn solve_bvp(params: &BvpParams, grid_n: usize) -> Result<FunctionSample> {
    solve_with(params.x_a, params.x_b, grid_n, Forcing::Standard)
}

/// `m` parameter/solution pairs; sample `i` uses stream `i` of `seed` and is
/// observed at `n_points` distinct random nodes of a `grid_n` grid.
pub fn sample_bvp_dataset(m: usize, n_points: usize, grid_n: usize, seed: u64) -> Result<Vec<(BvpParams, FunctionSample)>> {
    (0..m).map(|i| sample_bvp_pair(i, n_points, grid_n, seed)).collect()
}

pub fn sample_bvp_pair(i: usize, n_points: usize, grid_n: usize, seed: u64) -> Result<(BvpParams, FunctionSample)> {
    let mut rng = rng::stream(seed, i as u64);
    let params = BvpParams::sample(&mut rng, seed);
    let full = solve_bvp(&params, grid_n).map_err(|e| match e {
        Error::Numerical { context, detail } => Error::numerical(context, format!("sample {i}: {detail}")),
        other => other,
    })?;
    let mut idx = sample_indices(&mut rng, grid_n, n_points.min(grid_n)).into_vec();
    idx.sort_unstable();
    Ok((params, full.select(&idx)))
}
