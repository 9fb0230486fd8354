//! Stochastic Lotka-Volterra system integrated by Euler-Maruyama.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use super::{linspace, FunctionSample};
use crate::rng::{self, Rng};
use crate::Result;

pub const THETA: [f64; 3] = [5.0, 0.035, 6.0];
pub const DT: f64 = 0.01;
pub const T_END: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LvParams {
    pub theta: [f64; 3],
    /// `(prey, predator)` at `t = 0`.
    pub x0: [f64; 2],
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
}

impl LvParams {
    pub fn new(x0: [f64; 2], seed: u64) -> Self {
        Self { theta: THETA, x0, dt: DT, t_end: T_END, seed }
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub prey: Vec<f64>,
    pub predator: Vec<f64>,
}

/// One path on the full time grid. With `diffusion = false` the Wiener
/// increments are dropped (test hook).
pub fn simulate_path(params: &LvParams, diffusion: bool, rng: &mut Rng) -> Trajectory {
    let [t1, t2, t3] = params.theta;
    let dt = params.dt;
    let sq = dt.sqrt();
    let n = params.steps();
    let (mut x1, mut x2) = (params.x0[0].max(0.0), params.x0[1].max(0.0));
    let mut prey = Vec::with_capacity(n + 1);
    let mut predator = Vec::with_capacity(n + 1);
    prey.push(x1);
    predator.push(x2);
    for _ in 0..n {
        let inter = t2 * x1 * x2;
        let mut d1 = (t1 * x1 - inter) * dt;
        let mut d2 = -(t3 * x2 - inter) * dt;
        if diffusion {
            let (w1, w2, w3) = (rng::normal(rng) * sq, rng::normal(rng) * sq, rng::normal(rng) * sq);
            let s1 = (t1 * x1).max(0.0).sqrt();
            let s2 = inter.max(0.0).sqrt();
            let s3 = (t3 * x2).max(0.0).sqrt();
            d1 += s1 * w1 - s2 * w2;
            d2 += -s3 * w3 + s2 * w2;
        }
        x1 = (x1 + d1).max(0.0);
        x2 = (x2 + d2).max(0.0);
        prey.push(x1);
        predator.push(x2);
    }
    Trajectory { t: linspace(0.0, params.t_end, n + 1), prey, predator }
}

impl Trajectory {
    pub fn prey_sample(&self) -> FunctionSample {
        FunctionSample::new(1, self.t.clone(), self.prey.clone()).expect("trajectory")
    }

    pub fn predator_sample(&self) -> FunctionSample {
        FunctionSample::new(1, self.t.clone(), self.predator.clone()).expect("trajectory")
    }
}

/// Path observed at `n_obs` distinct random grid times; returns `(prey, predator)`.
pub fn simulate_lv(params: &LvParams, n_obs: usize) -> Result<(FunctionSample, FunctionSample)> {
    let mut rng = rng::stream(params.seed, 0);
    let path = simulate_path(params, true, &mut rng);
    let mut idx = sample_indices(&mut rng, path.t.len(), n_obs.min(path.t.len())).into_vec();
    idx.sort_unstable();
    Ok((path.prey_sample().select(&idx), path.predator_sample().select(&idx)))
}

/// Initial condition `x0 ~ U[10, 100]^2`.
pub fn sample_x0(rng: &mut Rng) -> [f64; 2] {
    use rand::Rng as _;
    [rng.random_range(10.0..100.0), rng.random_range(10.0..100.0)]
}
