//! Prior contrastive estimation of the expected information gain and its
//! reparametrised design gradient.

use gradcore::logsumexp;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

use super::BoundModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PceConfig {
    /// Outer draws.
    pub n: usize,
    /// Contrastive draws per outer draw.
    pub l: usize,
    pub sigma: f64,
}

impl PceConfig {
    pub fn new(sigma: f64) -> Self {
        Self { n: 50, l: 50, sigma }
    }

    /// Codes needed per estimate.
    pub fn sample_count(&self) -> usize {
        self.n * (self.l + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || !(self.sigma > 0.0) {
            return Err(Error::Invalid(format!("PCE needs N >= 1 and sigma > 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Standard normals `eps[n][d][c]` reused for every design of one
/// optimisation run.
pub fn crn_noise(n: usize, sensors: usize, channels: usize, seed: u64) -> Vec<f64> {
    rng::normals(&mut rng::stream(rng::derive(seed, "pce-noise"), 0), n * sensors * channels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PceResult {
    pub estimate: f64,
    /// Log-ratio of each outer draw.
    pub draws: Vec<f64>,
    /// `dU/dxi`, `[D, dx]` row-major; empty unless requested.
    pub grad: Vec<f64>,
}

/// PCE with the sample layout `codes[n * (L + 1) + l]` bound into `model`.
/// `y_n = f(xi, z_{n,0}) + sigma eps_n`, and draw `n` contributes
/// `ln p(y_n | z_{n,0}) - ln((1/(L+1)) sum_l p(y_n | z_{n,l}))`.
pub fn pce(model: &mut dyn BoundModel, xi: &[f64], cfg: &PceConfig, eps: &[f64], with_grad: bool) -> Result<PceResult> {
    cfg.validate()?;
    let dx = model.in_dim();
    let c = model.channels();
    if xi.is_empty() || xi.len() % dx != 0 {
        return Err(Error::Dimension(format!("design of {} coordinates in dimension {dx}", xi.len())));
    }
    let d = xi.len() / dx;
    let lp1 = cfg.l + 1;
    if model.codes() != cfg.sample_count() {
        return Err(Error::Dimension(format!("{} codes bound, PCE needs {}", model.codes(), cfg.sample_count())));
    }
    if eps.len() != cfg.n * d * c {
        return Err(Error::Dimension(format!("{} noise values for {} draws", eps.len(), cfg.n * d * c)));
    }
    let pred = model.predict(xi, with_grad)?;
    let dc = d * c;
    let var = cfg.sigma * cfg.sigma;
    let ln_l = (lp1 as f64).ln();
    let mut draws = Vec::with_capacity(cfg.n);
    let mut grad = if with_grad { vec![0.0; d * dx] } else { Vec::new() };
    let mut ell = vec![0.0; lp1];
    let mut y = vec![0.0; dc];
    for n in 0..cfg.n {
        let base = n * lp1;
        let f0 = &pred.values[base * dc..(base + 1) * dc];
        for k in 0..dc {
            y[k] = f0[k] + cfg.sigma * eps[n * dc + k];
        }
        for (l, e) in ell.iter_mut().enumerate() {
            let f = &pred.values[(base + l) * dc..(base + l + 1) * dc];
            *e = -0.5 * y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / var;
        }
        let lse = logsumexp(&ell);
        // The l = 0 term is part of the sum, so ell[0] <= lse up to rounding.
        draws.push((ell[0] - lse).min(0.0) + ln_l);
        if with_grad {
            let g0 = &pred.grads[base * dc * dx..(base + 1) * dc * dx];
            for (l, e) in ell.iter().enumerate().skip(1) {
                let w = (e - lse).exp();
                if w == 0.0 {
                    continue;
                }
                let f = &pred.values[(base + l) * dc..(base + l + 1) * dc];
                let gl = &pred.grads[(base + l) * dc * dx..(base + l + 1) * dc * dx];
                for s in 0..d {
                    for ch in 0..c {
                        let k = s * c + ch;
                        let r = w * (y[k] - f[k]) / var;
                        for j in 0..dx {
                            grad[s * dx + j] += r * (g0[k * dx + j] - gl[k * dx + j]);
                        }
                    }
                }
            }
        }
    }
    let estimate = draws.iter().sum::<f64>() / cfg.n as f64;
    if with_grad {
        for g in grad.iter_mut() {
            *g /= cfg.n as f64;
        }
    }
    Ok(PceResult { estimate, draws, grad })
}
