//! Multi-restart Adam ascent of the PCE utility over sensor coordinates.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::optim::Adam;
use crate::rng;
use crate::simulate::{halton, Domain};
use crate::{Error, Result};

use super::pce::{crn_noise, pce, PceConfig};
use super::ObservationModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub lr: f64,
    pub iterations: usize,
    pub restarts: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self { lr: 5e-2, iterations: 200, restarts: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    /// Flat coordinates of the chosen sensors.
    pub xi: Vec<f64>,
    /// Utility estimate at `xi`; NaN (JSON null) when not estimated.
    #[serde(deserialize_with = "nan_from_null")]
    pub utility: f64,
    /// False when the chosen restart did not end above its starting utility.
    pub improved: bool,
    pub restart: usize,
    pub failed_restarts: usize,
}

fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Starting designs: Halton points of the product domain `Omega^D`, or
/// uniform draws when that has more dimensions than the sequence supports.
pub fn initial_designs(domain: &Domain, sensors: usize, restarts: usize, seed: u64) -> Vec<Vec<f64>> {
    let dx = domain.dim();
    let lo: Vec<f64> = (0..sensors).flat_map(|_| domain.lo.iter().copied()).collect();
    let hi: Vec<f64> = (0..sensors).flat_map(|_| domain.hi.iter().copied()).collect();
    let product = Domain::new(lo, hi);
    if sensors * dx <= halton::BASES.len() {
        return halton::halton_sequence(restarts, &product).chunks_exact(sensors * dx).map(<[f64]>::to_vec).collect();
    }
    let mut r = rng::stream(rng::derive(seed, "design-init"), 0);
    (0..restarts)
        .map(|_| product.lo.iter().zip(&product.hi).map(|(l, h)| r.random_range(*l..=*h)).collect())
        .collect()
}

/// Jointly places `sensors` new sensors by ascending the PCE utility over
/// the fixed code set `samples` (`N (L + 1)` codes, common random numbers
/// throughout). Iterates are clamped into the domain after every step.
pub fn optimize_batch(
    model: &dyn ObservationModel,
    samples: &[Vec<f64>],
    sensors: usize,
    cfg: &PceConfig,
    opt: &OptConfig,
    seed: u64,
) -> Result<BatchResult> {
    if sensors == 0 || opt.restarts == 0 {
        return Err(Error::Invalid("need at least one sensor and one restart".into()));
    }
    let domain = model.domain().clone();
    let dx = domain.dim();
    let mut bound = model.bind(samples)?;
    let eps = crn_noise(cfg.n, sensors, bound.channels(), seed);
    let mut best: Option<BatchResult> = None;
    let mut failed = 0;
    let mut diagnostics = Vec::new();
    for (r, init) in initial_designs(&domain, sensors, opt.restarts, seed).into_iter().enumerate() {
        let attempt = (|| -> Result<(Vec<f64>, f64, f64)> {
            let mut xi = init;
            let start = pce(bound.as_mut(), &xi, cfg, &eps, false)?.estimate;
            let mut adam = Adam::new(opt.lr, &[xi.len()]);
            for _ in 0..opt.iterations {
                let res = pce(bound.as_mut(), &xi, cfg, &eps, true)?;
                if !res.estimate.is_finite() || res.grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::numerical("design ascent", "non-finite utility or gradient"));
                }
                let ascent: Vec<f64> = res.grad.iter().map(|g| -g).collect();
                adam.tick();
                adam.update(0, &mut xi, &ascent);
                for s in xi.chunks_exact_mut(dx) {
                    domain.clamp(s);
                }
            }
            let end = pce(bound.as_mut(), &xi, cfg, &eps, false)?.estimate;
            if !end.is_finite() {
                return Err(Error::numerical("design ascent", "non-finite final utility"));
            }
            Ok((xi, start, end))
        })();
        match attempt {
            Ok((xi, start, end)) => {
                if best.as_ref().is_none_or(|b| end > b.utility) {
                    best = Some(BatchResult { xi, utility: end, improved: end > start, restart: r, failed_restarts: 0 });
                }
            }
            Err(e) => {
                failed += 1;
                diagnostics.push(format!("restart {r}: {e}"));
            }
        }
    }
    match best {
        Some(mut b) => {
            b.failed_restarts = failed;
            Ok(b)
        }
        None => Err(Error::numerical("design ascent", format!("every restart failed: {}", diagnostics.join("; ")))),
    }
}
