//! Sequential placement: sample the current posterior, place the next
//! sensors against it, observe, repeat.

use serde::{Deserialize, Serialize};

use crate::posterior::{posterior_pool, ObservationSet, SgldConfig};
use crate::rng;
use crate::simulate::{observe, Interpolant};
use crate::surrogate::{Channel, Surrogate};
use crate::{Error, Result};

use super::optimize::{optimize_batch, BatchResult, OptConfig};
use super::pce::PceConfig;
use super::SurrogateModel;

/// Ground truth of every observed channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub channels: Vec<(Channel, Interpolant)>,
}

impl Truth {
    pub fn channel_list(&self) -> Vec<Channel> {
        self.channels.iter().map(|(c, _)| *c).collect()
    }

    /// Noisy readings `[sensors, channels]` at the flat design `xi`.
    pub fn observe(&self, xi: &[f64], sigma: f64, rng: &mut rng::Rng) -> Result<Vec<f64>> {
        let per: Vec<Vec<f64>> =
            self.channels.iter().map(|(_, t)| observe(t, xi, sigma, rng)).collect::<Result<_>>()?;
        let d = per.first().map_or(0, Vec::len);
        Ok((0..d).flat_map(|s| per.iter().map(move |v| v[s])).collect())
    }
}

/// Designs and readings in the order they were taken.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub channels: Vec<Channel>,
    /// `(xi, y)` per step; `y` is `[sensors, channels]`.
    pub steps: Vec<(Vec<f64>, Vec<f64>)>,
}

impl History {
    pub fn new(channels: Vec<Channel>) -> Self {
        Self { channels, steps: Vec::new() }
    }

    pub fn sensors(&self, in_dim: usize) -> usize {
        self.steps.iter().map(|(xi, _)| xi.len() / in_dim).sum()
    }

    pub fn push(&mut self, xi: Vec<f64>, y: Vec<f64>) {
        self.steps.push((xi, y));
    }

    /// One observation set per channel.
    pub fn observation_sets(&self, sigma: f64) -> Result<Vec<ObservationSet>> {
        let c = self.channels.len();
        let mut sets: Vec<ObservationSet> = self
            .channels
            .iter()
            .map(|&ch| ObservationSet::new(ch, Vec::new(), Vec::new(), sigma))
            .collect::<Result<_>>()?;
        for (xi, y) in &self.steps {
            if c == 0 || y.len() % c != 0 {
                return Err(Error::Dimension("history readings do not match its channels".into()));
            }
            let d = y.len() / c;
            let dx = xi.len() / d.max(1);
            for s in 0..d {
                for (k, set) in sets.iter_mut().enumerate() {
                    set.push(&xi[s * dx..(s + 1) * dx], y[s * c + k]);
                }
            }
        }
        Ok(sets)
    }
}

/// The `N (L + 1)` codes used by the utility: post-burn-in draws from the
/// posterior given `obs` (the prior when `obs` is empty).
pub fn design_samples(
    surrogate: &Surrogate,
    obs: &[ObservationSet],
    pce: &PceConfig,
    sgld: &SgldConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    posterior_pool(surrogate, obs, pce.sample_count(), sgld, rng::derive(seed, "design-samples"))
}

/// Places `sensors` new sensors given the history: samples
/// `p(z | history)`, then runs [`optimize_batch`] with those samples.
pub fn adaptive_step(
    model: &SurrogateModel,
    history: &History,
    sensors: usize,
    pce: &PceConfig,
    opt: &OptConfig,
    sgld: &SgldConfig,
    seed: u64,
) -> Result<BatchResult> {
    let obs = history.observation_sets(pce.sigma)?;
    let samples = design_samples(model.surrogate, &obs, pce, sgld, seed)?;
    optimize_batch(model, &samples, sensors, pce, opt, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveRun {
    pub history: History,
    /// The placement of each step.
    pub placements: Vec<BatchResult>,
    /// Posterior codes after each step.
    pub snapshots: Vec<Vec<Vec<f64>>>,
}

/// Seed of step `t` of a loop seeded with `seed`.
pub fn step_seed(seed: u64, t: usize) -> u64 {
    rng::derive(seed, &format!("adaptive-step-{t}"))
}

/// `steps` rounds of placement and observation starting from `history`.
/// `first` may carry a precomputed placement for an empty starting history
/// (it is the same for every truth). After each round `snapshot` posterior
/// codes are recorded (none when `snapshot` is 0).
#[allow(clippy::too_many_arguments)]
pub fn adaptive_loop(
    truth: &Truth,
    model: &SurrogateModel,
    mut history: History,
    steps: usize,
    per_step: usize,
    pce: &PceConfig,
    opt: &OptConfig,
    sgld: &SgldConfig,
    snapshot: usize,
    first: Option<&BatchResult>,
    seed: u64,
) -> Result<AdaptiveRun> {
    if steps == 0 {
        return Err(Error::Invalid("adaptive loop needs at least one step".into()));
    }
    if history.channels != truth.channel_list() || model.channels != history.channels {
        return Err(Error::Invalid("truth, model and history must observe the same channels".into()));
    }
    let mut noise = rng::stream(rng::derive(seed, "adaptive-noise"), 0);
    let mut placements = Vec::with_capacity(steps);
    let mut snapshots = Vec::with_capacity(steps);
    for t in 0..steps {
        let placed = match first {
            Some(p) if history.steps.is_empty() => p.clone(),
            _ => adaptive_step(model, &history, per_step, pce, opt, sgld, step_seed(seed, t))?,
        };
        let y = truth.observe(&placed.xi, pce.sigma, &mut noise)?;
        history.push(placed.xi.clone(), y);
        placements.push(placed);
        if snapshot > 0 {
            let obs = history.observation_sets(pce.sigma)?;
            let tag = format!("snapshot-{t}");
            snapshots.push(posterior_pool(model.surrogate, &obs, snapshot, sgld, rng::derive(seed, &tag))?);
        }
    }
    Ok(AdaptiveRun { history, placements, snapshots })
}
