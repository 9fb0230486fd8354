//! Langevin sampling of latent codes given sparse noisy observations.

use std::path::Path;
use std::sync::Arc;

use gradcore::{NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::simulate::FunctionSample;
use crate::surrogate::{Channel, Surrogate};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgldConfig {
    pub steps: usize,
    pub chains: usize,
    /// Step size `eps_k = eps0 (k0 + k)^(-gamma)`.
    pub eps0: f64,
    pub k0: f64,
    pub gamma: f64,
    /// Fraction of each chain discarded as burn-in.
    pub burn_in: f64,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self { steps: 1000, chains: 2, eps0: 1e-3, k0: 100.0, gamma: 0.55, burn_in: 0.5 }
    }
}

impl SgldConfig {
    pub fn step_size(&self, k: usize) -> f64 {
        self.eps0 * (self.k0 + k as f64).powf(-self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 >= 0.0) || !(self.gamma > 0.5 && self.gamma <= 1.0) || !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::Invalid(format!("invalid SGLD configuration {self:?}")));
        }
        if self.steps == 0 || self.chains == 0 {
            return Err(Error::Invalid("SGLD needs at least one step and one chain".into()));
        }
        Ok(())
    }
}

/// Unnormalised log density evaluated on `rows` stacked points.
pub trait LogDensity {
    fn dim(&self) -> usize;
    /// Sum of the log densities of the rows of `z` and the gradient of that
    /// sum (row-major, so row `r` holds the gradient of row `r`'s density).
    fn eval(&mut self, z: &[f64], rows: usize) -> Result<(f64, Vec<f64>)>;
}

/// Adapter for closures evaluating a single point.
pub struct PointDensity<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> LogDensity for PointDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&mut self, z: &[f64], rows: usize) -> Result<(f64, Vec<f64>)> {
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(z.len());
        for r in 0..rows {
            let (v, g) = (self.f)(&z[r * self.dim..(r + 1) * self.dim])?;
            total += v;
            grad.extend(g);
        }
        Ok((total, grad))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    /// Post-burn-in iterates.
    pub samples: Vec<Vec<f64>>,
    pub last: Vec<f64>,
    /// False once the chain hit a non-finite value; it is then frozen.
    pub alive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgldOutput {
    pub chains: Vec<Chain>,
}

impl SgldOutput {
    /// Post-burn-in iterates of the surviving chains, chain by chain.
    pub fn pooled(&self) -> Vec<Vec<f64>> {
        self.chains.iter().filter(|c| c.alive).flat_map(|c| c.samples.iter().cloned()).collect()
    }

    pub fn last_iterates(&self) -> Vec<Vec<f64>> {
        self.chains.iter().filter(|c| c.alive).map(|c| c.last.clone()).collect()
    }

    pub fn survivors(&self) -> usize {
        self.chains.iter().filter(|c| c.alive).count()
    }
}

fn finite_rows(grad: &[f64], dim: usize) -> Vec<bool> {
    grad.chunks_exact(dim).map(|g| g.iter().all(|v| v.is_finite())).collect()
}

/// Gradients per chain; chains whose density cannot be evaluated get `None`.
fn eval_chains(density: &mut impl LogDensity, state: &[Vec<f64>], alive: &[bool]) -> Vec<Option<Vec<f64>>> {
    let dim = density.dim();
    let idx: Vec<usize> = (0..state.len()).filter(|&c| alive[c]).collect();
    let flat: Vec<f64> = idx.iter().flat_map(|&c| state[c].iter().copied()).collect();
    let mut out = vec![None; state.len()];
    if let Ok((_, g)) = density.eval(&flat, idx.len()) {
        let ok = finite_rows(&g, dim);
        if ok.iter().all(|b| *b) {
            for (k, &c) in idx.iter().enumerate() {
                out[c] = Some(g[k * dim..(k + 1) * dim].to_vec());
            }
            return out;
        }
    }
    // Isolate the failing chains one at a time.
    for &c in &idx {
        if let Ok((v, g)) = density.eval(&state[c], 1) {
            if v.is_finite() && g.iter().all(|x| x.is_finite()) {
                out[c] = Some(g);
            }
        }
    }
    out
}

/// `z_{k+1} = z_k + (eps_k / 2) grad log p(z_k) + sqrt(eps_k) eta_k` for every
/// chain in `init`; chain `c` draws its noise from stream `c` of `seed`.
pub fn sgld(density: &mut impl LogDensity, init: &[Vec<f64>], cfg: &SgldConfig, seed: u64) -> Result<SgldOutput> {
    cfg.validate()?;
    let dim = density.dim();
    if init.is_empty() || init.iter().any(|z| z.len() != dim) {
        return Err(Error::Dimension(format!("SGLD needs initial states of dimension {dim}")));
    }
    let n = init.len();
    let mut state: Vec<Vec<f64>> = init.to_vec();
    let mut alive = vec![true; n];
    let mut rngs: Vec<_> = (0..n).map(|c| rng::stream(seed, c as u64)).collect();
    let mut samples = vec![Vec::new(); n];
    let burn = (cfg.burn_in * cfg.steps as f64).floor() as usize;

    for k in 0..cfg.steps {
        let grads = eval_chains(density, &state, &alive);
        if k == 0 && grads.iter().any(Option::is_none) {
            return Err(Error::numerical("sgld", "log density not finite at the initial state"));
        }
        let eps = cfg.step_size(k);
        let sq = eps.sqrt();
        for c in 0..n {
            if !alive[c] {
                continue;
            }
            let Some(g) = &grads[c] else {
                alive[c] = false;
                log::warn!("sgld chain {c} terminated at step {k}: non-finite density");
                continue;
            };
            let next: Vec<f64> =
                state[c].iter().zip(g).map(|(z, gi)| z + 0.5 * eps * gi + sq * rng::normal(&mut rngs[c])).collect();
            if next.iter().any(|v| !v.is_finite()) {
                alive[c] = false;
                log::warn!("sgld chain {c} terminated at step {k}: non-finite iterate");
                continue;
            }
            state[c] = next;
            if k + 1 > burn {
                samples[c].push(state[c].clone());
            }
        }
        if !alive.iter().any(|a| *a) {
            return Err(Error::numerical("sgld", format!("every chain diverged by step {k}")));
        }
    }
    let chains = (0..n)
        .map(|c| Chain { samples: std::mem::take(&mut samples[c]), last: state[c].clone(), alive: alive[c] })
        .collect();
    Ok(SgldOutput { chains })
}

/// Last iterates of `n` independent chains started from standard normals.
pub fn sample_independent(density: &mut impl LogDensity, n: usize, cfg: &SgldConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    let dim = density.dim();
    let mut init_rng = rng::stream(rng::derive(seed, "independent-init"), 0);
    let init: Vec<Vec<f64>> = (0..n).map(|_| rng::normals(&mut init_rng, dim)).collect();
    let cfg = SgldConfig { chains: n, ..cfg.clone() };
    let out = sgld(density, &init, &cfg, rng::derive(seed, "independent-sgld"))?;
    Ok(out.last_iterates())
}

/// Noisy point observations of one function of the pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub channel: Channel,
    /// Flat coordinates.
    pub points: Vec<f64>,
    pub values: Vec<f64>,
    pub sigma: f64,
}

impl ObservationSet {
    pub fn new(channel: Channel, points: Vec<f64>, values: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Invalid(format!("observation noise must be positive, got {sigma}")));
        }
        Ok(Self { channel, points, values, sigma })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn push(&mut self, point: &[f64], value: f64) {
        self.points.extend_from_slice(point);
        self.values.push(value);
    }
}

/// `sum_j ln N(y_j; g(xi_j, z), sigma^2) - E(z)` in standardised code space,
/// batched over chains.
pub struct PosteriorDensity<'a> {
    surrogate: &'a Surrogate,
    obs: &'a [ObservationSet],
    graph: Option<(usize, Tape, NodeId)>,
}

impl<'a> PosteriorDensity<'a> {
    pub fn new(surrogate: &'a Surrogate, obs: &'a [ObservationSet]) -> Result<Self> {
        for o in obs {
            let inr = surrogate.decoder(o.channel)?;
            if o.points.len() != o.values.len() * inr.arch.in_dim {
                return Err(Error::Dimension("observation points and values disagree".into()));
            }
            inr.domain.check_points(&o.points)?;
        }
        Ok(Self { surrogate, obs, graph: None })
    }

    fn build(&self, rows: usize) -> Result<(Tape, NodeId)> {
        let s = self.surrogate;
        let dim = s.dim();
        let mut tape = Tape::new();
        let ebm_params = s.ebm.declare_params(&mut tape, false);
        let z = tape.input(&[rows, dim]);
        let std = tape.literal(Tensor::matrix(1, dim, s.stats.std.clone()));
        let mean = tape.literal(Tensor::matrix(1, dim, s.stats.mean.clone()));
        let std = tape.tile_rows(std, rows)?;
        let mean = tape.tile_rows(mean, rows)?;
        let raw = tape.mul(z, std)?;
        let raw = tape.add(raw, mean)?;
        let mut ll: Option<NodeId> = None;
        for o in self.obs.iter().filter(|o| !o.is_empty()) {
            let inr = s.decoder(o.channel)?;
            let j = o.len();
            let params: Vec<NodeId> =
                inr.params.iter().map(|p| tape.literal(p.as_ref().clone())).collect();
            let (start, len) = s.slice(o.channel);
            let codes = tape.slice_cols(raw, start, len)?;
            let x = tape.literal(Tensor::matrix(j, inr.arch.in_dim, o.points.clone()));
            let x = tape.tile_rows(x, rows)?;
            let y = tape.literal(Tensor::matrix(j, 1, o.values.clone()));
            let y = tape.tile_rows(y, rows)?;
            let (_, value) = inr.build(&mut tape, &params, x, codes, &vec![j; rows])?;
            let term = tape.gaussian_logpdf(value, y, o.sigma * o.sigma)?;
            ll = Some(match ll {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let e = s.ebm.build(&mut tape, &ebm_params, z)?;
        let e = tape.sum(e);
        let bias = rows as f64 * s.ebm.head_bias();
        match ll {
            Some(ll) => {
                let d = tape.sub(ll, e)?;
                tape.scale_shift(d, 1.0, -bias);
            }
            None => {
                tape.scale_shift(e, -1.0, -bias);
            }
        }
        Ok((tape, z))
    }
}

impl LogDensity for PosteriorDensity<'_> {
    fn dim(&self) -> usize {
        self.surrogate.dim()
    }

    fn eval(&mut self, z: &[f64], rows: usize) -> Result<(f64, Vec<f64>)> {
        if !matches!(&self.graph, Some((r, ..)) if *r == rows) {
            let (tape, zn) = self.build(rows)?;
            self.graph = Some((rows, tape, zn));
        }
        let dim = self.dim();
        let (_, tape, zn) = self.graph.as_mut().expect("built");
        let inputs =
            self.surrogate.ebm.params.iter().cloned().chain([Arc::new(Tensor::matrix(rows, dim, z.to_vec()))]);
        let v = tape.forward(inputs)?.item();
        let g = tape.backward(1.0)?;
        Ok((v, g.wrt(*zn).expect("tracked").data().to_vec()))
    }
}

/// Unnormalised posterior log density at the standardised joint code `z`
/// and its gradient.
pub fn posterior_logdensity(surrogate: &Surrogate, obs: &[ObservationSet], z: &[f64]) -> Result<(f64, Vec<f64>)> {
    if z.len() != surrogate.dim() {
        return Err(Error::Dimension(format!("code of length {} for joint dim {}", z.len(), surrogate.dim())));
    }
    PosteriorDensity::new(surrogate, obs)?.eval(z, 1)
}

/// Runs `cfg.chains` chains from standard-normal starts and returns `n`
/// codes taken at evenly spaced positions of the pooled post-burn-in
/// iterates.
pub fn posterior_pool(
    surrogate: &Surrogate,
    obs: &[ObservationSet],
    n: usize,
    cfg: &SgldConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let dim = surrogate.dim();
    let mut init_rng = rng::stream(rng::derive(seed, "posterior-init"), 0);
    let init: Vec<Vec<f64>> = (0..cfg.chains).map(|_| rng::normals(&mut init_rng, dim)).collect();
    let mut density = PosteriorDensity::new(surrogate, obs)?;
    let out = sgld(&mut density, &init, cfg, rng::derive(seed, "posterior-sgld"))?;
    let pooled = out.pooled();
    if pooled.is_empty() {
        return Err(Error::numerical("posterior", "no post-burn-in iterates"));
    }
    Ok(thin(&pooled, n))
}

/// `n` items at evenly spaced positions (wrapping around when `n` exceeds
/// the pool).
pub fn thin(pool: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let p = pool.len();
    (0..n).map(|i| pool[(i * p / n.max(1)) % p].clone()).collect()
}

/// Pointwise average of the decoded functions of standardised joint codes.
pub fn posterior_mean_function(
    surrogate: &Surrogate,
    channel: Channel,
    samples: &[Vec<f64>],
    query: &[f64],
) -> Result<FunctionSample> {
    if samples.is_empty() {
        return Err(Error::Invalid("posterior mean of no samples".into()));
    }
    let inr = surrogate.decoder(channel)?;
    let (start, len) = surrogate.slice(channel);
    let codes: Vec<Vec<f64>> =
        samples.iter().map(|z| surrogate.stats.unstandardize(z)[start..start + len].to_vec()).collect();
    let n = query.len() / inr.arch.in_dim;
    let v = inr.decode_many(&codes, query)?;
    let mut mean = vec![0.0; n];
    for row in v.chunks_exact(n) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let k = codes.len() as f64;
    FunctionSample::new(inr.arch.in_dim, query.to_vec(), mean.into_iter().map(|m| m / k).collect())
}

pub fn write_samples_csv(path: &Path, samples: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(first) = samples.first() {
        w.write_record((0..first.len()).map(|k| format!("z{k}")))?;
    }
    for s in samples {
        w.write_record(s.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::MissingArtifact { path: path.display().to_string(), detail: e.to_string() })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Invalid(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian() -> PointDensity<impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> {
        PointDensity { dim: 2, f: |z: &[f64]| Ok((-0.5 * z.iter().map(|v| v * v).sum::<f64>(), z.iter().map(|v| -v).collect())) }
    }

    #[test]
    fn zero_step_keeps_chains_still() {
        let cfg = SgldConfig { eps0: 0.0, steps: 20, ..SgldConfig::default() };
        let init = vec![vec![0.3, -1.0], vec![2.0, 0.5]];
        let out = sgld(&mut gaussian(), &init, &cfg, 1).unwrap();
        for (c, z0) in out.chains.iter().zip(&init) {
            assert!(c.samples.iter().all(|s| s == z0));
        }
    }

    #[test]
    fn fixed_seed_gives_identical_chains() {
        let cfg = SgldConfig { eps0: 0.1, steps: 50, ..SgldConfig::default() };
        let init = vec![vec![0.0, 0.0]; 2];
        let a = sgld(&mut gaussian(), &init, &cfg, 9).unwrap();
        let b = sgld(&mut gaussian(), &init, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.chains[0].samples, a.chains[1].samples);
    }

    #[test]
    fn diverging_chain_is_flagged() {
        // Finite only inside |z| < 3; the chain started outside dies at once.
        let mut d = PointDensity {
            dim: 1,
            f: |z: &[f64]| if z[0].abs() < 3.0 { Ok((0.0, vec![-z[0]])) } else { Ok((f64::NAN, vec![f64::NAN])) },
        };
        let cfg = SgldConfig { eps0: 1e-3, steps: 10, ..SgldConfig::default() };
        assert!(sgld(&mut d, &[vec![5.0]], &cfg, 0).is_err());
        let mut d = PointDensity {
            dim: 1,
            f: |z: &[f64]| if z[0] < 1.5 { Ok((-0.5 * z[0] * z[0], vec![-z[0]])) } else { Ok((f64::NAN, vec![f64::NAN])) },
        };
        let cfg = SgldConfig { eps0: 1.0, steps: 200, ..SgldConfig::default() };
        let out = sgld(&mut d, &vec![vec![0.0]; 8], &cfg, 4).unwrap();
        assert!(out.survivors() > 0 && out.survivors() < 8, "{}", out.survivors());
        for c in out.chains.iter().filter(|c| !c.alive) {
            assert!(c.last[0] >= 1.5);
        }
    }

    #[test]
    fn thinning_spreads_over_pool() {
        let pool: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        assert_eq!(thin(&pool, 5), vec![vec![0.0], vec![2.0], vec![4.0], vec![6.0], vec![8.0]]);
        assert_eq!(thin(&pool, 12).len(), 12);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = std::env::temp_dir().join(format!("couplings-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.csv");
        let s = vec![vec![0.1, -2.5e-7], vec![3.0, 1.0 / 3.0]];
        write_samples_csv(&path, &s).unwrap();
        assert_eq!(read_samples_csv(&path).unwrap(), s);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
