//! Modulated SIREN: hidden layers `sin(w0 (W h + b + beta_l(z)))`, where the
//! per-layer shifts `beta` come from a one-hidden-layer ReLU hypernetwork of
//! the latent code `z`.

use std::sync::Arc;

use gradcore::{NodeId, Tape, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::optim::Adam;
use crate::rng::{self, Rng};
use crate::simulate::{Domain, FunctionSample};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InrArch {
    pub in_dim: usize,
    pub latent_dim: usize,
    pub width: usize,
    /// Number of modulated sine layers.
    pub depth: usize,
    pub hyper_width: usize,
    pub omega0: f64,
}

impl InrArch {
    pub fn shift_dim(&self) -> usize {
        self.depth * self.width
    }

    /// Shapes of the parameter tensors, in storage order: sine layers
    /// `(W, b)`, output layer, hypernetwork `(H1, c1, H2, c2)`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = self.in_dim;
        for _ in 0..self.depth {
            shapes.push(vec![self.width, fan_in]);
            shapes.push(vec![self.width]);
            fan_in = self.width;
        }
        shapes.push(vec![1, self.width]);
        shapes.push(vec![1]);
        shapes.push(vec![self.hyper_width, self.latent_dim]);
        shapes.push(vec![self.hyper_width]);
        shapes.push(vec![self.shift_dim(), self.hyper_width]);
        shapes.push(vec![self.shift_dim()]);
        shapes
    }

    /// Index of the first hypernetwork tensor.
    pub fn hyper_offset(&self) -> usize {
        2 * self.depth + 2
    }
}

/// Per-coordinate standardisation of a code set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Coordinates whose spread was below the floor.
    pub degenerate: Vec<bool>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl CodeStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim], degenerate: vec![false; dim] }
    }

    pub fn fit(codes: &[Vec<f64>]) -> Result<Self> {
        if codes.len() < 2 {
            return Err(Error::Invalid(format!("{} codes, need at least 2 for statistics", codes.len())));
        }
        let d = codes[0].len();
        if codes.iter().any(|c| c.len() != d) {
            return Err(Error::Dimension("codes of differing length".into()));
        }
        let n = codes.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| codes.iter().map(|c| c[k]).sum::<f64>() / n).collect();
        let raw: Vec<f64> =
            (0..d).map(|k| (codes.iter().map(|c| (c[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt()).collect();
        let degenerate: Vec<bool> = raw.iter().map(|s| !(*s > STD_FLOOR)).collect();
        let std = raw.iter().map(|s| s.max(STD_FLOOR)).collect();
        Ok(Self { mean, std, degenerate })
    }

    pub fn standardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn unstandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| m + s * v).collect()
    }
}

/// Standardises a code set; returns the standardised codes and the statistics.
pub fn standardize_codes(codes: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, CodeStats)> {
    let stats = CodeStats::fit(codes)?;
    let out = codes.iter().map(|c| stats.standardize(c)).collect();
    Ok((out, stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inr {
    pub arch: InrArch,
    pub domain: Domain,
    /// Output is `value_scale * net + value_shift`.
    pub value_shift: f64,
    pub value_scale: f64,
    pub params: Vec<Arc<Tensor>>,
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 }).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl Inr {
    /// SIREN initialisation: first layer `U(-1/d, 1/d)`, later layers
    /// `U(-sqrt(6/d)/w0, sqrt(6/d)/w0)`; hypernetwork with fan-in scaling and
    /// zero output bias.
    pub fn init(arch: InrArch, domain: Domain, seed: u64) -> Result<Self> {
        if domain.dim() != arch.in_dim {
            return Err(Error::Dimension(format!("domain dim {} vs input dim {}", domain.dim(), arch.in_dim)));
        }
        let mut rng = rng::stream(rng::derive(seed, "inr-init"), 0);
        let shapes = arch.param_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        for l in 0..arch.depth {
            let fan_in = shapes[2 * l][1] as f64;
            let bound = if l == 0 { 1.0 / fan_in } else { (6.0 / fan_in).sqrt() / arch.omega0 };
            params.push(uniform(&mut rng, &shapes[2 * l], bound));
            params.push(uniform(&mut rng, &shapes[2 * l + 1], 1.0 / fan_in.sqrt()));
        }
        let w = arch.width as f64;
        params.push(uniform(&mut rng, &[1, arch.width], (6.0 / w).sqrt() / arch.omega0));
        params.push(Tensor::zeros(&[1]));
        let ld = arch.latent_dim as f64;
        let hw = arch.hyper_width as f64;
        params.push(uniform(&mut rng, &shapes[arch.hyper_offset()], 1.0 / ld.sqrt()));
        params.push(uniform(&mut rng, &shapes[arch.hyper_offset() + 1], 1.0 / ld.sqrt()));
        params.push(uniform(&mut rng, &shapes[arch.hyper_offset() + 2], 1.0 / hw.sqrt()));
        params.push(Tensor::zeros(&shapes[arch.hyper_offset() + 3]));
        Ok(Self { arch, domain, value_shift: 0.0, value_scale: 1.0, params: params.into_iter().map(Arc::new).collect() })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Declares the parameter leaves on `tape` (tracked or not).
    pub fn declare_params(&self, tape: &mut Tape, tracked: bool) -> Vec<NodeId> {
        self.arch
            .param_shapes()
            .iter()
            .map(|s| if tracked { tape.input(s) } else { tape.data(s) })
            .collect()
    }

    /// Builds the decoder on `tape`. `x` is `[rows, in_dim]`, `z` is
    /// `[codes, latent_dim]`, and code `c` owns `counts[c]` consecutive rows.
    /// Returns `(net, value)` nodes, both `[rows, 1]`; `net` is the output
    /// before the value scaling.
    pub fn build(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        x: NodeId,
        z: NodeId,
        counts: &[usize],
    ) -> Result<(NodeId, NodeId)> {
        let beta = self.build_shifts(tape, params, z)?;
        self.build_with_shifts(tape, params, x, beta, counts)
    }

    /// Hypernetwork: `[codes, latent_dim] -> [codes, depth * width]`.
    pub fn build_shifts(&self, tape: &mut Tape, params: &[NodeId], z: NodeId) -> Result<NodeId> {
        let h = self.arch.hyper_offset();
        let a = tape.affine(z, params[h], Some(params[h + 1]))?;
        let a = tape.relu(a);
        Ok(tape.affine(a, params[h + 2], Some(params[h + 3]))?)
    }

    /// Sine layers driven by precomputed shifts `beta` (`[codes, depth * width]`).
    pub fn build_with_shifts(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        x: NodeId,
        beta: NodeId,
        counts: &[usize],
    ) -> Result<(NodeId, NodeId)> {
        let arch = &self.arch;
        let d = arch.in_dim;
        let mut scale = vec![0.0; d * d];
        let mut offset = vec![0.0; d];
        for k in 0..d {
            let (lo, hi) = (self.domain.lo[k], self.domain.hi[k]);
            scale[k * d + k] = 2.0 / (hi - lo);
            offset[k] = -(hi + lo) / (hi - lo);
        }
        let sw = tape.literal(Tensor::matrix(d, d, scale));
        let sb = tape.literal(Tensor::vector(offset));
        let mut h = tape.affine(x, sw, Some(sb))?;
        for l in 0..arch.depth {
            let pre = tape.affine(h, params[2 * l], Some(params[2 * l + 1]))?;
            let b = tape.slice_cols(beta, l * arch.width, arch.width)?;
            let b = tape.repeat_rows(b, counts)?;
            let pre = tape.add(pre, b)?;
            h = tape.sin(pre, arch.omega0);
        }
        let o = 2 * arch.depth;
        let net = tape.affine(h, params[o], Some(params[o + 1]))?;
        let value = tape.scale_shift(net, self.value_scale, self.value_shift);
        Ok((net, value))
    }

    fn param_inputs(&self) -> impl Iterator<Item = Arc<Tensor>> + '_ {
        self.params.iter().cloned()
    }

    /// Decodes `codes` (each `latent_dim` long) at the flat points `x`, every
    /// code at every point. Returns `values[c * n + i]`.
    pub fn decode_many(&self, codes: &[Vec<f64>], x: &[f64]) -> Result<Vec<f64>> {
        let d = self.arch.in_dim;
        if x.len() % d != 0 {
            return Err(Error::Dimension(format!("{} coordinates for input dim {d}", x.len())));
        }
        let n = x.len() / d;
        let mut out = Vec::with_capacity(codes.len() * n);
        for chunk in codes.chunks(64) {
            let c = chunk.len();
            let mut tape = Tape::new();
            let params = self.declare_params(&mut tape, false);
            let zn = tape.data(&[c, self.latent_dim()]);
            let xn = tape.data(&[n, d]);
            let xt = tape.tile_rows(xn, c)?;
            let (_, value) = self.build(&mut tape, &params, xt, zn, &vec![n; c])?;
            let _ = value;
            let z = flatten_codes(chunk, self.latent_dim())?;
            let inputs = self.param_inputs().chain([Arc::new(Tensor::matrix(c, self.latent_dim(), z)), Arc::new(Tensor::matrix(n, d, x.to_vec()))]);
            let v = tape.forward(inputs)?;
            out.extend_from_slice(v.data());
        }
        Ok(out)
    }

    /// `g(x, z)` at the flat points `x`.
    pub fn decode(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.decode_many(&[z.to_vec()], x)
    }

    /// Value and gradients `(dg/dx, dg/dz)` at a single point.
    pub fn value_and_grads(&self, z: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let d = self.arch.in_dim;
        let mut tape = Tape::new();
        let params = self.declare_params(&mut tape, false);
        let zn = tape.input(&[1, self.latent_dim()]);
        let xn = tape.input(&[1, d]);
        let (_, value) = self.build(&mut tape, &params, xn, zn, &[1])?;
        tape.sum(value);
        let inputs = self.param_inputs().chain([
            Arc::new(Tensor::matrix(1, self.latent_dim(), z.to_vec())),
            Arc::new(Tensor::matrix(1, d, x.to_vec())),
        ]);
        let v = tape.forward(inputs)?.item();
        let g = tape.backward(1.0)?;
        Ok((v, g.wrt(xn).expect("tracked").data().to_vec(), g.wrt(zn).expect("tracked").data().to_vec()))
    }
}

pub(crate) fn flatten_codes(codes: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(codes.len() * dim);
    for c in codes {
        if c.len() != dim {
            return Err(Error::Dimension(format!("code of length {} for latent dim {dim}", c.len())));
        }
        out.extend_from_slice(c);
    }
    Ok(out)
}

/// Reconstruction graph over a batch of samples with equal point counts:
/// loss is `codes * mean((net - target)^2)`, i.e. the sum of per-sample mean
/// squared errors in normalised units.
struct LossGraph {
    tape: Tape,
    z: NodeId,
    codes: usize,
    points: usize,
}

impl LossGraph {
    fn new(inr: &Inr, codes: usize, points: usize, track_params: bool) -> Result<Self> {
        let mut tape = Tape::new();
        let params = inr.declare_params(&mut tape, track_params);
        let z = if track_params { tape.data(&[codes, inr.latent_dim()]) } else { tape.input(&[codes, inr.latent_dim()]) };
        let x = tape.data(&[codes * points, inr.arch.in_dim]);
        let target = tape.data(&[codes * points, 1]);
        let (net, _) = inr.build(&mut tape, &params, x, z, &vec![points; codes])?;
        let mse = tape.squared_error(net, target)?;
        tape.scale_shift(mse, codes as f64, 0.0);
        Ok(Self { tape, z, codes, points })
    }

    fn run(&mut self, inr: &Inr, z: &[f64], x: &Arc<Tensor>, target: &Arc<Tensor>) -> Result<(f64, gradcore::Gradients)> {
        let zt = Arc::new(Tensor::matrix(self.codes, inr.latent_dim(), z.to_vec()));
        let inputs = inr.params.iter().cloned().chain([zt, Arc::clone(x), Arc::clone(target)]);
        let loss = self.tape.forward(inputs)?.item();
        let g = self.tape.backward(1.0)?;
        Ok((loss, g))
    }
}

/// Stacked coordinates and normalised targets of equally sized samples.
fn batch_tensors(inr: &Inr, samples: &[&FunctionSample]) -> Result<(Arc<Tensor>, Arc<Tensor>, usize)> {
    let n = samples[0].len();
    let d = inr.arch.in_dim;
    if samples.iter().any(|s| s.len() != n || s.dim != d) {
        return Err(Error::Dimension("batch samples must share point count and dimension".into()));
    }
    let mut x = Vec::with_capacity(samples.len() * n * d);
    let mut t = Vec::with_capacity(samples.len() * n);
    for s in samples {
        x.extend_from_slice(&s.points);
        t.extend(s.values.iter().map(|v| (v - inr.value_shift) / inr.value_scale));
    }
    let rows = samples.len() * n;
    Ok((Arc::new(Tensor::matrix(rows, d, x)), Arc::new(Tensor::matrix(rows, 1, t)), n))
}

/// Inner loop on a batch: `steps` gradient-descent updates of every code from
/// zero. Returns the codes row-major.
fn inner_loop(inr: &Inr, graph: &mut LossGraph, x: &Arc<Tensor>, t: &Arc<Tensor>, steps: usize, lr: f64) -> Result<Vec<f64>> {
    let mut z = vec![0.0; graph.codes * inr.latent_dim()];
    for _ in 0..steps {
        let (_, g) = graph.run(inr, &z, x, t)?;
        let gz = g.wrt(graph.z).expect("codes tracked");
        for (zi, gi) in z.iter_mut().zip(gz.data()) {
            *zi -= lr * gi;
        }
    }
    Ok(z)
}

/// Fits the latent code of one function: `steps` gradient-descent updates of
/// its mean squared reconstruction error, starting from `z = 0`.
pub fn encode(inr: &Inr, sample: &FunctionSample, steps: usize, inner_lr: f64) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(Error::Invalid("cannot encode an empty sample".into()));
    }
    let (x, t, n) = batch_tensors(inr, &[sample])?;
    let mut graph = LossGraph::new(inr, 1, n, false)?;
    inner_loop(inr, &mut graph, &x, &t, steps, inner_lr)
}

/// Encodes every sample with frozen parameters. Samples with equal point
/// counts are processed in fixed chunks of 64; each code only depends on its
/// own sample.
pub fn encode_dataset(inr: &Inr, samples: &[FunctionSample], steps: usize, inner_lr: f64) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut graph: Option<LossGraph> = None;
    for chunk in samples.chunks(64) {
        if chunk.iter().any(|s| s.len() != chunk[0].len()) {
            for s in chunk {
                out.push(encode(inr, s, steps, inner_lr)?);
            }
            continue;
        }
        let refs: Vec<&FunctionSample> = chunk.iter().collect();
        let (x, t, n) = batch_tensors(inr, &refs)?;
        let g = match &mut graph {
            Some(g) if g.codes == chunk.len() && g.points == n => g,
            slot => slot.insert(LossGraph::new(inr, chunk.len(), n, false)?),
        };
        let z = inner_loop(inr, g, &x, &t, steps, inner_lr)?;
        out.extend(z.chunks_exact(inr.latent_dim()).map(<[f64]>::to_vec));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InrTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// Cosine-anneal the outer learning rate from `outer_lr` towards zero.
    #[serde(default = "default_true")]
    pub cosine: bool,
    /// Every `select_every` epochs the reconstruction loss of a fixed
    /// subset of `select_samples` training samples is measured with frozen
    /// parameters; the parameters with the lowest value are returned.
    /// 0 returns the final parameters.
    #[serde(default = "default_select_every")]
    pub select_every: usize,
    #[serde(default = "default_select_samples")]
    pub select_samples: usize,
}

fn default_true() -> bool {
    true
}

fn default_select_every() -> usize {
    5
}

fn default_select_samples() -> usize {
    200
}

impl Default for InrTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch: 16,
            inner_steps: 3,
            inner_lr: 1e-2,
            outer_lr: 1e-4,
            cosine: true,
            select_every: default_select_every(),
            select_samples: default_select_samples(),
        }
    }
}

impl InrTrainConfig {
    pub fn outer_lr_at(&self, epoch: usize) -> f64 {
        if !self.cosine || self.epochs <= 1 {
            return self.outer_lr;
        }
        let f = epoch as f64 / self.epochs as f64;
        0.5 * self.outer_lr * (1.0 + (std::f64::consts::PI * f).cos())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean post-inner-loop reconstruction loss per epoch (normalised units).
    pub epoch_loss: Vec<f64>,
    /// `(epoch, loss)` of every selection pass.
    pub selection: Vec<(usize, f64)>,
    /// Epoch whose parameters were returned.
    pub selected_epoch: usize,
}

/// First-order meta-learning: per batch, run the inner loop from `z = 0`,
/// then take an Adam step on the shared parameters using the gradient of the
/// post-inner-loop loss with the codes held fixed.
pub fn train_inr(
    arch: InrArch,
    domain: Domain,
    samples: &[FunctionSample],
    cfg: &InrTrainConfig,
    seed: u64,
) -> Result<(Inr, TrainLog)> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut inr = Inr::init(arch, domain, seed)?;
    let all: Vec<f64> = samples.iter().flat_map(|s| s.values.iter().copied()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
    inr.value_shift = mean;
    inr.value_scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };

    let sizes: Vec<usize> = inr.params.iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(cfg.outer_lr, &sizes);
    let mut log = TrainLog::default();
    let mut graphs: Vec<(usize, usize, LossGraph, LossGraph)> = Vec::new();
    let batch = cfg.batch.max(1);
    let stride = samples.len().div_ceil(cfg.select_samples.max(1));
    let monitor: Vec<FunctionSample> = samples.iter().step_by(stride).cloned().collect();
    let mut best: Option<(f64, Vec<Arc<Tensor>>)> = None;

    for epoch in 0..cfg.epochs {
        adam.lr = cfg.outer_lr_at(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = rng::stream(rng::derive(seed, "inr-epoch"), epoch as u64);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, idx) in order.chunks(batch).enumerate() {
            let refs: Vec<&FunctionSample> = idx.iter().map(|&i| &samples[i]).collect();
            let groups = group_by_len(&refs);
            for group in groups {
                let (x, t, n) = batch_tensors(&inr, &group)?;
                let c = group.len();
                let pos = match graphs.iter().position(|(gc, gn, ..)| *gc == c && *gn == n) {
                    Some(p) => p,
                    None => {
                        graphs.push((c, n, LossGraph::new(&inr, c, n, false)?, LossGraph::new(&inr, c, n, true)?));
                        graphs.len() - 1
                    }
                };
                let (_, _, inner, outer) = &mut graphs[pos];
                let z = inner_loop(&inr, inner, &x, &t, cfg.inner_steps, cfg.inner_lr)?;
                let (loss, g) = outer.run(&inr, &z, &x, &t)?;
                if !loss.is_finite() {
                    return Err(Error::numerical("inr training", format!("epoch {epoch}, batch {b}: loss {loss}")));
                }
                total += loss;
                count += c;
                let grads = g.into_slots();
                adam.tick();
                for (k, p) in inr.params.iter_mut().enumerate() {
                    let gk = grads[k].as_ref().expect("parameters tracked");
                    // Loss is a sum over the group; average over the batch.
                    let scaled: Vec<f64> = gk.data().iter().map(|v| v / idx.len() as f64).collect();
                    adam.update(k, Arc::make_mut(p).data_mut(), &scaled);
                }
            }
        }
        log.epoch_loss.push(total / count as f64);
        log::debug!("inr epoch {epoch}: loss {:.4e}", total / count as f64);
        if cfg.select_every > 0 && ((epoch + 1) % cfg.select_every == 0 || epoch + 1 == cfg.epochs) {
            let l = reconstruction_loss(&inr, &monitor, cfg.inner_steps, cfg.inner_lr)?;
            log.selection.push((epoch, l));
            if best.as_ref().is_none_or(|(bl, _)| l < *bl) {
                best = Some((l, inr.params.clone()));
                log.selected_epoch = epoch;
            }
        }
    }
    match best {
        Some((_, params)) => inr.params = params,
        None => log.selected_epoch = cfg.epochs.saturating_sub(1),
    }
    Ok((inr, log))
}

fn group_by_len<'a>(samples: &[&'a FunctionSample]) -> Vec<Vec<&'a FunctionSample>> {
    let mut groups: Vec<Vec<&FunctionSample>> = Vec::new();
    for s in samples {
        match groups.iter_mut().find(|g| g[0].len() == s.len()) {
            Some(g) => g.push(s),
            None => groups.push(vec![s]),
        }
    }
    groups
}

/// Mean post-inner-loop reconstruction loss of `samples` (normalised units).
pub fn reconstruction_loss(inr: &Inr, samples: &[FunctionSample], steps: usize, inner_lr: f64) -> Result<f64> {
    let codes = encode_dataset(inr, samples, steps, inner_lr)?;
    let mut total = 0.0;
    for (s, z) in samples.iter().zip(&codes) {
        let v = inr.decode(z, &s.points)?;
        total += v.iter().zip(&s.values).map(|(p, q)| ((p - q) / inr.value_scale).powi(2)).sum::<f64>() / s.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// `||g(., z) - g(., z')|| / ||z - z'||` with the function norm taken as the
/// root mean square over `grid` times the square root of the domain volume.
pub fn lipschitz_ratios(inr: &Inr, pairs: &[(Vec<f64>, Vec<f64>)], grid: &[f64]) -> Result<Vec<f64>> {
    let vol: f64 = inr.domain.lo.iter().zip(&inr.domain.hi).map(|(l, h)| h - l).product();
    let n = grid.len() / inr.arch.in_dim;
    pairs
        .iter()
        .map(|(a, b)| {
            let v = inr.decode_many(&[a.clone(), b.clone()], grid)?;
            let (ga, gb) = v.split_at(n);
            let f = (ga.iter().zip(gb).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n as f64 * vol).sqrt();
            let dz = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            Ok(f / dz)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorRecord {
    fn from(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }
}

impl TryFrom<TensorRecord> for Tensor {
    type Error = Error;
    fn try_from(r: TensorRecord) -> Result<Self> {
        Ok(Tensor::new(r.shape, r.data)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InrCheckpoint {
    pub version: u32,
    pub arch: InrArch,
    pub domain: Domain,
    pub value_shift: f64,
    pub value_scale: f64,
    pub params: Vec<TensorRecord>,
    pub code_stats: Option<CodeStats>,
}

impl InrCheckpoint {
    pub fn new(inr: &Inr, code_stats: Option<CodeStats>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            arch: inr.arch.clone(),
            domain: inr.domain.clone(),
            value_shift: inr.value_shift,
            value_scale: inr.value_scale,
            params: inr.params.iter().map(|p| TensorRecord::from(p.as_ref())).collect(),
            code_stats,
        }
    }

    pub fn into_inr(self) -> Result<(Inr, Option<CodeStats>)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Invalid(format!("unsupported INR checkpoint version {}", self.version)));
        }
        let shapes = self.arch.param_shapes();
        if shapes.len() != self.params.len() || shapes.iter().zip(&self.params).any(|(s, p)| *s != p.shape) {
            return Err(Error::Dimension("INR checkpoint parameter shapes do not match the architecture".into()));
        }
        let params = self.params.into_iter().map(|p| Tensor::try_from(p).map(Arc::new)).collect::<Result<_>>()?;
        let inr = Inr { arch: self.arch, domain: self.domain, value_shift: self.value_shift, value_scale: self.value_scale, params };
        Ok((inr, self.code_stats))
    }
}
