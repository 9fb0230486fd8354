//! Joint energy `E(z_kappa, z_u)` over standardised code pairs, trained by
//! energy discrepancy.

use std::sync::Arc;

use gradcore::{NodeId, Tape, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::inr::TensorRecord;
use crate::optim::Adam;
use crate::posterior::{self, SgldConfig};
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
/// Training halts once the loss exceeds this.
pub const DIVERGENCE: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EbmArch {
    pub kappa_dim: usize,
    pub u_dim: usize,
    /// Branch width; the merge tail is `2w -> w -> w/2 -> 1`.
    pub width: usize,
}

impl EbmArch {
    pub fn new(kappa_dim: usize, u_dim: usize) -> Self {
        Self { kappa_dim, u_dim, width: 128 }
    }

    pub fn input_dim(&self) -> usize {
        self.kappa_dim + self.u_dim
    }

    /// Parameter shapes: two encoders (3 affine layers each), two branches
    /// (2 gate layers each), merge layers, head.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let w = self.width;
        let mut s = Vec::new();
        for d in [self.kappa_dim, self.u_dim] {
            s.extend([vec![w, d], vec![w], vec![w, w], vec![w], vec![w, w], vec![w]]);
        }
        for _ in 0..4 {
            s.extend([vec![w, w], vec![w]]);
        }
        s.extend([vec![w, 2 * w], vec![w], vec![w / 2, w], vec![w / 2]]);
        s.extend([vec![1, w / 2], vec![1]]);
        s
    }
}

/// `x + g * (y - x)`: `x` where the gate is 0, `y` where it is 1.
pub fn interpolate(x: &[f64], y: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter().zip(y).zip(g).map(|((a, b), t)| a + t * (b - a)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ebm {
    pub arch: EbmArch,
    pub params: Vec<Arc<Tensor>>,
}

/// Index of the scalar output bias among the parameters.
pub const HEAD_BIAS: usize = 25;

impl Ebm {
    /// Fan-in uniform initialisation, zero biases.
    pub fn init(arch: EbmArch, seed: u64) -> Self {
        let mut rng = rng::stream(rng::derive(seed, "ebm-init"), 0);
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|shape| {
                let t = if shape.len() == 2 {
                    let bound = (1.0 / shape[1] as f64).sqrt();
                    let n = shape[0] * shape[1];
                    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
                } else {
                    Tensor::zeros(&shape)
                };
                Arc::new(t)
            })
            .collect();
        Self { arch, params }
    }

    pub fn head_bias(&self) -> f64 {
        self.params[HEAD_BIAS].data()[0]
    }

    pub fn declare_params(&self, tape: &mut Tape, tracked: bool) -> Vec<NodeId> {
        self.arch.param_shapes().iter().map(|s| if tracked { tape.input(s) } else { tape.data(s) }).collect()
    }

    /// Energies of the rows of `z` (`[rows, kappa_dim + u_dim]`) without the
    /// head bias, as a `[rows, 1]` node.
    pub fn build(&self, tape: &mut Tape, p: &[NodeId], z: NodeId) -> Result<NodeId> {
        let a = &self.arch;
        let zk = tape.slice_cols(z, 0, a.kappa_dim)?;
        let zu = tape.slice_cols(z, a.kappa_dim, a.u_dim)?;
        let u = encoder(tape, &p[0..6], zk)?;
        let v = encoder(tape, &p[6..12], zu)?;
        let hk = branch(tape, &p[12..16], u, v, u)?;
        let hu = branch(tape, &p[16..20], u, v, v)?;
        let h = tape.concat_cols(hk, hu)?;
        let h = tape.affine(h, p[20], Some(p[21]))?;
        let h = tape.relu(h);
        let h = tape.affine(h, p[22], Some(p[23]))?;
        let h = tape.relu(h);
        Ok(tape.affine(h, p[24], None)?)
    }

    fn inputs(&self) -> impl Iterator<Item = Arc<Tensor>> + '_ {
        self.params.iter().cloned()
    }

    /// Energies of the flat rows `z`.
    pub fn energies(&self, z: &[f64]) -> Result<Vec<f64>> {
        let d = self.arch.input_dim();
        if d == 0 || z.len() % d != 0 {
            return Err(Error::Dimension(format!("{} values for energy input dim {d}", z.len())));
        }
        let rows = z.len() / d;
        let mut tape = Tape::new();
        let p = self.declare_params(&mut tape, false);
        let zn = tape.data(&[rows, d]);
        self.build(&mut tape, &p, zn)?;
        let e = tape.forward(self.inputs().chain([Arc::new(Tensor::matrix(rows, d, z.to_vec()))]))?;
        let bias = self.head_bias();
        Ok(e.data().iter().map(|v| v + bias).collect())
    }

    pub fn energy(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.arch.input_dim() {
            return Err(Error::Dimension(format!("code of length {} for energy input dim {}", z.len(), self.arch.input_dim())));
        }
        Ok(self.energies(z)?[0])
    }

    /// Energy and its gradient with respect to `z`.
    pub fn energy_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.arch.input_dim();
        if z.len() != d {
            return Err(Error::Dimension(format!("code of length {} for energy input dim {d}", z.len())));
        }
        let mut tape = Tape::new();
        let p = self.declare_params(&mut tape, false);
        let zn = tape.input(&[1, d]);
        let e = self.build(&mut tape, &p, zn)?;
        tape.sum(e);
        let v = tape.forward(self.inputs().chain([Arc::new(Tensor::matrix(1, d, z.to_vec()))]))?.item();
        let g = tape.backward(1.0)?;
        Ok((v + self.head_bias(), g.wrt(zn).expect("tracked").data().to_vec()))
    }
}

fn encoder(tape: &mut Tape, p: &[NodeId], z: NodeId) -> Result<NodeId> {
    let h = tape.affine(z, p[0], Some(p[1]))?;
    let h = tape.gelu(h);
    let r = tape.affine(h, p[2], Some(p[3]))?;
    let r = tape.gelu(r);
    let h = tape.add(h, r)?;
    Ok(tape.affine(h, p[4], Some(p[5]))?)
}

/// Two rounds of `H <- Delta(U, V | relu(W H + b)) + H`.
fn branch(tape: &mut Tape, p: &[NodeId], u: NodeId, v: NodeId, start: NodeId) -> Result<NodeId> {
    let diff = tape.sub(v, u)?;
    let mut h = start;
    for r in 0..2 {
        let g = tape.affine(h, p[2 * r], Some(p[2 * r + 1]))?;
        let g = tape.relu(g);
        let step = tape.mul(g, diff)?;
        let delta = tape.add(u, step)?;
        h = tape.add(delta, h)?;
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdHyper {
    pub t: f64,
    pub m: usize,
    pub w: f64,
    pub epochs: usize,
}

impl EdHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0) || self.m == 0 || !(self.w > 0.0) {
            return Err(Error::Invalid(format!("energy discrepancy needs t > 0, M >= 1, w > 0; got {self:?}")));
        }
        Ok(())
    }
}

/// Perturbations for one batch: the shared `xi_i` and the `M` per-datum
/// `xi'_ij`, combined as `z_i + sqrt(t) (xi_i + xi'_ij)`.
pub fn perturb(z: &[f64], dim: usize, hyper: &EdHyper, rng: &mut Rng) -> Vec<f64> {
    let n = z.len() / dim;
    let st = hyper.t.sqrt();
    let mut out = Vec::with_capacity(n * hyper.m * dim);
    for i in 0..n {
        let xi = rng::normals(rng, dim);
        for _ in 0..hyper.m {
            for k in 0..dim {
                out.push(z[i * dim + k] + st * xi[k] + st * rng::normal(rng));
            }
        }
    }
    out
}

/// Energy-discrepancy loss graph for a fixed batch size.
pub struct EdGraph {
    tape: Tape,
    rows: usize,
    dim: usize,
}

impl EdGraph {
    pub fn new(ebm: &Ebm, rows: usize, hyper: &EdHyper, track_params: bool) -> Result<Self> {
        hyper.validate()?;
        let dim = ebm.arch.input_dim();
        let mut tape = Tape::new();
        let p = ebm.declare_params(&mut tape, track_params);
        let z = tape.data(&[rows, dim]);
        let zp = tape.data(&[rows * hyper.m, dim]);
        let e0 = ebm.build(&mut tape, &p, z)?;
        let ep = ebm.build(&mut tape, &p, zp)?;
        let e0 = tape.repeat_rows(e0, &vec![hyper.m; rows])?;
        let diff = tape.sub(e0, ep)?;
        let diff = tape.reshape(diff, &[rows, hyper.m])?;
        let per = tape.log_mean_exp_offset(diff, hyper.w / hyper.m as f64)?;
        tape.mean(per)?;
        Ok(Self { tape, rows, dim })
    }

    fn forward(&mut self, ebm: &Ebm, z: &[f64], zp: &[f64]) -> Result<f64> {
        let m = zp.len() / self.dim / self.rows;
        let inputs = ebm.inputs().chain([
            Arc::new(Tensor::matrix(self.rows, self.dim, z.to_vec())),
            Arc::new(Tensor::matrix(self.rows * m, self.dim, zp.to_vec())),
        ]);
        match self.tape.forward(inputs) {
            Ok(v) => Ok(v.item()),
            Err(gradcore::GradError::NonFinite { .. }) => Err(locate_non_finite(ebm, z, zp, self.dim)),
            Err(e) => Err(e.into()),
        }
    }
}

fn locate_non_finite(ebm: &Ebm, z: &[f64], zp: &[f64], dim: usize) -> Error {
    let n = z.len() / dim;
    let m = zp.len() / dim / n.max(1);
    for i in 0..n {
        let mut rows = z[i * dim..(i + 1) * dim].to_vec();
        rows.extend_from_slice(&zp[i * m * dim..(i + 1) * m * dim]);
        if !matches!(ebm.energies(&rows), Ok(e) if e.iter().all(|v| v.is_finite())) {
            return Error::numerical("ed loss", format!("non-finite energy at datum {i}"));
        }
    }
    Error::numerical("ed loss", "non-finite loss")
}

/// `(1/N) sum_i ln(w/M + (1/M) sum_j exp(E(z_i) - E(z_i + sqrt(t) xi_i + sqrt(t) xi'_ij)))`
/// on the flat batch `z`, with perturbations drawn from `seed`.
pub fn ed_loss(ebm: &Ebm, z: &[f64], hyper: &EdHyper, seed: u64) -> Result<f64> {
    let dim = ebm.arch.input_dim();
    if z.is_empty() || z.len() % dim != 0 {
        return Err(Error::Dimension(format!("{} values for code dim {dim}", z.len())));
    }
    let zp = perturb(z, dim, hyper, &mut rng::stream(rng::derive(seed, "ed-noise"), 0));
    EdGraph::new(ebm, z.len() / dim, hyper, false)?.forward(ebm, z, &zp)
}

/// The loss of [`ed_loss`] as a tape with tracked parameters, together with
/// the input values it was built for (parameters, batch, perturbed batch).
pub fn ed_loss_tape(ebm: &Ebm, z: &[f64], hyper: &EdHyper, seed: u64) -> Result<(Tape, Vec<Tensor>)> {
    let dim = ebm.arch.input_dim();
    if z.is_empty() || z.len() % dim != 0 {
        return Err(Error::Dimension(format!("{} values for code dim {dim}", z.len())));
    }
    let rows = z.len() / dim;
    let zp = perturb(z, dim, hyper, &mut rng::stream(rng::derive(seed, "ed-noise"), 0));
    let graph = EdGraph::new(ebm, rows, hyper, true)?;
    let mut inputs: Vec<Tensor> = ebm.params.iter().map(|p| p.as_ref().clone()).collect();
    inputs.push(Tensor::matrix(rows, dim, z.to_vec()));
    inputs.push(Tensor::matrix(rows * hyper.m, dim, zp));
    Ok((graph.tape, inputs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EbmTrainConfig {
    pub hyper: EdHyper,
    pub lr: f64,
    /// Learning rate multiplier per epoch.
    pub decay: f64,
    pub batch: usize,
}

impl EbmTrainConfig {
    pub fn new(hyper: EdHyper) -> Self {
        Self { hyper, lr: 1e-3, decay: 0.999, batch: 256 }
    }
}

/// Adam on the energy-discrepancy loss over shuffled minibatches of the flat
/// code rows `codes`. Returns the model and the mean loss per epoch.
pub fn train_ebm(arch: EbmArch, codes: &[Vec<f64>], cfg: &EbmTrainConfig, seed: u64) -> Result<(Ebm, Vec<f64>)> {
    cfg.hyper.validate()?;
    let dim = arch.input_dim();
    if codes.is_empty() {
        return Err(Error::Invalid("no codes to train on".into()));
    }
    let flat = crate::inr::flatten_codes(codes, dim)?;
    let mut ebm = Ebm::init(arch, seed);
    let sizes: Vec<usize> = ebm.params.iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(cfg.lr, &sizes);
    let batch = cfg.batch.max(1).min(codes.len());
    let mut graphs: Vec<(usize, EdGraph)> = Vec::new();
    let mut log = Vec::with_capacity(cfg.hyper.epochs);
    let noise_seed = rng::derive(seed, "ed-train-noise");
    for epoch in 0..cfg.hyper.epochs {
        adam.lr = cfg.lr * cfg.decay.powi(epoch as i32);
        let mut order: Vec<usize> = (0..codes.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(rng::derive(seed, "ebm-epoch"), epoch as u64));
        let mut noise = rng::stream(noise_seed, epoch as u64);
        let (mut total, mut seen) = (0.0, 0usize);
        for idx in order.chunks(batch) {
            let z: Vec<f64> = idx.iter().flat_map(|&i| flat[i * dim..(i + 1) * dim].iter().copied()).collect();
            let zp = perturb(&z, dim, &cfg.hyper, &mut noise);
            let pos = match graphs.iter().position(|(r, _)| *r == idx.len()) {
                Some(p) => p,
                None => {
                    graphs.push((idx.len(), EdGraph::new(&ebm, idx.len(), &cfg.hyper, true)?));
                    graphs.len() - 1
                }
            };
            let g = &mut graphs[pos].1;
            let loss = g.forward(&ebm, &z, &zp).map_err(|e| match e {
                Error::Numerical { context, detail } => {
                    Error::numerical(context, format!("epoch {epoch}: {detail} of the batch"))
                }
                other => other,
            })?;
            if loss > DIVERGENCE {
                return Err(Error::numerical("ebm training", format!("diverged at epoch {epoch}: loss {loss:.3e}")));
            }
            let grads = g.tape.backward(1.0)?.into_slots();
            adam.tick();
            for (k, p) in ebm.params.iter_mut().enumerate() {
                if let Some(gk) = &grads[k] {
                    adam.update(k, Arc::make_mut(p).data_mut(), gk.data());
                }
            }
            total += loss * idx.len() as f64;
            seen += idx.len();
        }
        log.push(total / seen as f64);
        if epoch % 50 == 0 {
            log::debug!("ebm epoch {epoch}: loss {:.5}", total / seen as f64);
        }
    }
    Ok((ebm, log))
}

/// Batched log density `-E` over `[chains, dim]` rows.
pub struct PriorDensity<'a> {
    ebm: &'a Ebm,
    graph: Option<(usize, Tape, NodeId)>,
}

impl<'a> PriorDensity<'a> {
    pub fn new(ebm: &'a Ebm) -> Self {
        Self { ebm, graph: None }
    }
}

impl posterior::LogDensity for PriorDensity<'_> {
    fn dim(&self) -> usize {
        self.ebm.arch.input_dim()
    }

    fn eval(&mut self, z: &[f64], rows: usize) -> Result<(f64, Vec<f64>)> {
        let dim = self.dim();
        if !matches!(&self.graph, Some((r, ..)) if *r == rows) {
            let mut tape = Tape::new();
            let p = self.ebm.declare_params(&mut tape, false);
            let zn = tape.input(&[rows, dim]);
            let e = self.ebm.build(&mut tape, &p, zn)?;
            let s = tape.sum(e);
            tape.scale_shift(s, -1.0, -(rows as f64) * self.ebm.head_bias());
            self.graph = Some((rows, tape, zn));
        }
        let (_, tape, zn) = self.graph.as_mut().expect("built");
        let v = tape.forward(self.ebm.params.iter().cloned().chain([Arc::new(Tensor::matrix(rows, dim, z.to_vec()))]))?;
        let g = tape.backward(1.0)?;
        Ok((v.item(), g.wrt(*zn).expect("tracked").data().to_vec()))
    }
}

/// Last iterates of `n` independent SGLD chains on `exp(-E)`, started from
/// standard normals.
pub fn sample_prior(ebm: &Ebm, n: usize, cfg: &SgldConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    posterior::sample_independent(&mut PriorDensity::new(ebm), n, cfg, rng::derive(seed, "prior"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EbmCheckpoint {
    pub version: u32,
    pub arch: EbmArch,
    pub params: Vec<TensorRecord>,
    /// Identifier of the code statistics the model was trained against.
    pub code_stats_id: String,
}

impl EbmCheckpoint {
    pub fn new(ebm: &Ebm, code_stats_id: String) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            arch: ebm.arch.clone(),
            params: ebm.params.iter().map(|p| TensorRecord::from(p.as_ref())).collect(),
            code_stats_id,
        }
    }

    pub fn into_ebm(self) -> Result<(Ebm, String)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Invalid(format!("unsupported EBM checkpoint version {}", self.version)));
        }
        let shapes = self.arch.param_shapes();
        if shapes.len() != self.params.len() || shapes.iter().zip(&self.params).any(|(s, p)| *s != p.shape) {
            return Err(Error::Dimension("EBM checkpoint parameter shapes do not match the architecture".into()));
        }
        let params = self.params.into_iter().map(|p| Tensor::try_from(p).map(Arc::new)).collect::<Result<_>>()?;
        Ok((Ebm { arch: self.arch, params }, self.code_stats_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EbmArch {
        EbmArch { kappa_dim: 2, u_dim: 3, width: 8 }
    }

    #[test]
    fn zero_weights_give_head_bias() {
        let mut ebm = Ebm::init(small(), 1);
        for p in ebm.params.iter_mut() {
            let s = p.shape().to_vec();
            *p = Arc::new(Tensor::zeros(&s));
        }
        Arc::make_mut(&mut ebm.params[HEAD_BIAS]).data_mut()[0] = 0.37;
        for z in [[0.0; 5], [1.0, -2.0, 3.0, 0.5, 9.0]] {
            assert_eq!(ebm.energy(&z).unwrap(), 0.37);
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let x = [1.0, -2.0, 3.5];
        let y = [0.25, 7.0, -1.0];
        assert_eq!(interpolate(&x, &y, &[0.0; 3]), x.to_vec());
        assert_eq!(interpolate(&x, &y, &[1.0; 3]), y.to_vec());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let ebm = Ebm::init(small(), 1);
        assert!(matches!(ebm.energy(&[0.0; 4]), Err(Error::Dimension(_))));
    }

    #[test]
    fn bad_hyper_is_rejected() {
        let h = EdHyper { t: 0.0, m: 4, w: 1.0, epochs: 1 };
        assert!(h.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let ebm = Ebm::init(small(), 3);
        let json = serde_json::to_string(&EbmCheckpoint::new(&ebm, "abc".into())).unwrap();
        let (back, id) = serde_json::from_str::<EbmCheckpoint>(&json).unwrap().into_ebm().unwrap();
        assert_eq!(back, ebm);
        assert_eq!(id, "abc");
    }
}
