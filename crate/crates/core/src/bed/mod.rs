//! Bayesian sensor placement: PCE utility, design ascent, adaptive loop.

pub mod adaptive;
pub mod optimize;
pub mod pce;

use std::sync::Arc;

use gradcore::{NodeId, Tape, Tensor};

use crate::inr::Inr;
use crate::simulate::Domain;
use crate::surrogate::{Channel, Surrogate};
use crate::{Error, Result};

pub use adaptive::{adaptive_loop, adaptive_step, design_samples, step_seed, AdaptiveRun, History, Truth};
pub use optimize::{optimize_batch, BatchResult, OptConfig};
pub use pce::{crn_noise, pce, PceConfig, PceResult};

/// Predicted noise-free observations for every bound code at one design.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prediction {
    /// `[codes, sensors, channels]`.
    pub values: Vec<f64>,
    /// `[codes, sensors, channels, in_dim]`; empty unless requested.
    pub grads: Vec<f64>,
}

/// Observation operator `xi -> f(xi, z)` over a fixed code set.
pub trait BoundModel {
    fn in_dim(&self) -> usize;
    fn channels(&self) -> usize;
    fn codes(&self) -> usize;
    fn predict(&mut self, xi: &[f64], with_grad: bool) -> Result<Prediction>;
}

/// Factory binding a code set to an observation operator.
pub trait ObservationModel {
    fn domain(&self) -> &Domain;
    fn bind<'a>(&'a self, codes: &[Vec<f64>]) -> Result<Box<dyn BoundModel + 'a>>;
}

/// The surrogate's decoders observed on `channels` at each sensor.
pub struct SurrogateModel<'a> {
    pub surrogate: &'a Surrogate,
    pub channels: Vec<Channel>,
}

impl<'a> SurrogateModel<'a> {
    pub fn new(surrogate: &'a Surrogate, channels: Vec<Channel>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Invalid("observation model without channels".into()));
        }
        for c in &channels {
            surrogate.decoder(*c)?;
        }
        Ok(Self { surrogate, channels })
    }
}

impl ObservationModel for SurrogateModel<'_> {
    fn domain(&self) -> &Domain {
        &self.surrogate.u.domain
    }

    fn bind<'b>(&'b self, codes: &[Vec<f64>]) -> Result<Box<dyn BoundModel + 'b>> {
        let mut parts = Vec::with_capacity(self.channels.len());
        for &ch in &self.channels {
            let inr = self.surrogate.decoder(ch)?;
            let raw: Vec<Vec<f64>> = codes.iter().map(|z| self.surrogate.raw_code(z, ch)).collect();
            parts.push(BoundDecoder::new(inr, &raw)?);
        }
        Ok(Box::new(BoundSurrogate { parts, codes: codes.len(), in_dim: self.domain().dim() }))
    }
}

/// One decoder with its per-code layer shifts precomputed.
struct BoundDecoder<'a> {
    inr: &'a Inr,
    shifts: Arc<Tensor>,
    codes: usize,
    graph: Option<(usize, Tape, NodeId, NodeId)>,
}

impl<'a> BoundDecoder<'a> {
    fn new(inr: &'a Inr, codes: &[Vec<f64>]) -> Result<Self> {
        let p = codes.len();
        let mut tape = Tape::new();
        let params = inr.declare_params(&mut tape, false);
        let z = tape.data(&[p, inr.latent_dim()]);
        inr.build_shifts(&mut tape, &params, z)?;
        let flat = crate::inr::flatten_codes(codes, inr.latent_dim())?;
        let shifts = tape.forward(inr.params.iter().cloned().chain([Arc::new(Tensor::matrix(p, inr.latent_dim(), flat))]))?;
        Ok(Self { inr, shifts: Arc::new(shifts), codes: p, graph: None })
    }

    /// Values `[codes, sensors]` and gradients `[codes, sensors, dx]`.
    fn predict(&mut self, xi: &[f64], with_grad: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        let dx = self.inr.arch.in_dim;
        let d = xi.len() / dx;
        let p = self.codes;
        if !matches!(&self.graph, Some((dd, ..)) if *dd == d) {
            let mut tape = Tape::new();
            let params = self.inr.declare_params(&mut tape, false);
            let beta = tape.data(&[p, self.inr.arch.shift_dim()]);
            let x = tape.input(&[p * d, dx]);
            let (_, value) = self.inr.build_with_shifts(&mut tape, &params, x, beta, &vec![d; p])?;
            tape.sum(value);
            self.graph = Some((d, tape, x, value));
        }
        let (_, tape, x, value) = self.graph.as_mut().expect("built");
        let mut tiled = Vec::with_capacity(p * xi.len());
        for _ in 0..p {
            tiled.extend_from_slice(xi);
        }
        let inputs = self
            .inr
            .params
            .iter()
            .cloned()
            .chain([Arc::clone(&self.shifts), Arc::new(Tensor::matrix(p * d, dx, tiled))]);
        tape.forward(inputs)?;
        let values = tape.value(*value).expect("evaluated").data().to_vec();
        let grads = if with_grad { tape.backward(1.0)?.wrt(*x).expect("tracked").data().to_vec() } else { Vec::new() };
        Ok((values, grads))
    }
}

struct BoundSurrogate<'a> {
    parts: Vec<BoundDecoder<'a>>,
    codes: usize,
    in_dim: usize,
}

impl BoundModel for BoundSurrogate<'_> {
    fn in_dim(&self) -> usize {
        self.in_dim
    }

    fn channels(&self) -> usize {
        self.parts.len()
    }

    fn codes(&self) -> usize {
        self.codes
    }

    fn predict(&mut self, xi: &[f64], with_grad: bool) -> Result<Prediction> {
        if self.parts.len() == 1 {
            let (values, grads) = self.parts[0].predict(xi, with_grad)?;
            return Ok(Prediction { values, grads });
        }
        let c = self.parts.len();
        let dx = self.in_dim;
        let d = xi.len() / dx;
        let rows = self.codes * d;
        let mut values = vec![0.0; rows * c];
        let mut grads = if with_grad { vec![0.0; rows * c * dx] } else { Vec::new() };
        for (ch, part) in self.parts.iter_mut().enumerate() {
            let (v, g) = part.predict(xi, with_grad)?;
            for r in 0..rows {
                values[r * c + ch] = v[r];
                if with_grad {
                    grads[(r * c + ch) * dx..(r * c + ch + 1) * dx].copy_from_slice(&g[r * dx..(r + 1) * dx]);
                }
            }
        }
        Ok(Prediction { values, grads })
    }
}

/// Analytic observation operators `f(xi, z)` given as closures returning the
/// value and `df/dxi` at one sensor for one code.
pub struct FnModel<F> {
    pub domain: Domain,
    pub channels: usize,
    pub f: F,
}

impl<F> ObservationModel for FnModel<F>
where
    F: Fn(&[f64], &[f64]) -> (Vec<f64>, Vec<f64>),
{
    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn bind<'a>(&'a self, codes: &[Vec<f64>]) -> Result<Box<dyn BoundModel + 'a>> {
        Ok(Box::new(BoundFn { model: self, codes: codes.to_vec() }))
    }
}

struct BoundFn<'a, F> {
    model: &'a FnModel<F>,
    codes: Vec<Vec<f64>>,
}

impl<F> BoundModel for BoundFn<'_, F>
where
    F: Fn(&[f64], &[f64]) -> (Vec<f64>, Vec<f64>),
{
    fn in_dim(&self) -> usize {
        self.model.domain.dim()
    }

    fn channels(&self) -> usize {
        self.model.channels
    }

    fn codes(&self) -> usize {
        self.codes.len()
    }

    fn predict(&mut self, xi: &[f64], with_grad: bool) -> Result<Prediction> {
        let dx = self.in_dim();
        let mut out = Prediction::default();
        for z in &self.codes {
            for s in xi.chunks_exact(dx) {
                let (v, g) = (self.model.f)(s, z);
                out.values.extend(v);
                if with_grad {
                    out.grads.extend(g);
                }
            }
        }
        Ok(out)
    }
}
