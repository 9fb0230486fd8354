//! The assembled probabilistic surrogate: code decoders for both functions of
//! a pair, the joint energy over their standardised codes, and the code
//! statistics tying the two together.

use serde::{Deserialize, Serialize};

use crate::ebm::{self, Ebm, EbmArch, EbmCheckpoint, EbmTrainConfig};
use crate::inr::{self, standardize_codes, CodeStats, Inr, InrArch, InrCheckpoint, InrTrainConfig};
use crate::rng;
use crate::simulate::dataset::Record;
use crate::simulate::{Domain, FunctionSample};
use crate::{Error, Result};

/// Which function of the pair an observation refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Kappa,
    U,
}

/// Representation of the parameter side of the pair.
#[derive(Clone, Debug, PartialEq)]
pub enum KappaRepr {
    /// A finite parameter vector used directly as the code.
    Params { dim: usize },
    Inr(Box<Inr>),
}

impl KappaRepr {
    pub fn dim(&self) -> usize {
        match self {
            KappaRepr::Params { dim } => *dim,
            KappaRepr::Inr(inr) => inr.latent_dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    pub kappa: KappaRepr,
    pub u: Inr,
    pub ebm: Ebm,
    /// Statistics of the raw joint codes `[z_kappa, z_u]`.
    pub stats: CodeStats,
}

impl Surrogate {
    pub fn new(kappa: KappaRepr, u: Inr, ebm: Ebm, stats: CodeStats) -> Result<Self> {
        let dk = kappa.dim();
        let du = u.latent_dim();
        if ebm.arch.kappa_dim != dk || ebm.arch.u_dim != du || stats.dim() != dk + du {
            return Err(Error::Dimension(format!(
                "surrogate parts disagree: kappa {dk}, u {du}, energy ({}, {}), stats {}",
                ebm.arch.kappa_dim,
                ebm.arch.u_dim,
                stats.dim()
            )));
        }
        Ok(Self { kappa, u, ebm, stats })
    }

    pub fn dim(&self) -> usize {
        self.stats.dim()
    }

    pub fn kappa_dim(&self) -> usize {
        self.kappa.dim()
    }

    /// Column range `(start, len)` of a channel within the joint code.
    pub fn slice(&self, channel: Channel) -> (usize, usize) {
        match channel {
            Channel::Kappa => (0, self.kappa_dim()),
            Channel::U => (self.kappa_dim(), self.u.latent_dim()),
        }
    }

    pub fn decoder(&self, channel: Channel) -> Result<&Inr> {
        match (channel, &self.kappa) {
            (Channel::U, _) => Ok(&self.u),
            (Channel::Kappa, KappaRepr::Inr(inr)) => Ok(inr),
            (Channel::Kappa, KappaRepr::Params { .. }) => {
                Err(Error::Invalid("the parameter side has no decoder to observe".into()))
            }
        }
    }

    /// Raw (unstandardised) channel code of a standardised joint code.
    pub fn raw_code(&self, z: &[f64], channel: Channel) -> Vec<f64> {
        let (s, l) = self.slice(channel);
        self.stats.unstandardize(z)[s..s + l].to_vec()
    }
}

/// Concatenates per-sample codes into joint codes.
pub fn joint_codes(kappa: &[Vec<f64>], u: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if kappa.len() != u.len() {
        return Err(Error::Dimension(format!("{} kappa codes vs {} u codes", kappa.len(), u.len())));
    }
    Ok(kappa.iter().zip(u).map(|(a, b)| a.iter().chain(b).copied().collect()).collect())
}

/// Everything needed to fit a surrogate to a set of pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    /// `None` when the parameter is a finite vector used as its own code.
    pub kappa_arch: Option<InrArch>,
    pub u_arch: InrArch,
    pub inr: InrTrainConfig,
    pub ebm_width: usize,
    pub ebm: EbmTrainConfig,
}

/// Parameter side of the training pairs.
#[derive(Clone, Debug, PartialEq)]
pub enum KappaData {
    Vectors(Vec<Vec<f64>>),
    Functions(Vec<FunctionSample>),
}

impl KappaData {
    pub fn len(&self) -> usize {
        match self {
            KappaData::Vectors(v) => v.len(),
            KappaData::Functions(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits dataset records into parameter data and solution samples.
pub fn training_pairs(records: &[Record]) -> Result<(KappaData, Vec<FunctionSample>)> {
    let u: Vec<FunctionSample> = records.iter().map(Record::solution).collect::<Result<_>>()?;
    let vectors: Option<Vec<Vec<f64>>> = records.iter().map(Record::parameter_vector).collect();
    if let Some(v) = vectors {
        return Ok((KappaData::Vectors(v), u));
    }
    let functions: Option<Vec<FunctionSample>> =
        records.iter().map(Record::parameter_sample).collect::<Result<Vec<_>>>()?.into_iter().collect();
    match functions {
        Some(f) => Ok((KappaData::Functions(f), u)),
        None => Err(Error::Invalid("dataset mixes vector and function parameters".into())),
    }
}

/// Trains the decoder of one channel.
pub fn fit_inr(arch: InrArch, domain: Domain, samples: &[FunctionSample], cfg: &InrTrainConfig, seed: u64) -> Result<Inr> {
    Ok(inr::train_inr(arch, domain, samples, cfg, seed)?.0)
}

/// Raw joint codes `[z_kappa, z_u]` of every pair.
pub fn encode_pairs(
    kappa: &KappaRepr,
    kappa_data: &KappaData,
    u: &Inr,
    u_data: &[FunctionSample],
    cfg: &InrTrainConfig,
) -> Result<Vec<Vec<f64>>> {
    let zk = match (kappa, kappa_data) {
        (KappaRepr::Params { dim }, KappaData::Vectors(v)) => {
            if v.iter().any(|p| p.len() != *dim) {
                return Err(Error::Dimension(format!("parameter vectors must have length {dim}")));
            }
            v.clone()
        }
        (KappaRepr::Inr(inr), KappaData::Functions(f)) => inr::encode_dataset(inr, f, cfg.inner_steps, cfg.inner_lr)?,
        _ => return Err(Error::Invalid("parameter representation does not match the data".into())),
    };
    let zu = inr::encode_dataset(u, u_data, cfg.inner_steps, cfg.inner_lr)?;
    joint_codes(&zk, &zu)
}

/// Standardises the raw joint codes and trains the energy on them.
pub fn fit_energy(kappa: KappaRepr, u: Inr, raw_codes: &[Vec<f64>], width: usize, cfg: &EbmTrainConfig, seed: u64) -> Result<Surrogate> {
    let (codes, stats) = standardize_codes(raw_codes)?;
    let arch = EbmArch { kappa_dim: kappa.dim(), u_dim: u.latent_dim(), width };
    let (ebm, _) = ebm::train_ebm(arch, &codes, cfg, seed)?;
    Surrogate::new(kappa, u, ebm, stats)
}

/// Decoders, codes and energy in one go. Seeds of the stages are derived
/// from `seed`.
pub fn fit_surrogate(
    kappa_data: &KappaData,
    u_data: &[FunctionSample],
    domain: &Domain,
    cfg: &SurrogateConfig,
    seed: u64,
) -> Result<Surrogate> {
    if kappa_data.len() != u_data.len() || u_data.is_empty() {
        return Err(Error::Invalid(format!("{} parameters for {} solutions", kappa_data.len(), u_data.len())));
    }
    let kappa = match (&cfg.kappa_arch, kappa_data) {
        (None, KappaData::Vectors(v)) => KappaRepr::Params { dim: v[0].len() },
        (Some(arch), KappaData::Functions(f)) => {
            KappaRepr::Inr(Box::new(fit_inr(arch.clone(), domain.clone(), f, &cfg.inr, rng::derive(seed, "kappa-inr"))?))
        }
        _ => return Err(Error::config("surrogate.kappa_arch", "must be given exactly when the parameter is a function")),
    };
    let u = fit_inr(cfg.u_arch.clone(), domain.clone(), u_data, &cfg.inr, rng::derive(seed, "u-inr"))?;
    let raw = encode_pairs(&kappa, kappa_data, &u, u_data, &cfg.inr)?;
    fit_energy(kappa, u, &raw, cfg.ebm_width, &cfg.ebm, rng::derive(seed, "ebm"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KappaCheckpoint {
    Params { dim: usize },
    Inr(InrCheckpoint),
}

/// Serialised form of a [`Surrogate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateCheckpoint {
    pub kappa: KappaCheckpoint,
    pub u: InrCheckpoint,
    pub ebm: EbmCheckpoint,
    pub stats: CodeStats,
}

impl SurrogateCheckpoint {
    pub fn new(s: &Surrogate) -> Self {
        let kappa = match &s.kappa {
            KappaRepr::Params { dim } => KappaCheckpoint::Params { dim: *dim },
            KappaRepr::Inr(inr) => KappaCheckpoint::Inr(InrCheckpoint::new(inr, None)),
        };
        Self { kappa, u: InrCheckpoint::new(&s.u, None), ebm: EbmCheckpoint::new(&s.ebm, String::new()), stats: s.stats.clone() }
    }

    pub fn into_surrogate(self) -> Result<Surrogate> {
        let kappa = match self.kappa {
            KappaCheckpoint::Params { dim } => KappaRepr::Params { dim },
            KappaCheckpoint::Inr(c) => KappaRepr::Inr(Box::new(c.into_inr()?.0)),
        };
        Surrogate::new(kappa, self.u.into_inr()?.0, self.ebm.into_ebm()?.0, self.stats)
    }
}
