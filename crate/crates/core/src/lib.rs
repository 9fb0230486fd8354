//! Probabilistic surrogates for stochastic simulators and Bayesian sensor
//! placement on top of them.
//!
//! The pipeline: simulate training pairs, compress each function to a latent
//! code with a modulated SIREN ([`inr`]), fit a joint energy-based model over
//! the code pairs ([`ebm`]), then choose sensor locations by maximising a
//! contrastive information bound ([`bed`]) and infer parameters from the
//! resulting observations by Langevin sampling ([`posterior`]).

pub mod bed;
pub mod config;
pub mod ebm;
pub mod error;
pub mod eval;
pub mod inr;
pub mod optim;
pub mod parallel;
pub mod posterior;
pub mod rng;
pub mod simulate;
pub mod surrogate;

pub use error::{Error, Result};
