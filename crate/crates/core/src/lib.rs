//! Mixtures of discrete normalizing flows for categorical variational inference.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffcore`]: a small reverse-mode tape over dense vectors.
//! * [`dists`]: categorical, Gumbel, Dirichlet and Gumbel-Softmax helpers.
//! * [`flows`]: location-scale, shift-only and partial flows on one-hot codes.
//! * [`mdnf`]: the flow mixture itself (sampling, log-probability, fitting by construction).
//! * [`models`]: Bayesian networks and a variational Gaussian mixture.
//! * [`infer`]: VIF, BVIF, BVI and Gumbel-Softmax training loops.
//! * [`eval`]: exact KL, discretized ELBO and variance studies.
//! * [`experiments`]: parallel sweeps producing CSV-ready rows.
//!
//! Core types are generic over [`Real`]; the aliases below fix the scalar.

pub mod diffcore;
pub mod dists;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod flows;
pub mod infer;
pub mod mdnf;
pub mod models;
pub mod scalar;
pub mod space;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tape64 = diffcore::Tape<f64>;
pub type Tape32 = diffcore::Tape<f32>;
pub type FlowMixture64 = mdnf::FlowMixture<f64>;
pub type FlowMixture32 = mdnf::FlowMixture<f32>;
pub type DiscreteFlow64 = flows::DiscreteFlow<f64>;
pub type DiscreteFlow32 = flows::DiscreteFlow<f32>;

pub use dists::SeededRng;
