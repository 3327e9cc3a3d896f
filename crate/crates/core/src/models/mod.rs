//! Target models whose posteriors are approximated.

pub mod bn;
pub mod gmm;

use crate::diffcore::{NodeId, Tape};
use crate::error::Result;
use crate::scalar::Real;
use crate::space::ConfigSpace;

pub use bn::{BayesNet, BnPosterior, Evidence};
pub use gmm::{GmmAllocation, GmmState};

/// Constant nodes a model records once per traced step.
#[derive(Clone, Debug, Default)]
pub struct ModelBinding {
    pub nodes: Vec<NodeId>,
}

/// A log-joint over categorical latent variables that can be traced.
pub trait TracedModel<T: Real>: Sync {
    /// Cardinality of every latent dimension.
    fn cardinalities(&self) -> &[usize];

    fn bind(&self, tape: &mut Tape<T>) -> ModelBinding;

    /// `ln p(D, x)` for (near) one-hot latent nodes `xs`.
    fn trace_log_joint(&self, tape: &mut Tape<T>, bind: &ModelBinding, xs: &[NodeId]) -> NodeId;

    /// Log-joint with a relaxed prior, for Gumbel-Softmax training with
    /// prior temperature `tau_p`. Defaults to the discrete log-joint.
    fn trace_relaxed_log_joint(&self, tape: &mut Tape<T>, bind: &ModelBinding, xs: &[NodeId], _tau_p: T) -> NodeId {
        self.trace_log_joint(tape, bind, xs)
    }

    /// Untraced `ln p(D, x)` for category indices.
    fn log_joint(&self, x: &[usize]) -> f64;
}

/// Normalised posterior table over all latent configurations.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub space: ConfigSpace,
    pub table: Vec<f64>,
    pub log_evidence: f64,
}

/// Enumerates `ln p(D, x)` over the latent space and normalises it.
pub fn enumerate_posterior<T: Real, M: TracedModel<T> + ?Sized>(model: &M, cap: u128) -> Result<Posterior> {
    let space = ConfigSpace::new(model.cardinalities().to_vec())?;
    let n = space.size_within(cap)?;
    let mut x = vec![0; space.dims()];
    let mut logs = Vec::with_capacity(n);
    for i in 0..n {
        space.decode_into(i, &mut x);
        logs.push(model.log_joint(&x));
    }
    let log_evidence = crate::diffcore::logsumexp(&logs);
    let table = logs.iter().map(|&l| (l - log_evidence).exp()).collect();
    Ok(Posterior {
        space,
        table,
        log_evidence,
    })
}
