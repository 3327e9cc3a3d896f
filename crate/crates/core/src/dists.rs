//! Categorical, Gumbel, Dirichlet and Gumbel-Softmax helpers.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::diffcore::{gs_log_density_clamped, logsumexp, Temperature};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Clamp applied to uniform draws before the Gumbel transform.
pub const UNIFORM_CLAMP: f64 = 1e-12;

/// Above this concentration a symmetric Dirichlet draw is replaced by the uniform vector.
pub const DIRICHLET_UNIFORM_ALPHA: f64 = 1e6;

/// Reproducible random source: identical seed and call sequence give identical draws.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw on `[UNIFORM_CLAMP, 1 - UNIFORM_CLAMP]`.
    pub fn uniform(&mut self) -> f64 {
        self.inner
            .random::<f64>()
            .clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    }

    /// Independent child stream, keyed by `key`.
    pub fn fork(&mut self, key: u64) -> SeededRng {
        SeededRng::new(mix_seed(self.inner.next_u64(), key))
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Stateless seed mixer (splitmix64 finaliser over both inputs).
pub fn mix_seed(seed: u64, key: u64) -> u64 {
    let mut z = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Probability vector of a categorical distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalParams<T> {
    probs: Vec<T>,
}

impl<T: Real> CategoricalParams<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("categorical needs at least one category".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(Error::InvalidInput("categorical probabilities must be finite and non-negative".into()));
        }
        let total: T = probs.iter().copied().sum();
        if (total - T::one()).abs().as_f64() > T::sum_tolerance(probs.len()) {
            return Err(Error::InvalidInput(format!("categorical probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![T::one() / T::lit(k as f64); k],
        }
    }

    pub fn delta(atom: usize, k: usize) -> Self {
        let mut probs = vec![T::zero(); k];
        probs[atom] = T::one();
        Self { probs }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn cardinality(&self) -> usize {
        self.probs.len()
    }

    pub fn into_probs(self) -> Vec<T> {
        self.probs
    }
}

/// Categorical distribution with all mass on `atom`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeltaBase {
    atom: usize,
    cardinality: usize,
}

impl DeltaBase {
    pub fn new(atom: usize, cardinality: usize) -> Result<Self> {
        if atom >= cardinality {
            return Err(Error::InvalidInput(format!(
                "delta atom {atom} out of range for cardinality {cardinality}"
            )));
        }
        Ok(Self { atom, cardinality })
    }

    pub fn atom(self) -> usize {
        self.atom
    }

    pub fn cardinality(self) -> usize {
        self.cardinality
    }
}

/// Inverse-CDF draw from an (unnormalised is fine) non-negative weight vector.
pub fn sample_categorical<T: Real>(probs: &[T], rng: &mut SeededRng) -> usize {
    let total: f64 = probs.iter().map(|p| p.as_f64()).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Standard Gumbel draw `-ln(-ln U)` with `U` clamped away from 0 and 1.
pub fn sample_gumbel(rng: &mut SeededRng) -> f64 {
    gumbel_from_uniform(rng.uniform())
}

#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Relaxed one-hot `softmax((logits + g) / tau)` with fresh Gumbel noise `g`.
pub fn gumbel_softmax_sample<T: Real>(logits: &[T], tau: Temperature<T>, rng: &mut SeededRng) -> Result<Vec<T>> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidInput("Gumbel-Softmax logits must be finite".into()));
    }
    let z: Vec<T> = logits
        .iter()
        .map(|&l| (l + T::lit(sample_gumbel(rng))) / tau.value())
        .collect();
    let lse = logsumexp(&z);
    Ok(z.iter().map(|&v| (v - lse).exp()).collect())
}

/// Log density of the Gumbel-Softmax distribution, evaluated in log space.
/// Only defined on the open simplex.
pub fn gs_log_density<T: Real>(x: &[T], p: &CategoricalParams<T>, tau: Temperature<T>) -> Result<T> {
    if x.len() != p.cardinality() {
        return Err(Error::InvalidInput("gs_log_density: length mismatch".into()));
    }
    if x.iter().any(|&v| v <= T::zero()) {
        return Err(Error::Domain(
            "Gumbel-Softmax density is only defined for strictly positive x".into(),
        ));
    }
    Ok(gs_log_density_clamped(x, p.probs(), tau.value()))
}

/// Draw from the symmetric Dirichlet with concentration `alpha`.
///
/// Gamma variates are drawn in log space using `G(a) = G(a + 1) * U^(1/a)`,
/// which stays finite for tiny `alpha` where the direct draw underflows.
pub fn sample_dirichlet_base(alpha: f64, k: usize, rng: &mut SeededRng) -> Result<CategoricalParams<f64>> {
    if !(alpha > 0.0) || k == 0 {
        return Err(Error::InvalidInput(format!(
            "Dirichlet needs alpha > 0 and K >= 1, got alpha={alpha}, K={k}"
        )));
    }
    if alpha >= DIRICHLET_UNIFORM_ALPHA {
        return Ok(CategoricalParams::uniform(k));
    }
    let log_gammas: Vec<f64> = if alpha < 1.0 {
        let boosted = Gamma::new(alpha + 1.0, 1.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
        (0..k)
            .map(|_| boosted.sample(rng).ln() + rng.uniform().ln() / alpha)
            .collect()
    } else {
        let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
        (0..k).map(|_| gamma.sample(rng).ln()).collect()
    };
    let lse = logsumexp(&log_gammas);
    let mut probs: Vec<f64> = log_gammas.iter().map(|&l| (l - lse).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    CategoricalParams::new(probs)
}

/// Entropy in nats with `0 ln 0 = 0`.
pub fn categorical_entropy<T: Real>(p: &[T]) -> T {
    -p.iter()
        .filter(|&&v| v > T::zero())
        .map(|&v| v * v.ln())
        .sum::<T>()
}
