//! Joint configuration spaces of several categorical variables.
//!
//! Configurations are enumerated in mixed radix with the last variable
//! varying fastest. Probability tables throughout the crate use this order.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default limit on exhaustively enumerated configurations.
pub const ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigSpace {
    cardinalities: Vec<usize>,
}

impl ConfigSpace {
    pub fn new(cardinalities: Vec<usize>) -> Result<Self> {
        if cardinalities.contains(&0) {
            return Err(Error::InvalidInput("cardinalities must be at least 1".into()));
        }
        Ok(Self { cardinalities })
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn dims(&self) -> usize {
        self.cardinalities.len()
    }

    /// Number of configurations, saturating in `u128`.
    pub fn total(&self) -> u128 {
        self.cardinalities
            .iter()
            .fold(1u128, |acc, &k| acc.saturating_mul(k as u128))
    }

    /// Number of configurations if it does not exceed `cap`.
    pub fn size_within(&self, cap: u128) -> Result<usize> {
        let total = self.total();
        if total > cap {
            return Err(Error::EnumerationCap {
                configurations: total,
                cap,
            });
        }
        Ok(total as usize)
    }

    pub fn index_of(&self, config: &[usize]) -> usize {
        debug_assert_eq!(config.len(), self.dims());
        config
            .iter()
            .zip(&self.cardinalities)
            .fold(0, |acc, (&x, &k)| acc * k + x)
    }

    pub fn decode_into(&self, mut index: usize, out: &mut [usize]) {
        for (o, &k) in out.iter_mut().zip(&self.cardinalities).rev() {
            *o = index % k;
            index /= k;
        }
    }

    pub fn decode(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims()];
        self.decode_into(index, &mut out);
        out
    }

    /// Checks that `config` holds one in-range index per variable.
    pub fn validate(&self, config: &[usize]) -> Result<()> {
        if config.len() != self.dims() {
            return Err(Error::InvalidInput(format!(
                "configuration has {} entries, expected {}",
                config.len(),
                self.dims()
            )));
        }
        for (d, (&x, &k)) in config.iter().zip(&self.cardinalities).enumerate() {
            if x >= k {
                return Err(Error::InvalidInput(format!(
                    "index {x} out of range for dimension {d} of cardinality {k}"
                )));
            }
        }
        Ok(())
    }
}

/// Joint assignment as one one-hot vector per variable.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotConfig<T> {
    vectors: Vec<Vec<T>>,
}

impl<T: Real> OneHotConfig<T> {
    pub fn from_indices(indices: &[usize], cardinalities: &[usize]) -> Result<Self> {
        ConfigSpace::new(cardinalities.to_vec())?.validate(indices)?;
        let vectors = indices
            .iter()
            .zip(cardinalities)
            .map(|(&i, &k)| {
                let mut v = vec![T::zero(); k];
                v[i] = T::one();
                v
            })
            .collect();
        Ok(Self { vectors })
    }

    pub fn vectors(&self) -> &[Vec<T>] {
        &self.vectors
    }

    pub fn indices(&self) -> Vec<usize> {
        self.vectors.iter().map(|v| crate::diffcore::argmax(v)).collect()
    }
}
