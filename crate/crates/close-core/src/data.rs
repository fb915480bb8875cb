//! Core observation container: point estimates with known standard errors
//! and optional covariates.

use crate::error::Error;
use crate::Result;
use serde::{Deserialize, Serialize};

/// A single unit: point estimate `y`, standard error `sigma > 0`, and an
/// optional covariate vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<f64>>,
}

impl Observation {
    pub fn new(y: f64, sigma: f64) -> Self {
        Observation {
            y,
            sigma,
            covariates: None,
        }
    }

    pub fn with_covariates(y: f64, sigma: f64, covariates: Vec<f64>) -> Self {
        Observation {
            y,
            sigma,
            covariates: Some(covariates),
        }
    }
}

/// An ordered collection of observations. The ordering is stable and defines
/// the unit index used in every downstream report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    observations: Vec<Observation>,
}

impl Dataset {
    /// Validates invariants: at least one unit, finite `y`, `sigma > 0`, and
    /// a common covariate dimension across all units.
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::invalid("dataset must contain at least one observation"));
        }
        let cov_dim = observations[0].covariates.as_ref().map(Vec::len);
        for (i, obs) in observations.iter().enumerate() {
            if !obs.y.is_finite() {
                return Err(Error::invalid(format!("unit {i}: y = {} is not finite", obs.y)));
            }
            if !(obs.sigma.is_finite() && obs.sigma > 0.0) {
                return Err(Error::invalid(format!(
                    "unit {i}: sigma = {} must be finite and positive",
                    obs.sigma
                )));
            }
            let dim = obs.covariates.as_ref().map(Vec::len);
            if dim != cov_dim {
                return Err(Error::invalid(format!(
                    "unit {i}: covariate dimension {dim:?} differs from unit 0 ({cov_dim:?})"
                )));
            }
            if let Some(x) = &obs.covariates {
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("unit {i}: non-finite covariate")));
                }
            }
        }
        Ok(Dataset { observations })
    }

    /// Builds a dataset from parallel `y` and `sigma` slices.
    pub fn from_columns(y: &[f64], sigma: &[f64]) -> Result<Self> {
        if y.len() != sigma.len() {
            return Err(Error::invalid(format!(
                "y has length {} but sigma has length {}",
                y.len(),
                sigma.len()
            )));
        }
        Dataset::new(
            y.iter()
                .zip(sigma)
                .map(|(&y, &s)| Observation::new(y, s))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Observation> {
        self.observations.iter()
    }

    pub fn y(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.y).collect()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.sigma).collect()
    }

    /// Covariate dimension, or `None` when the dataset carries no covariates.
    pub fn covariate_dim(&self) -> Option<usize> {
        self.observations[0].covariates.as_ref().map(Vec::len)
    }

    /// Covariate matrix in row-major unit order; `None` without covariates.
    pub fn covariate_rows(&self) -> Option<Vec<&[f64]>> {
        self.covariate_dim()?;
        Some(
            self.observations
                .iter()
                .map(|o| o.covariates.as_deref().expect("validated covariates"))
                .collect(),
        )
    }

    /// Order-sensitive FNV-1a fingerprint of the exact bit patterns of
    /// `(y, sigma, covariates)`. Two datasets compare equal iff their
    /// fingerprints do, up to hash collisions.
    pub fn fingerprint(&self) -> String {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for obs in &self.observations {
            feed(obs.y);
            feed(obs.sigma);
            if let Some(x) = &obs.covariates {
                for &v in x {
                    feed(v);
                }
            }
        }
        format!("{hash:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_bad_sigma() {
        assert!(Dataset::new(vec![]).is_err());
        assert!(Dataset::new(vec![Observation::new(1.0, 0.0)]).is_err());
        assert!(Dataset::new(vec![Observation::new(1.0, -1.0)]).is_err());
        assert!(Dataset::new(vec![Observation::new(f64::NAN, 1.0)]).is_err());
    }

    #[test]
    fn rejects_ragged_covariates() {
        let rows = vec![
            Observation::with_covariates(0.0, 1.0, vec![1.0, 2.0]),
            Observation::with_covariates(1.0, 1.0, vec![1.0]),
        ];
        assert!(Dataset::new(rows).is_err());
    }

    #[test]
    fn fingerprint_is_order_and_value_sensitive() {
        let a = Dataset::from_columns(&[1.0, 2.0], &[0.5, 0.25]).unwrap();
        let b = Dataset::from_columns(&[2.0, 1.0], &[0.25, 0.5]).unwrap();
        let c = Dataset::from_columns(&[1.0, 2.0], &[0.5, 0.25]).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), c.fingerprint());
    }
}
