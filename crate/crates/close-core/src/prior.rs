//! Discrete mixing distributions: grid support points with simplex weights.

use crate::error::Error;
use crate::numeric::chunked_sum;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Tolerance on the simplex constraint `sum(weights) == 1`.
const WEIGHT_SUM_TOL: f64 = 1e-10;

/// A discrete distribution on a strictly increasing support grid. This is the
/// representation of the fitted mixing distribution `G`: all NPMLE solutions
/// and all grid-discretized reference priors live here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePrior {
    support: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscretePrior {
    /// Validates: equal lengths, `K >= 1`, finite strictly increasing
    /// support, non-negative weights summing to 1 within 1e-10.
    pub fn new(support: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::invalid("prior needs at least one support point"));
        }
        if support.len() != weights.len() {
            return Err(Error::invalid(format!(
                "support has {} points but weights has {}",
                support.len(),
                weights.len()
            )));
        }
        for (k, &t) in support.iter().enumerate() {
            if !t.is_finite() {
                return Err(Error::invalid(format!("support point {k} is not finite")));
            }
            if k > 0 && t <= support[k - 1] {
                return Err(Error::invalid(format!(
                    "support must be strictly increasing (violated at index {k})"
                )));
            }
        }
        let mut sum = 0.0;
        for (k, &w) in weights.iter().enumerate() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("weight {k} = {w} must be non-negative")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!(
                "weights sum to {sum}, outside 1 +/- {WEIGHT_SUM_TOL}"
            )));
        }
        Ok(DiscretePrior { support, weights })
    }

    /// Point mass at `location`.
    pub fn point_mass(location: f64) -> Result<Self> {
        DiscretePrior::new(vec![location], vec![1.0])
    }

    /// Uniform weights over `support`.
    pub fn uniform(support: Vec<f64>) -> Result<Self> {
        let k = support.len();
        DiscretePrior::new(support, vec![1.0 / k as f64; k])
    }

    /// Grid discretization of N(0,1): `count` equally spaced points on
    /// `[lo, hi]` with Gaussian-pdf weights renormalized to the simplex.
    pub fn gaussian_grid(lo: f64, hi: f64, count: usize) -> Result<Self> {
        let support = crate::numeric::linspace(lo, hi, count);
        let raw: Vec<f64> = support
            .iter()
            .map(|&t| crate::numeric::normal_pdf(t))
            .collect();
        let total = chunked_sum(&raw);
        let weights = raw.iter().map(|w| w / total).collect();
        DiscretePrior::new(support, weights)
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mean of the distribution.
    pub fn mean(&self) -> f64 {
        let terms: Vec<f64> = self
            .support
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * t)
            .collect();
        chunked_sum(&terms)
    }

    /// Variance of the distribution.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let terms: Vec<f64> = self
            .support
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * (t - mean) * (t - mean))
            .collect();
        chunked_sum(&terms)
    }

    /// Affinely rescales the support so the distribution has mean zero and
    /// variance one, leaving weights untouched. Errors when the variance is
    /// not strictly positive (a point mass cannot be standardized).
    pub fn standardized(&self) -> Result<Self> {
        let mean = self.mean();
        let var = self.variance();
        if !(var > 0.0) {
            return Err(Error::invalid(format!(
                "cannot standardize a prior with variance {var}"
            )));
        }
        let sd = var.sqrt();
        let support = self.support.iter().map(|&t| (t - mean) / sd).collect();
        DiscretePrior::new(support, self.weights.clone())
    }

    /// Inverse-CDF draw given a uniform variate in `[0, 1)`.
    pub fn sample_inverse_cdf(&self, u: f64) -> f64 {
        let mut cum = 0.0;
        for (&t, &w) in self.support.iter().zip(&self.weights) {
            cum += w;
            if u < cum {
                return t;
            }
        }
        *self.support.last().expect("non-empty support")
    }
}
