//! Exact posterior computations for discrete-prior heteroskedastic Gaussian
//! mixtures.
//!
//! Everything here works on the transformed scale: a latent `tau ~ G` (a
//! [`DiscretePrior`]) observed through `Z | tau ~ N(tau, nu^2)`. All mixture
//! sums run in the log domain with a max shift, so tiny `nu` (which arises
//! when the conditional scale estimate is small) cannot underflow the
//! Gaussian kernel.

use crate::data::Observation;
use crate::error::Error;
use crate::numeric::{log_sum_exp, LN_2PI};
use crate::prior::DiscretePrior;
use crate::Result;
use serde::{Deserialize, Serialize};

/// A unit on the transformed scale: `z_hat = (y - m) / s`, `nu_hat = sigma / s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformedUnit {
    pub z_hat: f64,
    pub nu_hat: f64,
}

impl TransformedUnit {
    pub fn new(z_hat: f64, nu_hat: f64) -> Result<Self> {
        if !z_hat.is_finite() || !nu_hat.is_finite() || nu_hat <= 0.0 {
            return Err(Error::invalid(format!(
                "transformed unit requires finite z and nu > 0, got z = {z_hat}, nu = {nu_hat}"
            )));
        }
        Ok(TransformedUnit { z_hat, nu_hat })
    }
}

/// Per-unit posterior summary on the original `theta` scale.
///
/// `posterior_moments_theta[v-1]` holds `E[theta^v | Y, sigma]` for
/// `v = 1..=max_order`; the first entry equals `posterior_mean_theta`.
/// `log_marginal_density` is the log density of the observed `y` itself
/// (the transformed-scale density divided by the scale `s`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub posterior_mean_theta: f64,
    pub posterior_moments_theta: Vec<f64>,
    pub posterior_mean_tau: f64,
    pub log_marginal_density: f64,
}

impl PosteriorSummary {
    /// Posterior variance `E[theta^2] - E[theta]^2`; requires `max_order >= 2`.
    pub fn posterior_variance(&self) -> Option<f64> {
        let m2 = *self.posterior_moments_theta.get(1)?;
        let m1 = self.posterior_mean_theta;
        Some(m2 - m1 * m1)
    }
}

fn check_inputs(z: f64, nu: f64) -> Result<()> {
    if !z.is_finite() || !nu.is_finite() || nu <= 0.0 {
        return Err(Error::invalid(format!(
            "mixture evaluation requires finite z and nu > 0, got z = {z}, nu = {nu}"
        )));
    }
    Ok(())
}

/// Per-component log terms `log w_k + log phi((z - tau_k)/nu) - log nu`.
/// Zero weights contribute `-inf` and drop out of every log-sum-exp.
fn log_component_terms(prior: &DiscretePrior, z: f64, nu: f64) -> Vec<f64> {
    let log_nu = nu.ln();
    prior
        .support()
        .iter()
        .zip(prior.weights())
        .map(|(&tau, &w)| {
            if w == 0.0 {
                f64::NEG_INFINITY
            } else {
                let u = (z - tau) / nu;
                w.ln() - 0.5 * (u * u + LN_2PI) - log_nu
            }
        })
        .collect()
}

/// Log marginal mixture density `log f_{G,nu}(z)`, with
/// `f = sum_k w_k phi((z - tau_k)/nu) / nu` evaluated by max-shifted
/// log-domain summation.
pub fn log_mixture_density(prior: &DiscretePrior, z: f64, nu: f64) -> Result<f64> {
    check_inputs(z, nu)?;
    Ok(log_sum_exp(&log_component_terms(prior, z, nu)))
}

/// Marginal mixture density `f_{G,nu}(z)`. May underflow to zero in the far
/// tail even though [`log_mixture_density`] stays finite.
pub fn mixture_density(prior: &DiscretePrior, z: f64, nu: f64) -> Result<f64> {
    Ok(log_mixture_density(prior, z, nu)?.exp())
}

/// Normalized posterior weights `P(tau = tau_k | Z = z)`, computed in the log
/// domain. Errors when every component underflows to `-inf`.
pub fn posterior_weights(prior: &DiscretePrior, z: f64, nu: f64) -> Result<Vec<f64>> {
    check_inputs(z, nu)?;
    let terms = log_component_terms(prior, z, nu);
    let log_f = log_sum_exp(&terms);
    if log_f == f64::NEG_INFINITY {
        return Err(Error::DegeneratePosterior { unit: 0, z, nu });
    }
    Ok(terms.iter().map(|&t| (t - log_f).exp()).collect())
}

/// Posterior moments `E[tau^v | Z = z]` for `v = 1..=max_order` under
/// `tau ~ prior`, `Z | tau ~ N(tau, nu^2)`.
pub fn posterior_tau_moments(
    prior: &DiscretePrior,
    z: f64,
    nu: f64,
    max_order: usize,
) -> Result<Vec<f64>> {
    if max_order < 1 {
        return Err(Error::invalid("max_order must be at least 1"));
    }
    let weights = posterior_weights(prior, z, nu)?;
    let mut moments = Vec::with_capacity(max_order);
    let mut powers: Vec<f64> = vec![1.0; prior.len()];
    for _ in 0..max_order {
        for (p, &t) in powers.iter_mut().zip(prior.support()) {
            *p *= t;
        }
        moments.push(
            powers
                .iter()
                .zip(&weights)
                .map(|(&tv, &w)| w * tv)
                .sum::<f64>(),
        );
    }
    Ok(moments)
}

/// Posterior mean through the derivative identity
/// `E[tau | z] = z + nu^2 * f'(z) / f(z)`, with `f'` evaluated analytically
/// as `sum_k w_k phi'((z - tau_k)/nu) / nu^2` and `phi'(u) = -u phi(u)`.
///
/// This is an algebraically distinct route from [`posterior_tau_moments`];
/// the two must agree to near machine precision, which the test suite
/// exploits as a cross-check.
pub fn tweedie_posterior_mean(prior: &DiscretePrior, z: f64, nu: f64) -> Result<f64> {
    check_inputs(z, nu)?;
    let terms = log_component_terms(prior, z, nu);
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegeneratePosterior { unit: 0, z, nu });
    }
    // Common scaling exp(max) cancels in f'/f, so both sums are safe.
    let mut f_scaled = 0.0;
    let mut fprime_scaled = 0.0;
    for (&term, &tau) in terms.iter().zip(prior.support()) {
        if term == f64::NEG_INFINITY {
            continue;
        }
        let dens = (term - max).exp();
        let u = (z - tau) / nu;
        f_scaled += dens;
        fprime_scaled += dens * (-u / nu);
    }
    Ok(z + nu * nu * fprime_scaled / f_scaled)
}

/// Full posterior summary for one observed unit under the location-scale
/// map `theta = s * tau + m`: transforms to `z_hat = (y - m)/s`,
/// `nu_hat = sigma/s`, and returns `E[theta^v | .] = sum_k (s tau_k + m)^v
/// * posterior-weight_k` for `v = 1..=max_order`.
pub fn posterior_theta_summary(
    prior: &DiscretePrior,
    unit: &Observation,
    m: f64,
    s: f64,
    max_order: usize,
) -> Result<PosteriorSummary> {
    posterior_theta_summary_indexed(prior, unit, m, s, max_order, 0)
}

/// [`posterior_theta_summary`] with the caller's unit index threaded into
/// any degenerate-posterior error.
pub fn posterior_theta_summary_indexed(
    prior: &DiscretePrior,
    unit: &Observation,
    m: f64,
    s: f64,
    max_order: usize,
    unit_index: usize,
) -> Result<PosteriorSummary> {
    if !(s.is_finite() && s > 0.0) || !m.is_finite() {
        return Err(Error::invalid(format!(
            "location-scale transform requires finite m and s > 0, got m = {m}, s = {s}"
        )));
    }
    if max_order < 1 {
        return Err(Error::invalid("max_order must be at least 1"));
    }
    let z_hat = (unit.y - m) / s;
    let nu_hat = unit.sigma / s;
    let attach_index = |e: Error| match e {
        Error::DegeneratePosterior { z, nu, .. } => Error::DegeneratePosterior {
            unit: unit_index,
            z,
            nu,
        },
        other => other,
    };
    let weights = posterior_weights(prior, z_hat, nu_hat).map_err(attach_index)?;
    let log_f = log_mixture_density(prior, z_hat, nu_hat)?;

    let theta_at: Vec<f64> = prior.support().iter().map(|&t| s * t + m).collect();
    let mut powers: Vec<f64> = vec![1.0; prior.len()];
    let mut moments = Vec::with_capacity(max_order);
    for _ in 0..max_order {
        for (p, &t) in powers.iter_mut().zip(&theta_at) {
            *p *= t;
        }
        moments.push(
            powers
                .iter()
                .zip(&weights)
                .map(|(&tv, &w)| w * tv)
                .sum::<f64>(),
        );
    }
    let mean_tau = prior
        .support()
        .iter()
        .zip(&weights)
        .map(|(&t, &w)| w * t)
        .sum::<f64>();

    Ok(PosteriorSummary {
        posterior_mean_theta: moments[0],
        posterior_moments_theta: moments,
        posterior_mean_tau: mean_tau,
        // Density of y itself: f_Z((y - m)/s) / s.
        log_marginal_density: log_f - s.ln(),
    })
}
