//! End-to-end estimator pipelines.
//!
//! Five methods share one interface: fit on a dataset, then produce
//! posterior summaries per unit.
//!
//! * `naive` — no shrinkage, the point estimates themselves.
//! * `independent_gauss` — Gaussian prior with a precision-weighted global
//!   mean and method-of-moments variance; constant shrinkage target.
//! * `independent_npmle` — NPMLE prior on the raw `y` scale.
//! * `close_gauss` — Gaussian shrinkage toward the conditional mean
//!   `m(sigma)` with conditional variance `s^2(sigma)`.
//! * `close_npmle` — NPMLE prior for the standardized parameter after the
//!   location-scale transform `z = (y - m(sigma))/s(sigma)`,
//!   `nu = sigma/s(sigma)`.
//!
//! When covariates are present, `y` is first residualized against them by
//! weighted least squares and the fitted index `x'beta` is added back to
//! posterior means at the end.

use crate::data::Dataset;
use crate::error::Error;
use crate::npmle::{GridSpec, NpmleFit, SolverOptions};
use crate::nuisance::{fit_nuisance, NuisanceFit, NuisanceOptions};
use crate::numeric::{linspace, LN_2PI};
use crate::posterior::{posterior_theta_summary_indexed, PosteriorSummary};
use crate::prior::DiscretePrior;
use crate::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// The estimator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Naive,
    IndependentGauss,
    IndependentNpmle,
    CloseGauss,
    CloseNpmle,
}

impl MethodTag {
    pub const ALL: [MethodTag; 5] = [
        MethodTag::Naive,
        MethodTag::IndependentGauss,
        MethodTag::IndependentNpmle,
        MethodTag::CloseGauss,
        MethodTag::CloseNpmle,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodTag::Naive => "naive",
            MethodTag::IndependentGauss => "independent_gauss",
            MethodTag::IndependentNpmle => "independent_npmle",
            MethodTag::CloseGauss => "close_gauss",
            MethodTag::CloseNpmle => "close_npmle",
        }
    }
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MethodTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodTag::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown method '{s}' (expected one of naive, independent_gauss, \
                     independent_npmle, close_gauss, close_npmle)"
                ))
            })
    }
}

/// Global prior moments for `independent_gauss`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalMoments {
    pub mean: f64,
    /// Non-negative by construction (positive-part truncation).
    pub variance: f64,
}

/// Certificate carried over from an NPMLE fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NpmleCertificate {
    pub loglik: f64,
    pub gap: f64,
    pub kappa_n: f64,
}

/// Conditional-moment functions in either fitted or portable form.
#[derive(Debug, Clone)]
pub enum NuisanceEval {
    Fitted(NuisanceFit),
    Interpolated(InterpolatedNuisance),
}

impl NuisanceEval {
    pub fn m_hat(&self, sigma: f64) -> f64 {
        match self {
            NuisanceEval::Fitted(f) => f.m_hat(sigma),
            NuisanceEval::Interpolated(f) => f.m_hat(sigma),
        }
    }

    pub fn s_hat(&self, sigma: f64) -> f64 {
        match self {
            NuisanceEval::Fitted(f) => f.s_hat(sigma),
            NuisanceEval::Interpolated(f) => f.s_hat(sigma),
        }
    }
}

/// Nuisance functions tabulated on a log-spaced sigma grid, linearly
/// interpolated in `log10 sigma` and clamped outside the grid. This is the
/// portable (serialized) representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpolatedNuisance {
    /// log10 of the sigma grid, ascending.
    log_sigma: Vec<f64>,
    m_values: Vec<f64>,
    s_values: Vec<f64>,
}

/// Number of tabulation points used when serializing a nuisance fit.
const PORTABLE_GRID_POINTS: usize = 512;

impl InterpolatedNuisance {
    fn from_fit(fit: &NuisanceFit, sigma_lo: f64, sigma_hi: f64) -> Self {
        let log_sigma = if sigma_lo == sigma_hi {
            vec![sigma_lo.log10()]
        } else {
            linspace(sigma_lo.log10(), sigma_hi.log10(), PORTABLE_GRID_POINTS)
        };
        let m_values = log_sigma
            .iter()
            .map(|&t| fit.m_hat(10f64.powf(t)))
            .collect();
        let s_values = log_sigma
            .iter()
            .map(|&t| fit.s_hat(10f64.powf(t)))
            .collect();
        InterpolatedNuisance {
            log_sigma,
            m_values,
            s_values,
        }
    }

    fn interp(&self, values: &[f64], sigma: f64) -> f64 {
        let t = sigma.log10();
        let grid = &self.log_sigma;
        if grid.len() == 1 || t <= grid[0] {
            return values[0];
        }
        if t >= *grid.last().unwrap() {
            return *values.last().unwrap();
        }
        let hi = grid.partition_point(|&g| g <= t);
        let (g0, g1) = (grid[hi - 1], grid[hi]);
        let w = (t - g0) / (g1 - g0);
        values[hi - 1] * (1.0 - w) + values[hi] * w
    }

    pub fn m_hat(&self, sigma: f64) -> f64 {
        self.interp(&self.m_values, sigma)
    }

    pub fn s_hat(&self, sigma: f64) -> f64 {
        self.interp(&self.s_values, sigma)
    }
}

/// A fitted estimator, able to produce posterior summaries for the dataset
/// it was fitted on (or, with an explicit override, any other dataset).
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub tag: MethodTag,
    pub nuisance: Option<NuisanceEval>,
    pub prior: Option<DiscretePrior>,
    pub npmle_certificate: Option<NpmleCertificate>,
    pub global_moments: Option<GlobalMoments>,
    /// WLS coefficients on `[1, X]` when the data carried covariates.
    pub beta: Option<Vec<f64>>,
    pub dataset_fingerprint: String,
    /// Sigma range of the fitting data, used for portable serialization.
    pub sigma_range: (f64, f64),
}

/// Options shared by all fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Grid override for NPMLE methods. Default: the standard grid for
    /// `close_npmle`, rescaled to the data for `independent_npmle`.
    pub grid: Option<GridSpec>,
    pub solver: SolverOptions,
    pub nuisance: NuisanceOptions,
    /// Residualize against covariates when present.
    pub residualize: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            grid: None,
            solver: SolverOptions::default(),
            nuisance: NuisanceOptions::default(),
            residualize: true,
        }
    }
}

/// Weighted least squares of `y` on `[1, X]` with weights `1/sigma^2`.
/// Returns the residual dataset `(y - [1, x]'beta, sigma)` and `beta`
/// (intercept first). Estimation noise in `beta` is ignored downstream.
pub fn residualize(data: &Dataset) -> Result<(Dataset, Vec<f64>)> {
    let rows = data
        .covariate_rows()
        .ok_or_else(|| Error::invalid("residualize requires covariates"))?;
    let d = rows[0].len();
    let p = d + 1;
    let mut gram = vec![vec![0.0; p]; p];
    let mut rhs = vec![0.0; p];
    for (obs, x) in data.iter().zip(&rows) {
        let w = 1.0 / (obs.sigma * obs.sigma);
        let mut design = Vec::with_capacity(p);
        design.push(1.0);
        design.extend_from_slice(x);
        for r in 0..p {
            for c in 0..p {
                gram[r][c] += w * design[r] * design[c];
            }
            rhs[r] += w * design[r] * obs.y;
        }
    }
    let beta = solve_wls(&mut gram, &mut rhs)?;
    let residuals: Vec<_> = data
        .iter()
        .zip(&rows)
        .map(|(obs, x)| {
            let fitted = beta[0]
                + x.iter()
                    .zip(&beta[1..])
                    .map(|(&xi, &bi)| xi * bi)
                    .sum::<f64>();
            crate::data::Observation::new(obs.y - fitted, obs.sigma)
        })
        .collect();
    Ok((Dataset::new(residuals)?, beta))
}

fn solve_wls(gram: &mut [Vec<f64>], rhs: &mut [f64]) -> Result<Vec<f64>> {
    crate::numeric::solve_spd(gram, rhs, 1e-10).map_err(|column| Error::RankDeficient {
        // Column 0 is the intercept; report in caller terms.
        column,
    })
}

/// The linear index `beta[0] + x'beta[1..]` per unit, or zeros when the
/// model has no covariate adjustment.
fn offsets(model: &FittedModel, data: &Dataset) -> Result<Vec<f64>> {
    match &model.beta {
        None => Ok(vec![0.0; data.len()]),
        Some(beta) => {
            let rows = data.covariate_rows().ok_or_else(|| {
                Error::invalid("model was fitted with covariates but dataset has none")
            })?;
            if rows[0].len() + 1 != beta.len() {
                return Err(Error::invalid(format!(
                    "model expects {} covariates, dataset has {}",
                    beta.len() - 1,
                    rows[0].len()
                )));
            }
            Ok(rows
                .iter()
                .map(|x| {
                    beta[0]
                        + x.iter()
                            .zip(&beta[1..])
                            .map(|(&xi, &bi)| xi * bi)
                            .sum::<f64>()
                })
                .collect())
        }
    }
}

/// Fits a method to a dataset.
pub fn fit_method(data: &Dataset, tag: MethodTag, opts: &FitOptions) -> Result<FittedModel> {
    let n = data.len();
    match tag {
        MethodTag::IndependentNpmle | MethodTag::CloseNpmle if n < 7 => {
            return Err(Error::invalid(format!(
                "{tag} needs n >= 7 for the approximate-maximizer tolerance, got {n}"
            )));
        }
        MethodTag::CloseGauss | MethodTag::CloseNpmle if n < 10 => {
            return Err(Error::invalid(format!(
                "{tag} needs n >= 10 for nuisance estimation, got {n}"
            )));
        }
        _ => {}
    }

    let fingerprint = data.fingerprint();
    let sigmas = data.sigma();
    let sigma_range = (
        sigmas.iter().copied().fold(f64::INFINITY, f64::min),
        sigmas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );

    let mut beta = None;
    let work: Dataset = if tag != MethodTag::Naive
        && opts.residualize
        && data.covariate_dim().is_some()
    {
        let (resid, b) = residualize(data)?;
        beta = Some(b);
        resid
    } else {
        data.clone()
    };

    let mut model = FittedModel {
        tag,
        nuisance: None,
        prior: None,
        npmle_certificate: None,
        global_moments: None,
        beta,
        dataset_fingerprint: fingerprint,
        sigma_range,
    };

    match tag {
        MethodTag::Naive => {}
        MethodTag::IndependentGauss => {
            let mut wsum = 0.0;
            let mut wy = 0.0;
            for obs in work.iter() {
                let w = 1.0 / (obs.sigma * obs.sigma);
                wsum += w;
                wy += w * obs.y;
            }
            let mean = wy / wsum;
            let mut wmom = 0.0;
            for obs in work.iter() {
                let w = 1.0 / (obs.sigma * obs.sigma);
                let dev = obs.y - mean;
                wmom += w * (dev * dev - obs.sigma * obs.sigma);
            }
            model.global_moments = Some(GlobalMoments {
                mean,
                variance: (wmom / wsum).max(0.0),
            });
        }
        MethodTag::IndependentNpmle => {
            let y = work.y();
            let grid = opts
                .grid
                .clone()
                .unwrap_or_else(|| GridSpec::rescaled_to(&y));
            let fit = run_npmle(&y, &work.sigma(), &grid, &opts.solver)?;
            model.npmle_certificate = Some(NpmleCertificate {
                loglik: fit.loglik,
                gap: fit.gap_certificate,
                kappa_n: fit.kappa_n,
            });
            model.prior = Some(fit.prior);
        }
        MethodTag::CloseGauss => {
            model.nuisance = Some(NuisanceEval::Fitted(fit_nuisance(&work, &opts.nuisance)?));
        }
        MethodTag::CloseNpmle => {
            let nuisance = fit_nuisance(&work, &opts.nuisance)?;
            let params = nuisance.transform_parameters(&work);
            let mut z = Vec::with_capacity(n);
            let mut nu = Vec::with_capacity(n);
            for (obs, &(m, s)) in work.iter().zip(&params) {
                z.push((obs.y - m) / s);
                nu.push(obs.sigma / s);
            }
            let grid = opts.grid.clone().unwrap_or_default();
            let fit = run_npmle(&z, &nu, &grid, &opts.solver)?;
            model.npmle_certificate = Some(NpmleCertificate {
                loglik: fit.loglik,
                gap: fit.gap_certificate,
                kappa_n: fit.kappa_n,
            });
            model.prior = Some(fit.prior);
            model.nuisance = Some(NuisanceEval::Fitted(nuisance));
        }
    }
    Ok(model)
}

/// Runs the NPMLE, accepting a cap-limited iterate when it still meets the
/// approximate-maximizer tolerance `kappa_n` (the contract the downstream
/// theory needs). Anything worse propagates as an error.
fn run_npmle(
    z: &[f64],
    nu: &[f64],
    grid: &GridSpec,
    solver: &SolverOptions,
) -> Result<NpmleFit> {
    match crate::npmle::fit(z, nu, grid, solver) {
        Ok(fit) => Ok(fit),
        Err(Error::NpmleDidNotConverge { best, .. })
            if best.kappa_n > 0.0 && best.gap_certificate <= best.kappa_n =>
        {
            Ok(*best)
        }
        Err(e) => Err(e),
    }
}

/// Gaussian posterior moments `E[(mu + sd Z)^v]` for `v = 1..=max_order`.
fn gaussian_moments(mu: f64, var: f64, max_order: usize) -> Vec<f64> {
    // Recursion M_v = mu M_{v-1} + (v-1) var M_{v-2}, M_0 = 1.
    let mut out = Vec::with_capacity(max_order);
    let mut prev2 = 1.0;
    let mut prev1 = mu;
    out.push(mu);
    for v in 2..=max_order {
        let cur = mu * prev1 + (v - 1) as f64 * var * prev2;
        out.push(cur);
        prev2 = prev1;
        prev1 = cur;
    }
    out
}

/// Posterior summary under the conjugate Gaussian prior
/// `theta_resid ~ N(m, s2)` for the residualized observation `y - off`:
/// mean `(sigma^2 m + s2 (y - off)) / (s2 + sigma^2) + off`, variance
/// `s2 sigma^2 / (s2 + sigma^2)`.
pub(crate) fn gaussian_posterior_summary(
    m: f64,
    s2: f64,
    obs: &crate::data::Observation,
    off: f64,
    max_order: usize,
) -> PosteriorSummary {
    let y = obs.y - off;
    let s2s = obs.sigma * obs.sigma;
    let weight = s2 / (s2 + s2s);
    let mean_resid = (1.0 - weight) * m + weight * y;
    let var = s2 * s2s / (s2 + s2s);
    let mean = mean_resid + off;
    let moments = gaussian_moments(mean, var, max_order);
    let mean_tau = if s2 > 0.0 {
        (mean_resid - m) / s2.sqrt()
    } else {
        0.0
    };
    let total_var = s2 + s2s;
    let dev = y - m;
    PosteriorSummary {
        posterior_mean_theta: mean,
        posterior_moments_theta: moments,
        posterior_mean_tau: mean_tau,
        log_marginal_density: -0.5 * (LN_2PI + total_var.ln() + dev * dev / total_var),
    }
}

/// Posterior summaries for every unit, in unit order.
///
/// `allow_out_of_sample` lifts the fingerprint guard so a model can score a
/// dataset other than the one it was fitted on (the validation module
/// depends on this for its information barrier).
pub fn posterior(
    model: &FittedModel,
    data: &Dataset,
    max_order: usize,
    allow_out_of_sample: bool,
) -> Result<Vec<PosteriorSummary>> {
    if max_order < 1 {
        return Err(Error::invalid("max_order must be at least 1"));
    }
    if !allow_out_of_sample {
        let actual = data.fingerprint();
        if actual != model.dataset_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: model.dataset_fingerprint.clone(),
                actual,
            });
        }
    }
    let offs = offsets(model, data)?;

    let summaries: Result<Vec<PosteriorSummary>> = data
        .observations()
        .par_iter()
        .enumerate()
        .map(|(i, obs)| -> Result<PosteriorSummary> {
            let off = offs[i];
            match model.tag {
                MethodTag::Naive => {
                    let mut moments = Vec::with_capacity(max_order);
                    let mut p = 1.0;
                    for _ in 0..max_order {
                        p *= obs.y;
                        moments.push(p);
                    }
                    Ok(PosteriorSummary {
                        posterior_mean_theta: obs.y,
                        posterior_moments_theta: moments,
                        posterior_mean_tau: f64::NAN,
                        log_marginal_density: f64::NAN,
                    })
                }
                MethodTag::IndependentGauss => {
                    let gm = model
                        .global_moments
                        .ok_or_else(|| Error::invalid("model is missing global moments"))?;
                    Ok(gaussian_posterior_summary(gm.mean, gm.variance, obs, off, max_order))
                }
                MethodTag::CloseGauss => {
                    let nuisance = model
                        .nuisance
                        .as_ref()
                        .ok_or_else(|| Error::invalid("model is missing a nuisance fit"))?;
                    let m = nuisance.m_hat(obs.sigma);
                    let s = nuisance.s_hat(obs.sigma);
                    Ok(gaussian_posterior_summary(m, s * s, obs, off, max_order))
                }
                MethodTag::IndependentNpmle => {
                    let prior = model
                        .prior
                        .as_ref()
                        .ok_or_else(|| Error::invalid("model is missing a prior"))?;
                    posterior_theta_summary_indexed(prior, obs, off, 1.0, max_order, i)
                }
                MethodTag::CloseNpmle => {
                    let prior = model
                        .prior
                        .as_ref()
                        .ok_or_else(|| Error::invalid("model is missing a prior"))?;
                    let nuisance = model
                        .nuisance
                        .as_ref()
                        .ok_or_else(|| Error::invalid("model is missing a nuisance fit"))?;
                    let m = nuisance.m_hat(obs.sigma);
                    let s = nuisance.s_hat(obs.sigma);
                    posterior_theta_summary_indexed(prior, obs, m + off, s, max_order, i)
                }
            }
        })
        .collect();
    summaries
}

/// Posterior means only.
pub fn posterior_means(
    model: &FittedModel,
    data: &Dataset,
    allow_out_of_sample: bool,
) -> Result<Vec<f64>> {
    Ok(posterior(model, data, 1, allow_out_of_sample)?
        .into_iter()
        .map(|s| s.posterior_mean_theta)
        .collect())
}

/// Convenience: fit and summarize in one call.
pub fn fit_and_posterior(
    data: &Dataset,
    tag: MethodTag,
    opts: &FitOptions,
    max_order: usize,
) -> Result<(FittedModel, Vec<PosteriorSummary>)> {
    let model = fit_method(data, tag, opts)?;
    let summaries = posterior(&model, data, max_order, false)?;
    Ok((model, summaries))
}

// --- Portable serialization -------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PortablePrior {
    support: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PortableModel {
    method: String,
    dataset_fingerprint: String,
    sigma_range: (f64, f64),
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    global_moments: Option<GlobalMoments>,
    #[serde(skip_serializing_if = "Option::is_none")]
    prior: Option<PortablePrior>,
    #[serde(skip_serializing_if = "Option::is_none")]
    npmle_certificate: Option<NpmleCertificate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nuisance: Option<InterpolatedNuisance>,
}

impl FittedModel {
    /// Serializes to JSON. Nuisance functions are tabulated on a 512-point
    /// log-spaced sigma grid spanning the fitting data, so the file is
    /// portable without the original dataset.
    pub fn to_json(&self) -> String {
        let nuisance = self.nuisance.as_ref().map(|n| match n {
            NuisanceEval::Fitted(f) => {
                InterpolatedNuisance::from_fit(f, self.sigma_range.0, self.sigma_range.1)
            }
            NuisanceEval::Interpolated(f) => f.clone(),
        });
        let portable = PortableModel {
            method: self.tag.to_string(),
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            sigma_range: self.sigma_range,
            beta: self.beta.clone(),
            global_moments: self.global_moments,
            prior: self.prior.as_ref().map(|p| PortablePrior {
                support: p.support().to_vec(),
                weights: p.weights().to_vec(),
            }),
            npmle_certificate: self.npmle_certificate,
            nuisance,
        };
        serde_json::to_string_pretty(&portable).expect("model serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let raw: PortableModel =
            serde_json::from_str(json).map_err(|e| Error::invalid(format!("model JSON: {e}")))?;
        let tag: MethodTag = raw.method.parse()?;
        Ok(FittedModel {
            tag,
            nuisance: raw.nuisance.map(NuisanceEval::Interpolated),
            prior: match raw.prior {
                Some(p) => Some(DiscretePrior::new(p.support, p.weights)?),
                None => None,
            },
            npmle_certificate: raw.npmle_certificate,
            global_moments: raw.global_moments,
            beta: raw.beta,
            dataset_fingerprint: raw.dataset_fingerprint,
            sigma_range: raw.sigma_range,
        })
    }
}
