//! Coupled-bootstrap validation: unbiased out-of-sample loss estimation.
//!
//! One Gaussian estimate splits into two conditionally independent draws:
//!
//! ```text
//! y1 = y + sqrt(omega) sigma W,    y2 = y - sigma W / sqrt(omega),
//! ```
//!
//! with `W ~ N(0,1)`, `Var(y1) = (1 + omega) sigma^2`, and
//! `Var(y2) = (1 + 1/omega) sigma^2`. Decisions computed from the first draw
//! can then be scored honestly against the second; `omega = 1/9` emulates a
//! 90-10 train-test split of the underlying micro-data. The scoring
//! estimators are unbiased for the true loss of the decision rule, with
//! plug-in standard errors from their conditional variances.

use crate::data::{Dataset, Observation};
use crate::decisions::{
    select_top_fraction_by_group, select_top_m, select_utility, Decision, Problem,
    SelectionResult,
};
use crate::error::Error;
use crate::methods::{fit_method, posterior_means, FitOptions, MethodTag};
use crate::numeric::mean_and_variance;
use crate::rng::{standard_normal, uniform01, StreamKey};
use crate::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default noise share: statistically equivalent to a 90-10 split.
pub const DEFAULT_OMEGA: f64 = 1.0 / 9.0;

/// The two coupled draws with their variances.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSplit {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub sigma1_sq: Vec<f64>,
    pub sigma2_sq: Vec<f64>,
    pub omega: f64,
    pub seed: u64,
    pub replication: u64,
    /// Covariates carried over from the source data (not secret: they do
    /// not involve `y2`).
    covariates: Option<Vec<Vec<f64>>>,
}

impl CoupledSplit {
    /// The training dataset `(y1, sigma1)` the decision rule may see.
    pub fn first_dataset(&self) -> Dataset {
        self.build_dataset(&self.y1, &self.sigma1_sq)
    }

    /// The held-out dataset `(y2, sigma2)`.
    pub fn second_dataset(&self) -> Dataset {
        self.build_dataset(&self.y2, &self.sigma2_sq)
    }

    fn build_dataset(&self, y: &[f64], s2: &[f64]) -> Dataset {
        let obs = y
            .iter()
            .zip(s2)
            .enumerate()
            .map(|(i, (&yi, &vi))| {
                let mut o = Observation::new(yi, vi.sqrt());
                if let Some(cov) = &self.covariates {
                    o.covariates = Some(cov[i].clone());
                }
                o
            })
            .collect();
        Dataset::new(obs).expect("split datasets inherit validity")
    }
}

/// Draws the coupled bootstrap for `data` using the unit streams of
/// `(seed, replication = 0)`. See [`split_replication`].
pub fn split(data: &Dataset, omega: f64, seed: u64) -> Result<CoupledSplit> {
    split_replication(data, omega, &StreamKey::new(seed), 0)
}

/// Draws the coupled bootstrap with one independent noise stream per
/// `(replication, unit)`, so any replication is reproducible in isolation.
pub fn split_replication(
    data: &Dataset,
    omega: f64,
    key: &StreamKey,
    replication: u64,
) -> Result<CoupledSplit> {
    if !(omega.is_finite() && omega > 0.0) {
        return Err(Error::invalid(format!("omega = {omega} must be positive")));
    }
    let n = data.len();
    let mut y1 = Vec::with_capacity(n);
    let mut y2 = Vec::with_capacity(n);
    let mut s1 = Vec::with_capacity(n);
    let mut s2 = Vec::with_capacity(n);
    let sqrt_omega = omega.sqrt();
    for (i, obs) in data.iter().enumerate() {
        let mut rng = key.stream(replication, i as u64);
        let w = standard_normal(&mut rng);
        y1.push(obs.y + sqrt_omega * obs.sigma * w);
        y2.push(obs.y - obs.sigma * w / sqrt_omega);
        s1.push((1.0 + omega) * obs.sigma * obs.sigma);
        s2.push((1.0 + 1.0 / omega) * obs.sigma * obs.sigma);
    }
    Ok(CoupledSplit {
        y1,
        y2,
        sigma1_sq: s1,
        sigma2_sq: s2,
        omega,
        seed: key.seed(),
        replication,
        covariates: data.covariate_rows().map(|rows| {
            rows.into_iter().map(|r| r.to_vec()).collect()
        }),
    })
}

/// An unbiased loss estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub problem: Problem,
    pub estimate: f64,
    pub std_error: f64,
    pub replications: usize,
}

/// Scores a decision rule out of sample. The rule sees only the first-split
/// dataset — the API hands the callback `(y1, sigma1)` and nothing else —
/// and the estimate uses `y2` per the unbiased-estimator table:
///
/// * mse: `T = (1/n) sum (y2_i - delta_i)^2 - sigma2_i^2`, standard error
///   from the empirical variance of the per-unit summands;
/// * utilmax: `T = -(1/n) sum delta_i y2_i`, variance
///   `(1/n^2) sum delta_i sigma2_i^2`;
/// * topm: `T = -(1/m) sum delta_i y2_i`, variance
///   `(1/m^2) sum delta_i sigma2_i^2`.
pub fn unbiased_loss<F>(problem: Problem, split: &CoupledSplit, decide: F) -> Result<LossReport>
where
    F: FnOnce(&Dataset) -> Result<Decision>,
{
    let action = decide(&split.first_dataset())?;
    score_action(problem, split, &action)
}

/// Scores an already-computed action against the held-out draw.
pub fn score_action(
    problem: Problem,
    split: &CoupledSplit,
    action: &Decision,
) -> Result<LossReport> {
    let n = split.y2.len();
    let (estimate, std_error) = match (problem, action) {
        (Problem::Mse, Decision::Estimates(delta)) => {
            if delta.len() != n {
                return Err(Error::invalid(format!(
                    "decision has {} estimates for {} units",
                    delta.len(),
                    n
                )));
            }
            let summands: Vec<f64> = split
                .y2
                .iter()
                .zip(delta)
                .zip(&split.sigma2_sq)
                .map(|((&y2, &d), &v2)| (y2 - d) * (y2 - d) - v2)
                .collect();
            let (mean, var) = mean_and_variance(&summands);
            (mean, (var / n as f64).sqrt())
        }
        (Problem::Utilmax, Decision::Selection(sel)) => {
            selection_estimate(&split.y2, &split.sigma2_sq, sel, n)?
        }
        (Problem::Topm, Decision::Selection(sel)) => {
            let m = sel
                .m
                .ok_or_else(|| Error::invalid("top-m scoring requires the selection budget"))?;
            selection_estimate(&split.y2, &split.sigma2_sq, sel, m)?
        }
        _ => {
            return Err(Error::invalid(
                "decision shape does not match the problem",
            ))
        }
    };
    Ok(LossReport {
        problem,
        estimate,
        std_error,
        replications: 1,
    })
}

fn selection_estimate(
    y2: &[f64],
    sigma2_sq: &[f64],
    sel: &SelectionResult,
    denom: usize,
) -> Result<(f64, f64)> {
    if sel.selected.len() != y2.len() {
        return Err(Error::invalid(format!(
            "selection has {} entries for {} units",
            sel.selected.len(),
            y2.len()
        )));
    }
    let mut total = 0.0;
    let mut var = 0.0;
    for ((&s, &y), &v) in sel.selected.iter().zip(y2).zip(sigma2_sq) {
        if s {
            total += y;
            var += v;
        }
    }
    let d = denom as f64;
    Ok((-total / d, (var / (d * d)).sqrt()))
}

/// How the top-m budget is chosen in [`compare_methods`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TopMRule {
    Count(usize),
    Fraction(f64),
    GroupedFraction { fraction: f64, groups: Vec<String> },
}

impl Default for TopMRule {
    fn default() -> Self {
        // Top third, the selection rule used for place-based assistance.
        TopMRule::Fraction(1.0 / 3.0)
    }
}

/// Options for [`compare_methods`].
#[derive(Debug, Clone)]
pub struct ValidationOptions {
    pub omega: f64,
    pub replications: usize,
    pub seed: u64,
    pub fit: FitOptions,
    pub topm: TopMRule,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            omega: DEFAULT_OMEGA,
            replications: 100,
            seed: 0,
            fit: FitOptions::default(),
            topm: TopMRule::default(),
        }
    }
}

/// One row of the method-comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub method: String,
    pub problem: Problem,
    /// Mean unbiased loss estimate across replications.
    pub estimate: f64,
    /// Monte Carlo standard error of the mean across replications.
    pub std_error: f64,
    /// Paired mean difference versus the naive decision, with its standard
    /// error (absent when the method itself is naive).
    pub diff_vs_naive: Option<(f64, f64)>,
    /// Paired mean difference versus a uniform-random selection of the same
    /// size (selection problems only).
    pub diff_vs_random: Option<(f64, f64)>,
    pub replications_used: usize,
    pub fit_failures: usize,
}

fn decide(
    problem: Problem,
    theta_hat: &[f64],
    rule: &TopMRule,
) -> Result<Decision> {
    match problem {
        Problem::Mse => Ok(Decision::Estimates(theta_hat.to_vec())),
        Problem::Utilmax => Ok(Decision::Selection(select_utility(theta_hat)?)),
        Problem::Topm => {
            let sel = match rule {
                TopMRule::Count(m) => select_top_m(theta_hat, *m)?,
                TopMRule::Fraction(f) => {
                    let n = theta_hat.len();
                    let m = ((f * n as f64).ceil() as usize).clamp(1, n);
                    select_top_m(theta_hat, m)?
                }
                TopMRule::GroupedFraction { fraction, groups } => {
                    select_top_fraction_by_group(theta_hat, groups, *fraction)?
                }
            };
            Ok(Decision::Selection(sel))
        }
    }
}

/// Uniform-random selection baseline of the same size as the rule's budget.
fn random_decision(
    problem: Problem,
    n: usize,
    rule: &TopMRule,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Option<Decision> {
    match problem {
        Problem::Mse => None,
        Problem::Utilmax => {
            let selected: Vec<bool> = (0..n).map(|_| uniform01(rng) < 0.5).collect();
            Some(Decision::Selection(SelectionResult { selected, m: None }))
        }
        Problem::Topm => {
            // Random scores through the same selection rule keep budgets and
            // grouping identical to the method decisions.
            let scores: Vec<f64> = (0..n).map(|_| uniform01(rng)).collect();
            decide(problem, &scores, rule).ok()
        }
    }
}

/// Fits every method on the first split, scores its decisions on the second,
/// and aggregates across replications. Naive and a uniform-random selection
/// are always evaluated internally as comparison baselines. Per-replication
/// fit failures are recorded and the affected replication skipped for that
/// method only.
pub fn compare_methods(
    data: &Dataset,
    methods: &[MethodTag],
    problem: Problem,
    opts: &ValidationOptions,
) -> Result<Vec<MethodComparison>> {
    if opts.replications < 1 {
        return Err(Error::invalid("replications must be at least 1"));
    }
    let key = StreamKey::new(opts.seed);
    let n = data.len();

    struct RepOutcome {
        per_method: Vec<Option<f64>>,
        naive: f64,
        random: Option<f64>,
    }

    let reps: Vec<Result<RepOutcome>> = (0..opts.replications as u64)
        .into_par_iter()
        .map(|rep| -> Result<RepOutcome> {
            let split = split_replication(data, opts.omega, &key, rep)?;
            let ds1 = split.first_dataset();

            let naive_means = ds1.y();
            let naive_action = decide(problem, &naive_means, &opts.topm)?;
            let naive_t = score_action(problem, &split, &naive_action)?.estimate;

            let random = {
                let mut rng = key.replication_stream(rep);
                random_decision(problem, n, &opts.topm, &mut rng)
                    .map(|action| score_action(problem, &split, &action).map(|r| r.estimate))
                    .transpose()?
            };

            let mut per_method = Vec::with_capacity(methods.len());
            for &tag in methods {
                let outcome = fit_method(&ds1, tag, &opts.fit)
                    .and_then(|model| posterior_means(&model, &ds1, false))
                    .and_then(|means| decide(problem, &means, &opts.topm))
                    .and_then(|action| score_action(problem, &split, &action));
                per_method.push(outcome.ok().map(|r| r.estimate));
            }
            Ok(RepOutcome {
                per_method,
                naive: naive_t,
                random,
            })
        })
        .collect();
    let reps: Vec<RepOutcome> = reps.into_iter().collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(methods.len());
    for (j, &tag) in methods.iter().enumerate() {
        let mut ts = Vec::new();
        let mut diffs_naive = Vec::new();
        let mut diffs_random = Vec::new();
        let mut failures = 0usize;
        for rep in &reps {
            match rep.per_method[j] {
                Some(t) => {
                    ts.push(t);
                    diffs_naive.push(t - rep.naive);
                    if let Some(r) = rep.random {
                        diffs_random.push(t - r);
                    }
                }
                None => failures += 1,
            }
        }
        let used = ts.len();
        let (estimate, std_error) = mean_and_se(&ts);
        let diff_vs_naive = if tag == MethodTag::Naive || used == 0 {
            None
        } else {
            Some(mean_and_se(&diffs_naive))
        };
        let diff_vs_random = if diffs_random.is_empty() {
            None
        } else {
            Some(mean_and_se(&diffs_random))
        };
        rows.push(MethodComparison {
            method: tag.to_string(),
            problem,
            estimate,
            std_error,
            diff_vs_naive,
            diff_vs_random,
            replications_used: used,
            fit_failures: failures,
        });
    }
    Ok(rows)
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let (mean, var) = mean_and_variance(values);
    (mean, (var / values.len() as f64).sqrt())
}
