//! Nonparametric maximum likelihood for the mixing distribution on a fixed
//! grid.
//!
//! Given transformed data `(z_i, nu_i)` with `z_i | tau_i ~ N(tau_i, nu_i^2)`
//! and `tau_i ~ G`, we maximize the average marginal log-likelihood
//!
//! ```text
//! J(w) = (1/n) sum_i log sum_k w_k phi((z_i - tau_k)/nu_i) / nu_i
//! ```
//!
//! over the simplex of weights `w` on a fixed support grid. The solver is an
//! EM fixed-point on the weights (`w_k <- w_k * D_k` with
//! `D_k = (1/n) sum_i phi_ik / (nu_i f_i)`) interleaved with pairwise
//! vertex-exchange steps: mass moves from the active support point with the
//! smallest directional derivative to the grid point with the largest, with
//! an exact line search. Both steps are monotone in `J`.
//!
//! Convergence is certified, not assumed: since `J` is concave on the
//! simplex and `sum_k w_k D_k = 1`, every candidate `H` on the grid obeys
//! `J(H) - J(w) <= max_k D_k - 1`. That directional-derivative bound is the
//! `gap_certificate`, and the fit stops once it falls below
//! `min(kappa_n, tolerance)` where `kappa_n = (2/n) log(n / (sqrt(2 pi) e))`
//! is the approximate-maximizer tolerance.

use crate::error::Error;
use crate::numeric::{chunked_mean, linspace, LN_2PI};
use crate::prior::DiscretePrior;
use crate::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Support-grid construction parameters: a fine grid on a fixed central
/// window plus a coarse grid on whatever part of the data range falls
/// outside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub fine_lo: f64,
    pub fine_hi: f64,
    pub fine_count: usize,
    pub coarse_count: usize,
}

impl Default for GridSpec {
    /// 400 fine points on `[-6, 6]` and 100 coarse tail points. The central
    /// window presumes standardized data with a mean-zero unit-variance
    /// mixing distribution.
    fn default() -> Self {
        GridSpec {
            fine_lo: -6.0,
            fine_hi: 6.0,
            fine_count: 400,
            coarse_count: 100,
        }
    }
}

impl GridSpec {
    /// The default spec with the fine window recentered to
    /// `[mean - 6 sd, mean + 6 sd]` of the supplied data, for fitting on an
    /// unstandardized scale.
    pub fn rescaled_to(data: &[f64]) -> Self {
        let (mean, var) = crate::numeric::mean_and_variance(data);
        let sd = var.sqrt();
        GridSpec {
            fine_lo: mean - 6.0 * sd,
            fine_hi: mean + 6.0 * sd,
            ..GridSpec::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.fine_lo.is_finite() && self.fine_hi.is_finite() && self.fine_lo <= self.fine_hi)
        {
            return Err(Error::invalid(format!(
                "grid window [{}, {}] is invalid",
                self.fine_lo, self.fine_hi
            )));
        }
        if self.fine_count < 1 || self.coarse_count < 1 {
            return Err(Error::invalid("grid counts must be at least 1"));
        }
        Ok(())
    }
}

/// Solver controls for [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Iteration cap over EM and exchange steps combined.
    pub max_iterations: usize,
    /// User gap tolerance; the effective stopping gap is
    /// `min(kappa_n, tolerance)` when `kappa_n > 0`, else `tolerance`.
    pub tolerance: f64,
    /// EM steps between consecutive vertex-exchange steps.
    pub em_steps_per_round: usize,
    /// Record the average log-likelihood after every step.
    pub track_history: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 100_000,
            tolerance: 1e-9,
            em_steps_per_round: 4,
            track_history: false,
        }
    }
}

/// A fitted mixing distribution with its optimality certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct NpmleFit {
    pub prior: DiscretePrior,
    /// Average per-unit log-likelihood at the fitted weights.
    pub loglik: f64,
    pub iterations: usize,
    /// Upper bound on `sup_H J(H) - J(w)` over all priors `H` on the grid.
    pub gap_certificate: f64,
    /// `(2/n) log(n / (sqrt(2 pi) e))`; negative for `n < 7`.
    pub kappa_n: f64,
    /// Set when `n < 7`, where `kappa_n` is non-positive and the fit falls
    /// back to the user tolerance alone.
    pub small_n_warning: bool,
    /// Average log-likelihood after each step, when requested.
    pub loglik_history: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PriorJson {
    support: Vec<f64>,
    weights: Vec<f64>,
    loglik: f64,
    gap: f64,
    kappa_n: f64,
}

impl NpmleFit {
    /// Serializes as `{"support", "weights", "loglik", "gap", "kappa_n"}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&PriorJson {
            support: self.prior.support().to_vec(),
            weights: self.prior.weights().to_vec(),
            loglik: self.loglik,
            gap: self.gap_certificate,
            kappa_n: self.kappa_n,
        })
        .expect("prior serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let raw: PriorJson = serde_json::from_str(json)
            .map_err(|e| Error::invalid(format!("prior JSON: {e}")))?;
        Ok(NpmleFit {
            prior: DiscretePrior::new(raw.support, raw.weights)?,
            loglik: raw.loglik,
            iterations: 0,
            gap_certificate: raw.gap,
            kappa_n: raw.kappa_n,
            small_n_warning: false,
            loglik_history: None,
        })
    }
}

/// The approximate-maximizer tolerance `(2/n) log(n / (sqrt(2 pi) e))`.
pub fn kappa_n(n: usize) -> f64 {
    let n = n as f64;
    (2.0 / n) * (n / ((2.0 * std::f64::consts::PI).sqrt() * std::f64::consts::E)).ln()
}

/// Builds the support grid for data `z`: `fine_count` equally spaced points
/// on the fine window intersected with the data range, plus `coarse_count`
/// points distributed over the parts of the data range outside the window
/// (proportionally to their lengths), deduplicated and sorted. When the data
/// range sits inside the window the result is simply `fine_count` points on
/// `[min z, max z]`.
pub fn build_grid(z: &[f64], spec: &GridSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if z.is_empty() {
        return Err(Error::invalid("cannot build a grid from empty data"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("grid data must be finite"));
    }
    let zmin = z.iter().copied().fold(f64::INFINITY, f64::min);
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if zmin == zmax {
        return Ok(vec![zmin]);
    }

    let mut grid = Vec::new();
    let lo = spec.fine_lo.max(zmin);
    let hi = spec.fine_hi.min(zmax);
    if lo <= hi {
        grid.extend(linspace(lo, hi, spec.fine_count));
    }

    let left_len = (spec.fine_lo - zmin).max(0.0);
    let right_len = (zmax - spec.fine_hi).max(0.0);
    if left_len > 0.0 || right_len > 0.0 {
        let total = left_len + right_len;
        let n_left = ((spec.coarse_count as f64) * left_len / total).round() as usize;
        let n_right = spec.coarse_count - n_left;
        if n_left > 0 {
            let upper = spec.fine_lo.min(zmax);
            if upper == zmax && lo > hi {
                // Fine window entirely right of the data: tail covers it all.
                grid.extend(linspace(zmin, zmax, n_left));
            } else {
                // Exclude the window edge, which belongs to the fine grid.
                let pts = linspace(zmin, upper, n_left + 1);
                grid.extend_from_slice(&pts[..n_left]);
            }
        }
        if n_right > 0 {
            let lower = spec.fine_hi.max(zmin);
            if lower == zmin && lo > hi {
                grid.extend(linspace(zmin, zmax, n_right));
            } else {
                let pts = linspace(lower, zmax, n_right + 1);
                grid.extend_from_slice(&pts[1..]);
            }
        }
    }

    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

/// Average log-likelihood `(1/n) sum_i log f_{prior, nu_i}(z_i)` with a
/// deterministic summation order. Returns `-inf` when any unit's density
/// underflows; [`loglik_with_underflows`] names the offending units.
pub fn loglik(prior: &DiscretePrior, z: &[f64], nu: &[f64]) -> Result<f64> {
    Ok(loglik_with_underflows(prior, z, nu)?.0)
}

/// As [`loglik`], also returning the indices of units whose marginal density
/// underflowed to zero.
pub fn loglik_with_underflows(
    prior: &DiscretePrior,
    z: &[f64],
    nu: &[f64],
) -> Result<(f64, Vec<usize>)> {
    if z.len() != nu.len() || z.is_empty() {
        return Err(Error::invalid(format!(
            "loglik needs matching non-empty z ({}) and nu ({})",
            z.len(),
            nu.len()
        )));
    }
    let mut per_unit = Vec::with_capacity(z.len());
    let mut underflows = Vec::new();
    for (i, (&zi, &ni)) in z.iter().zip(nu).enumerate() {
        let lf = crate::posterior::log_mixture_density(prior, zi, ni)?;
        if lf == f64::NEG_INFINITY {
            underflows.push(i);
        }
        per_unit.push(lf);
    }
    Ok((chunked_mean(&per_unit), underflows))
}

/// Fits the NPMLE on the default grid for the data. See [`fit_on_grid`].
pub fn fit(z: &[f64], nu: &[f64], spec: &GridSpec, opts: &SolverOptions) -> Result<NpmleFit> {
    fit_on_grid(z, nu, build_grid(z, spec)?, opts)
}

/// Row-shifted kernel matrix: `cols[k][i] = exp(logphi_ik - c_i)` with
/// `logphi_ik = log phi((z_i - tau_k)/nu_i) - log nu_i` and
/// `c_i = max_k logphi_ik`. The shift cancels in every gradient ratio, so
/// EM, line searches, and the certificate all run on well-scaled numbers.
struct Kernel {
    n: usize,
    cols: Vec<Vec<f64>>,
    row_shift: Vec<f64>,
}

impl Kernel {
    fn build(z: &[f64], nu: &[f64], grid: &[f64]) -> Kernel {
        let n = z.len();
        // The log-kernel is unimodal in tau, so each row's maximum sits at
        // the grid point nearest to z_i.
        let row_shift: Vec<f64> = z
            .iter()
            .zip(nu)
            .map(|(&zi, &ni)| {
                let idx = match grid.binary_search_by(|t| t.total_cmp(&zi)) {
                    Ok(k) => k,
                    Err(k) => {
                        if k == 0 {
                            0
                        } else if k == grid.len() {
                            grid.len() - 1
                        } else if (grid[k] - zi).abs() < (zi - grid[k - 1]).abs() {
                            k
                        } else {
                            k - 1
                        }
                    }
                };
                let u = (zi - grid[idx]) / ni;
                -0.5 * (u * u + LN_2PI) - ni.ln()
            })
            .collect();
        let cols: Vec<Vec<f64>> = grid
            .par_iter()
            .map(|&tau| {
                z.iter()
                    .zip(nu)
                    .zip(&row_shift)
                    .map(|((&zi, &ni), &ci)| {
                        let u = (zi - tau) / ni;
                        (-0.5 * (u * u + LN_2PI) - ni.ln() - ci).exp()
                    })
                    .collect()
            })
            .collect();
        Kernel { n, cols, row_shift }
    }

    /// `g_i = sum_{k active} w_k cols[k][i]`, accumulated in ascending `k`.
    fn mixture(&self, weights: &[f64], active: &[usize], g: &mut [f64]) {
        g.fill(0.0);
        for &k in active {
            let wk = weights[k];
            if wk == 0.0 {
                continue;
            }
            for (gi, &a) in g.iter_mut().zip(&self.cols[k]) {
                *gi += wk * a;
            }
        }
    }

    /// Directional derivatives `D_k = (1/n) sum_i cols[k][i] / g_i` for the
    /// requested columns. Per-column dot products run sequentially over
    /// units, so the result is independent of thread count.
    fn gradient(&self, g: &[f64], columns: &[usize], out: &mut [f64]) {
        let inv: Vec<f64> = g.iter().map(|&gi| 1.0 / gi).collect();
        let n = self.n as f64;
        let col_dot = |k: usize| -> f64 {
            let dot: f64 = self.cols[k].iter().zip(&inv).map(|(&a, &r)| a * r).sum();
            dot / n
        };
        if columns.len() * self.n < 1 << 16 {
            for &k in columns {
                out[k] = col_dot(k);
            }
        } else {
            let results: Vec<(usize, f64)> =
                columns.par_iter().map(|&k| (k, col_dot(k))).collect();
            for (k, d) in results {
                out[k] = d;
            }
        }
    }

    /// Average log-likelihood from the maintained mixture values.
    fn avg_loglik(&self, g: &[f64]) -> f64 {
        let terms: Vec<f64> = g
            .iter()
            .zip(&self.row_shift)
            .map(|(&gi, &ci)| gi.ln() + ci)
            .collect();
        chunked_mean(&terms)
    }
}

/// Exact line search for the pairwise exchange `w + t (e_plus - e_minus)`:
/// maximizes the concave `J(t) = (1/n) sum_i log(g_i + t d_i)` over
/// `[0, t_max]` by safeguarded Newton on `J'`.
fn exchange_line_search(g: &[f64], d: &[f64], t_max: f64) -> f64 {
    let n = g.len() as f64;
    let derivs = |t: f64| -> (f64, f64) {
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for (&gi, &di) in g.iter().zip(d) {
            let denom = gi + t * di;
            let r = di / denom;
            d1 += r;
            d2 -= r * r;
        }
        (d1 / n, d2 / n)
    };
    // Feasibility of the boundary: every unit must keep positive density.
    let boundary_ok = g.iter().zip(d).all(|(&gi, &di)| gi + t_max * di > 0.0);
    if boundary_ok && derivs(t_max).0 >= 0.0 {
        return t_max;
    }
    let (mut lo, mut hi) = (0.0, t_max);
    let mut t = t_max * 0.5;
    for _ in 0..60 {
        let feasible = g.iter().zip(d).all(|(&gi, &di)| gi + t * di > 0.0);
        if !feasible {
            hi = t;
            t = 0.5 * (lo + hi);
            continue;
        }
        let (d1, d2) = derivs(t);
        if d1 > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        if hi - lo <= 1e-15 * t_max {
            break;
        }
        let newton = if d2 < 0.0 { t - d1 / d2 } else { f64::NAN };
        t = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    t
}

/// Fits the NPMLE over a caller-supplied support grid.
///
/// On success the returned fit satisfies `gap_certificate <=
/// min(kappa_n, tolerance)`. Hitting the iteration cap yields
/// [`Error::NpmleDidNotConverge`] carrying the best iterate and its
/// certificate.
pub fn fit_on_grid(
    z: &[f64],
    nu: &[f64],
    grid: Vec<f64>,
    opts: &SolverOptions,
) -> Result<NpmleFit> {
    let n = z.len();
    if n == 0 || nu.len() != n {
        return Err(Error::invalid(format!(
            "fit needs matching non-empty z ({}) and nu ({})",
            n,
            nu.len()
        )));
    }
    for (i, (&zi, &ni)) in z.iter().zip(nu).enumerate() {
        if !zi.is_finite() || !ni.is_finite() || ni <= 0.0 {
            return Err(Error::invalid(format!(
                "unit {i}: requires finite z and nu > 0 (z = {zi}, nu = {ni})"
            )));
        }
    }
    if grid.is_empty() {
        return Err(Error::invalid("support grid is empty"));
    }
    let k_total = grid.len();
    let kappa = kappa_n(n);
    let small_n = kappa <= 0.0;
    let stop_tol = if small_n {
        opts.tolerance
    } else {
        kappa.min(opts.tolerance)
    };

    let kernel = Kernel::build(z, nu, &grid);
    let mut weights = vec![1.0 / k_total as f64; k_total];
    let mut active: Vec<usize> = (0..k_total).collect();
    let mut g = vec![0.0; n];
    let mut grad = vec![0.0; k_total];
    kernel.mixture(&weights, &active, &mut g);

    let mut history: Vec<f64> = Vec::new();
    if opts.track_history {
        history.push(kernel.avg_loglik(&g));
    }

    let mut iterations = 0usize;
    let mut best_weights = weights.clone();
    let mut best_loglik = f64::NEG_INFINITY;
    let mut converged = false;
    let mut certificate = f64::INFINITY;
    let all_cols: Vec<usize> = (0..k_total).collect();

    'outer: loop {
        // Fresh mixture values wash out incremental rounding before the
        // certificate is evaluated.
        kernel.mixture(&weights, &active, &mut g);
        kernel.gradient(&g, &all_cols, &mut grad);
        let mut k_plus = 0usize;
        for k in 1..k_total {
            if grad[k] > grad[k_plus] {
                k_plus = k;
            }
        }
        let gap = (grad[k_plus] - 1.0).max(0.0);
        let ll = kernel.avg_loglik(&g);
        if ll > best_loglik {
            best_loglik = ll;
            best_weights.copy_from_slice(&weights);
            certificate = gap;
        }
        if gap <= stop_tol {
            converged = true;
            certificate = gap;
            best_weights.copy_from_slice(&weights);
            break 'outer;
        }
        if iterations >= opts.max_iterations {
            break 'outer;
        }

        // Pairwise vertex exchange: move mass from the worst supported atom
        // toward the best grid point.
        let mut k_minus = None;
        for &k in &active {
            if weights[k] > 0.0 && k != k_plus {
                k_minus = match k_minus {
                    None => Some(k),
                    Some(cur) if grad[k] < grad[cur] => Some(k),
                    other => other,
                };
            }
        }
        if let Some(k_minus) = k_minus {
            if grad[k_plus] > grad[k_minus] {
                let d: Vec<f64> = kernel.cols[k_plus]
                    .iter()
                    .zip(&kernel.cols[k_minus])
                    .map(|(&a, &b)| a - b)
                    .collect();
                let w_minus = weights[k_minus];
                let t = exchange_line_search(&g, &d, w_minus);
                if t > 0.0 {
                    if t >= w_minus {
                        // Hit the boundary: the atom leaves the support.
                        weights[k_plus] += w_minus;
                        weights[k_minus] = 0.0;
                    } else {
                        weights[k_plus] += t;
                        weights[k_minus] -= t;
                    }
                    if !active.contains(&k_plus) {
                        active.push(k_plus);
                        active.sort_unstable();
                    }
                    for (gi, &di) in g.iter_mut().zip(&d) {
                        *gi += t * di;
                    }
                }
            }
            iterations += 1;
            if opts.track_history {
                history.push(kernel.avg_loglik(&g));
            }
            if iterations >= opts.max_iterations {
                continue 'outer; // final certificate pass, then cap check
            }
        }

        // EM block on the active support.
        for _ in 0..opts.em_steps_per_round.max(1) {
            kernel.gradient(&g, &active, &mut grad);
            let mut sum = 0.0;
            for &k in &active {
                weights[k] *= grad[k];
                sum += weights[k];
            }
            for &k in &active {
                weights[k] /= sum;
            }
            kernel.mixture(&weights, &active, &mut g);
            iterations += 1;
            if opts.track_history {
                history.push(kernel.avg_loglik(&g));
            }
            if iterations >= opts.max_iterations {
                continue 'outer;
            }
        }

        // Drop atoms whose weight decayed to numerical irrelevance; they can
        // re-enter through the exchange step.
        let before = active.len();
        active.retain(|&k| {
            if weights[k] < 1e-16 {
                weights[k] = 0.0;
                false
            } else {
                true
            }
        });
        if active.len() != before {
            let sum: f64 = active.iter().map(|&k| weights[k]).sum();
            for &k in &active {
                weights[k] /= sum;
            }
            kernel.mixture(&weights, &active, &mut g);
        }
    }

    // Exact simplex normalization for the returned prior.
    let sum: f64 = best_weights.iter().sum();
    let final_weights: Vec<f64> = best_weights.iter().map(|w| w / sum).collect();
    let prior = DiscretePrior::new(grid, final_weights)?;
    // Stored loglik uses the public evaluation path so that replaying the
    // prior through `loglik` reproduces it exactly.
    let stored_loglik = loglik(&prior, z, nu)?;
    let fit = NpmleFit {
        prior,
        loglik: stored_loglik,
        iterations,
        gap_certificate: certificate,
        kappa_n: kappa,
        small_n_warning: small_n,
        loglik_history: if opts.track_history { Some(history) } else { None },
    };
    if converged {
        Ok(fit)
    } else {
        Err(Error::NpmleDidNotConverge {
            iterations,
            tolerance: stop_tol,
            certificate,
            best: Box::new(fit),
        })
    }
}
