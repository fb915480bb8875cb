//! Local-linear estimation of the conditional moments of `Y` given `sigma`.
//!
//! The design variable is `x = log10(sigma)`. The conditional mean
//! `m(sigma) = E[Y | sigma]` is a local linear regression of `Y` on `x`; the
//! conditional variance of the latent parameter comes from smoothing squared
//! residuals and subtracting the known noise floor:
//! `s^2(sigma) = E[(Y - m(sigma))^2 | sigma] - sigma^2`. Because that
//! difference can go negative in finite samples, the returned scale applies
//! a positive-part truncation against `(2 / (p_n + 2)) * v(sigma)`, where
//! `p_n` is the effective sample size of the smoother — the noncentral
//! chi-square estimator's truncation point with `p_n` standing in for the
//! local degrees of freedom.

use crate::data::Dataset;
use crate::error::Error;
use crate::numeric::solve_spd;
use crate::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Epanechnikov kernel `0.75 (1 - u^2)` on `[-1, 1]`.
#[inline]
fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// How a fitted value at an evaluation point was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalKind {
    /// Weighted least-squares line: the regular local linear path.
    LocalLinear,
    /// Fewer than two distinct in-window points: kernel-weighted mean.
    WeightedMean,
    /// Empty kernel window: value of the nearest design point.
    NearestNeighbor,
}

/// A fitted local linear regression, evaluable anywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalLinearFit {
    /// Design points sorted ascending.
    xs: Vec<f64>,
    /// Responses in sorted-design order.
    ys: Vec<f64>,
    /// Original index of each sorted design point.
    perm: Vec<usize>,
    pub bandwidth: f64,
}

impl LocalLinearFit {
    fn window(&self, x0: f64) -> (usize, usize) {
        let lo = self.xs.partition_point(|&x| x < x0 - self.bandwidth);
        let hi = self.xs.partition_point(|&x| x <= x0 + self.bandwidth);
        (lo, hi)
    }

    /// Fitted value at `x0`.
    pub fn eval(&self, x0: f64) -> f64 {
        self.eval_with_kind(x0).0
    }

    /// Fitted value plus the path that produced it.
    pub fn eval_with_kind(&self, x0: f64) -> (f64, EvalKind) {
        let (lo, hi) = self.window(x0);
        if lo >= hi {
            // Empty window: nearest design point.
            let candidates = [lo.saturating_sub(1), lo.min(self.xs.len() - 1)];
            let nearest = candidates
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    (self.xs[a] - x0)
                        .abs()
                        .total_cmp(&(self.xs[b] - x0).abs())
                })
                .expect("non-empty candidates");
            return (self.ys[nearest], EvalKind::NearestNeighbor);
        }
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        let (mut t0, mut t1) = (0.0, 0.0);
        let mut first_x = self.xs[lo];
        let mut distinct = 1usize;
        for i in lo..hi {
            let u = self.xs[i] - x0;
            let w = epanechnikov(u / self.bandwidth);
            if self.xs[i] != first_x {
                distinct += 1;
                first_x = self.xs[i];
            }
            s0 += w;
            s1 += w * u;
            s2 += w * u * u;
            t0 += w * self.ys[i];
            t1 += w * u * self.ys[i];
        }
        if s0 <= 0.0 {
            // Window non-empty but every weight vanished at the boundary.
            let nearest = (lo..hi)
                .min_by(|&a, &b| {
                    (self.xs[a] - x0)
                        .abs()
                        .total_cmp(&(self.xs[b] - x0).abs())
                })
                .expect("non-empty window");
            return (self.ys[nearest], EvalKind::NearestNeighbor);
        }
        let denom = s0 * s2 - s1 * s1;
        if distinct < 2 || denom <= 1e-12 * s0 * s2 {
            return (t0 / s0, EvalKind::WeightedMean);
        }
        ((s2 * t0 - s1 * t1) / denom, EvalKind::LocalLinear)
    }

    /// Evaluates at many points in parallel, preserving order.
    pub fn eval_many(&self, points: &[f64]) -> Vec<f64> {
        points.par_iter().map(|&x0| self.eval(x0)).collect()
    }

    /// Sparse smoother weights `l_i(x0)` as `(original index, weight)`
    /// pairs, consistent with the fallbacks in [`Self::eval_with_kind`]:
    /// the fitted value equals `sum_i l_i(x0) y_i` on every path.
    pub fn smoother_weights(&self, x0: f64) -> Vec<(usize, f64)> {
        let (lo, hi) = self.window(x0);
        if lo >= hi {
            let candidates = [lo.saturating_sub(1), lo.min(self.xs.len() - 1)];
            let nearest = candidates
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    (self.xs[a] - x0)
                        .abs()
                        .total_cmp(&(self.xs[b] - x0).abs())
                })
                .expect("non-empty candidates");
            return vec![(self.perm[nearest], 1.0)];
        }
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        let mut first_x = self.xs[lo];
        let mut distinct = 1usize;
        for i in lo..hi {
            let u = self.xs[i] - x0;
            let w = epanechnikov(u / self.bandwidth);
            if self.xs[i] != first_x {
                distinct += 1;
                first_x = self.xs[i];
            }
            s0 += w;
            s1 += w * u;
            s2 += w * u * u;
        }
        if s0 <= 0.0 {
            let nearest = (lo..hi)
                .min_by(|&a, &b| {
                    (self.xs[a] - x0)
                        .abs()
                        .total_cmp(&(self.xs[b] - x0).abs())
                })
                .expect("non-empty window");
            return vec![(self.perm[nearest], 1.0)];
        }
        let denom = s0 * s2 - s1 * s1;
        let singular = distinct < 2 || denom <= 1e-12 * s0 * s2;
        (lo..hi)
            .filter_map(|i| {
                let u = self.xs[i] - x0;
                let w = epanechnikov(u / self.bandwidth);
                if w == 0.0 {
                    return None;
                }
                let l = if singular {
                    w / s0
                } else {
                    w * (s2 - u * s1) / denom
                };
                Some((self.perm[i], l))
            })
            .collect()
    }
}

/// Fits a local linear regression of `y` on `x` with the Epanechnikov
/// kernel at a fixed bandwidth.
pub fn llr_fit(x: &[f64], y: &[f64], bandwidth: f64) -> Result<LocalLinearFit> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "x has {} points but y has {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::invalid("local linear regression needs n >= 2"));
    }
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::invalid(format!("bandwidth {bandwidth} must be positive")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("design and response must be finite"));
    }
    let mut perm: Vec<usize> = (0..x.len()).collect();
    perm.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let xs: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
    let ys: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
    Ok(LocalLinearFit {
        xs,
        ys,
        perm,
        bandwidth,
    })
}

/// Outcome of data-driven bandwidth selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthChoice {
    pub bandwidth: f64,
    /// Pilot value before projection onto the rate interval.
    pub unprojected: f64,
    /// Set when the design was degenerate and the pilot fit impossible.
    pub degenerate_design: bool,
}

/// Rule-of-thumb plug-in bandwidth for local linear regression with the
/// Epanechnikov kernel, projected onto `[h_lo, h_hi] =
/// [C_h^-1 n^(-1/5), C_h n^(-1/5)]`.
///
/// The pilot is a global quartic OLS fit: its second derivative estimates
/// the curvature integral and its residual variance the noise level, giving
/// the AMISE minimizer `h = (15 sigma^2 (b - a) / sum_i m''(x_i)^2)^(1/5)`.
pub fn select_bandwidth(x: &[f64], y: &[f64], c_h: f64) -> Result<BandwidthChoice> {
    let n = x.len();
    if n < 10 {
        return Err(Error::invalid("bandwidth selection needs n >= 10"));
    }
    if x.len() != y.len() {
        return Err(Error::invalid("x and y must have equal length"));
    }
    if !(c_h > 1.0) {
        return Err(Error::invalid(format!("C_h = {c_h} must exceed 1")));
    }
    let rate = (n as f64).powf(-0.2);
    let (h_lo, h_hi) = (rate / c_h, rate * c_h);

    let xmin = x.iter().copied().fold(f64::INFINITY, f64::min);
    let xmax = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if xmax <= xmin {
        return Ok(BandwidthChoice {
            bandwidth: h_hi,
            unprojected: h_hi,
            degenerate_design: true,
        });
    }

    // Quartic pilot on the standardized design for conditioning.
    let (mean, var) = crate::numeric::mean_and_variance(x);
    let sd = var.sqrt();
    let u: Vec<f64> = x.iter().map(|&xi| (xi - mean) / sd).collect();
    let p = 5usize;
    let mut gram = vec![vec![0.0; p]; p];
    let mut rhs = vec![0.0; p];
    for (ui, &yi) in u.iter().zip(y) {
        let mut pow = [0.0; 9];
        pow[0] = 1.0;
        for j in 1..9 {
            pow[j] = pow[j - 1] * ui;
        }
        for r in 0..p {
            for c in 0..p {
                gram[r][c] += pow[r + c];
            }
            rhs[r] += pow[r] * yi;
        }
    }
    let beta = match solve_spd(&mut gram, &mut rhs, 1e-12) {
        Ok(b) => b,
        Err(_) => {
            // Too few distinct design points for a quartic: treat as
            // near-degenerate and take the widest admissible bandwidth.
            return Ok(BandwidthChoice {
                bandwidth: h_hi,
                unprojected: h_hi,
                degenerate_design: true,
            });
        }
    };

    let mut rss = 0.0;
    let mut curvature = 0.0;
    for (ui, &yi) in u.iter().zip(y) {
        let fit = beta[0] + ui * (beta[1] + ui * (beta[2] + ui * (beta[3] + ui * beta[4])));
        rss += (yi - fit) * (yi - fit);
        // d2/dx2 = d2/du2 / sd^2.
        let ddu = 2.0 * beta[2] + 6.0 * beta[3] * ui + 12.0 * beta[4] * ui * ui;
        let ddx = ddu / (sd * sd);
        curvature += ddx * ddx;
    }
    let sigma2 = rss / (n - p) as f64;
    let raw = if curvature > 0.0 && sigma2 > 0.0 {
        (15.0 * sigma2 * (xmax - xmin) / curvature).powf(0.2)
    } else if sigma2 <= 0.0 {
        h_lo
    } else {
        h_hi
    };
    Ok(BandwidthChoice {
        bandwidth: raw.clamp(h_lo, h_hi),
        unprojected: raw,
        degenerate_design: false,
    })
}

/// Effective sample size of the local linear smoother:
/// `p_n = (1/n) sum_j 1 / sum_i l_i(x_j)^2`, with the smoother weights
/// evaluated at the design points themselves, clamped into `[1, n]`.
pub fn effective_sample_size(x: &[f64], bandwidth: f64) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::invalid("effective sample size needs n >= 2"));
    }
    // Responses are irrelevant to the weights; reuse the fit machinery.
    let zeros = vec![0.0; x.len()];
    let fit = llr_fit(x, &zeros, bandwidth)?;
    let n = x.len();
    let inv_terms: Vec<f64> = x
        .par_iter()
        .map(|&xj| {
            let sq: f64 = fit
                .smoother_weights(xj)
                .iter()
                .map(|&(_, l)| l * l)
                .sum();
            1.0 / sq
        })
        .collect();
    let p_n = crate::numeric::chunked_mean(&inv_terms);
    Ok(p_n.clamp(1.0, n as f64))
}

/// Options for [`fit_nuisance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceOptions {
    /// Bandwidth projection constant `C_h`.
    pub c_h: f64,
    /// Smooth `(Y - m(sigma))^2 - sigma^2` directly instead of smoothing the
    /// squared residuals and subtracting `sigma^2` afterwards.
    pub smooth_difference: bool,
}

impl Default for NuisanceOptions {
    fn default() -> Self {
        NuisanceOptions {
            c_h: 10.0,
            smooth_difference: false,
        }
    }
}

/// Fitted conditional-moment functions with their diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceFit {
    mean_fit: LocalLinearFit,
    var_fit: LocalLinearFit,
    smooth_difference: bool,
    /// Effective sample size of the variance smoother.
    pub p_n: f64,
    /// Bandwidth used for the conditional mean.
    pub h_m: f64,
    /// Bandwidth used for the conditional variance.
    pub h_s: f64,
    /// Design points (log10 sigma) where the smoothed variance proxy fell to
    /// its floor, indicating an unreliable scale estimate there.
    pub nonpositive_variance_at: Vec<usize>,
}

/// Floor applied to the smoothed variance proxy before the truncation rule.
const VARIANCE_FLOOR: f64 = 1e-12;

impl NuisanceFit {
    /// Conditional mean `m(sigma)`.
    pub fn m_hat(&self, sigma: f64) -> f64 {
        self.mean_fit.eval(sigma.log10())
    }

    /// Smoothed variance proxy `v(sigma) = E[(Y - m)^2 | sigma]` (always the
    /// squared-residual scale, whichever target was smoothed), floored.
    pub fn v_hat(&self, sigma: f64) -> f64 {
        let x = sigma.log10();
        let raw = if self.smooth_difference {
            self.var_fit.eval(x) + sigma * sigma
        } else {
            self.var_fit.eval(x)
        };
        raw.max(VARIANCE_FLOOR)
    }

    /// Conditional scale `s(sigma) = sqrt(max(v - sigma^2, 2 v / (p_n + 2)))`,
    /// strictly positive by construction.
    pub fn s_hat(&self, sigma: f64) -> f64 {
        let v = self.v_hat(sigma);
        let direct = v - sigma * sigma;
        let truncated = 2.0 / (self.p_n + 2.0) * v;
        direct.max(truncated).sqrt()
    }

    /// `(m_hat, s_hat)` for every unit of a dataset, in unit order.
    pub fn transform_parameters(&self, data: &Dataset) -> Vec<(f64, f64)> {
        let sigmas = data.sigma();
        sigmas
            .par_iter()
            .map(|&s| (self.m_hat(s), self.s_hat(s)))
            .collect()
    }
}

/// CLOSE step 1: estimates `m` and `s` from the data.
///
/// Pipeline: (i) local linear fit of `y` on `log10 sigma` at a plug-in
/// bandwidth; (ii) squared residuals; (iii) local linear fit of the squared
/// residuals at their own bandwidth; (iv) effective sample size of that
/// second smoother; (v) the positive-part truncation rule for the scale.
pub fn fit_nuisance(data: &Dataset, opts: &NuisanceOptions) -> Result<NuisanceFit> {
    let n = data.len();
    if n < 10 {
        return Err(Error::invalid(format!(
            "nuisance estimation needs n >= 10, got {n}"
        )));
    }
    let y = data.y();
    let sigma = data.sigma();
    let x: Vec<f64> = sigma.iter().map(|&s| s.log10()).collect();

    let h_m = select_bandwidth(&x, &y, opts.c_h)?;
    let mean_fit = llr_fit(&x, &y, h_m.bandwidth)?;
    let m_at: Vec<f64> = mean_fit.eval_many(&x);

    let target: Vec<f64> = if opts.smooth_difference {
        y.iter()
            .zip(&m_at)
            .zip(&sigma)
            .map(|((&yi, &mi), &si)| (yi - mi) * (yi - mi) - si * si)
            .collect()
    } else {
        y.iter()
            .zip(&m_at)
            .map(|(&yi, &mi)| (yi - mi) * (yi - mi))
            .collect()
    };
    let h_s = select_bandwidth(&x, &target, opts.c_h)?;
    let var_fit = llr_fit(&x, &target, h_s.bandwidth)?;
    let p_n = effective_sample_size(&x, h_s.bandwidth)?;

    let mut fit = NuisanceFit {
        mean_fit,
        var_fit,
        smooth_difference: opts.smooth_difference,
        p_n,
        h_m: h_m.bandwidth,
        h_s: h_s.bandwidth,
        nonpositive_variance_at: Vec::new(),
    };
    fit.nonpositive_variance_at = sigma
        .iter()
        .enumerate()
        .filter(|(_, &s)| fit.v_hat(s) <= VARIANCE_FLOOR)
        .map(|(i, _)| i)
        .collect();
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::linspace;
    use crate::rng::{standard_normal, StreamKey};

    #[test]
    fn constants_are_reproduced() {
        let x = linspace(0.0, 1.0, 50);
        let y = vec![2.0; 50];
        let fit = llr_fit(&x, &y, 0.2).unwrap();
        for &x0 in &[0.0, 0.31, 0.5, 0.99] {
            assert!((fit.eval(x0) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_functions_are_exact() {
        let x = linspace(0.0, 1.0, 80);
        let y: Vec<f64> = x.iter().map(|&v| 3.0 * v + 1.0).collect();
        for h in [0.05, 0.2, 1.5] {
            let fit = llr_fit(&x, &y, h).unwrap();
            for &x0 in &[0.0, 0.13, 0.5, 0.77, 1.0] {
                assert!(
                    (fit.eval(x0) - (3.0 * x0 + 1.0)).abs() < 1e-8,
                    "h = {h}, x0 = {x0}"
                );
            }
        }
    }

    /// Dense reference implementation: explicit 2x2 weighted normal
    /// equations at each evaluation point, no window shortcuts.
    fn reference_llr(x: &[f64], y: &[f64], h: f64, x0: f64) -> f64 {
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(y) {
            let u = xi - x0;
            let w = epanechnikov(u / h);
            s0 += w;
            s1 += w * u;
            s2 += w * u * u;
            t0 += w * yi;
            t1 += w * u * yi;
        }
        (s2 * t0 - s1 * t1) / (s0 * s2 - s1 * s1)
    }

    #[test]
    fn quadratic_bias_matches_reference_oracle() {
        let n = 200;
        let h = 0.1;
        let x = linspace(0.0, 1.0, n);
        let y: Vec<f64> = x.iter().map(|&v| v * v).collect();
        let fit = llr_fit(&x, &y, h).unwrap();
        let eval = linspace(0.0, 1.0, 101);
        let mut max_err: f64 = 0.0;
        let mut max_ref_err: f64 = 0.0;
        for &x0 in &eval {
            let ours = fit.eval(x0);
            let reference = reference_llr(&x, &y, h, x0);
            assert!((ours - reference).abs() < 1e-10);
            max_err = max_err.max((ours - x0 * x0).abs());
            max_ref_err = max_ref_err.max((reference - x0 * x0).abs());
        }
        // Same bias constant as the reference, and O(h^2) overall.
        let c = max_ref_err / (h * h);
        assert!(max_err <= c * h * h * (1.0 + 1e-9));
    }

    #[test]
    fn smoother_weights_sum_and_first_moment() {
        let x = linspace(0.0, 1.0, 60);
        let fit = llr_fit(&x, &vec![0.0; 60], 0.15).unwrap();
        for &x0 in &[0.0, 0.2, 0.5, 0.93] {
            let w = fit.smoother_weights(x0);
            let sum: f64 = w.iter().map(|&(_, l)| l).sum();
            let first: f64 = w.iter().map(|&(i, l)| l * (x[i] - x0)).sum();
            assert!((sum - 1.0).abs() < 1e-10);
            assert!(first.abs() < 1e-8);
        }
    }

    #[test]
    fn nearest_neighbor_on_empty_window() {
        let x = vec![0.0, 1.0];
        let y = vec![5.0, -3.0];
        let fit = llr_fit(&x, &y, 0.1).unwrap();
        let (v, kind) = fit.eval_with_kind(0.4);
        assert_eq!(kind, EvalKind::NearestNeighbor);
        assert_eq!(v, 5.0);
        let (v, kind) = fit.eval_with_kind(0.61);
        assert_eq!(kind, EvalKind::NearestNeighbor);
        assert_eq!(v, -3.0);
    }

    #[test]
    fn weighted_mean_on_singular_window() {
        // All in-window mass on a single distinct x.
        let x = vec![0.0, 0.0, 0.0, 1.0];
        let y = vec![1.0, 2.0, 3.0, 10.0];
        let fit = llr_fit(&x, &y, 0.5).unwrap();
        let (v, kind) = fit.eval_with_kind(0.0);
        assert_eq!(kind, EvalKind::WeightedMean);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_respects_projection_interval() {
        let key = StreamKey::new(3);
        let mut rng = key.stream(0, 0);
        let n = 100;
        let x = linspace(0.0, 1.0, n);
        let y: Vec<f64> = x
            .iter()
            .map(|&v| (6.0 * v).sin() + 0.3 * standard_normal(&mut rng))
            .collect();
        let choice = select_bandwidth(&x, &y, 10.0).unwrap();
        let rate = (n as f64).powf(-0.2);
        assert!(choice.bandwidth >= rate / 10.0 && choice.bandwidth <= rate * 10.0);
        // 100^(-1/5) = 0.3981: the interval is [0.0398, 3.98].
        assert!((rate - 0.3981).abs() < 1e-4);
    }

    #[test]
    fn degenerate_design_takes_upper_end() {
        let x = vec![0.5; 20];
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let choice = select_bandwidth(&x, &y, 10.0).unwrap();
        assert!(choice.degenerate_design);
        let h_hi = 10.0 * (20.0f64).powf(-0.2);
        assert!((choice.bandwidth - h_hi).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_near_grid_search_optimum() {
        // Grid-search oracle: ISE of the fit at the selected h must be
        // within 3x the ISE at the best of 20 log-spaced candidates.
        let key = StreamKey::new(11);
        let mut rng = key.stream(0, 0);
        let n = 2000;
        let x = linspace(0.0, 1.0, n);
        let truth: Vec<f64> = x.iter().map(|&v| (4.0 * v).sin()).collect();
        let y: Vec<f64> = truth
            .iter()
            .map(|&t| t + 0.5 * standard_normal(&mut rng))
            .collect();
        let eval = linspace(0.02, 0.98, 97);
        let ise = |h: f64| -> f64 {
            let fit = llr_fit(&x, &y, h).unwrap();
            eval.iter()
                .map(|&x0| {
                    let err = fit.eval(x0) - (4.0 * x0).sin();
                    err * err
                })
                .sum::<f64>()
                / eval.len() as f64
        };
        let chosen = select_bandwidth(&x, &y, 10.0).unwrap().bandwidth;
        let rate = (n as f64).powf(-0.2);
        let candidates: Vec<f64> = (0..20)
            .map(|i| (rate / 10.0) * (100.0f64).powf(i as f64 / 19.0))
            .collect();
        let best = candidates.iter().map(|&h| ise(h)).fold(f64::INFINITY, f64::min);
        assert!(
            ise(chosen) <= 3.0 * best,
            "ISE at chosen {chosen}: {} vs best {best}",
            ise(chosen)
        );
    }

    #[test]
    fn effective_sample_size_extremes() {
        // Self-only windows: p_n = 1.
        let x = linspace(0.0, 1.0, 40);
        let p = effective_sample_size(&x, 1e-4).unwrap();
        assert!((p - 1.0).abs() < 1e-12);

        // Identical design points: uniform weights 1/n, p_n = n.
        let x_same = vec![0.3; 25];
        let p = effective_sample_size(&x_same, 0.5).unwrap();
        assert!((p - 25.0).abs() < 1e-9);

        // Huge bandwidth on a symmetric design comes close to n.
        let p = effective_sample_size(&x, 1e4).unwrap();
        assert!(p > 0.9 * 40.0 && p <= 40.0);
    }

    #[test]
    fn effective_sample_size_matches_dense_oracle() {
        let n = 500;
        let x = linspace(0.0, 1.0, n);
        let h = (n as f64).powf(-0.2);
        // Dense oracle: full weight matrix from the reference formulas.
        let mut total = 0.0;
        for &xj in &x {
            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
            for &xi in &x {
                let u = xi - xj;
                let w = epanechnikov(u / h);
                s0 += w;
                s1 += w * u;
                s2 += w * u * u;
            }
            let denom = s0 * s2 - s1 * s1;
            let mut sq = 0.0;
            for &xi in &x {
                let u = xi - xj;
                let w = epanechnikov(u / h);
                let l = w * (s2 - u * s1) / denom;
                sq += l * l;
            }
            total += 1.0 / sq;
        }
        let oracle = total / n as f64;
        let p = effective_sample_size(&x, h).unwrap();
        assert!((p - oracle).abs() < 1e-9, "{p} vs {oracle}");
    }

    #[test]
    fn truncation_rule_values() {
        // v = 1, sigma^2 = 2, p_n = 8: s = sqrt(max(-1, 0.2)).
        let direct: f64 = 1.0 - 2.0;
        let trunc: f64 = 2.0 / (8.0 + 2.0) * 1.0;
        assert!((direct.max(trunc).sqrt() - 0.4472136).abs() < 1e-7);
        // v = 5, sigma^2 = 2, p_n = 8: truncation non-binding.
        let direct: f64 = 5.0 - 2.0;
        let trunc: f64 = 0.2 * 5.0;
        assert!((direct.max(trunc).sqrt() - 1.7320508).abs() < 1e-7);
    }

    fn location_scale_data(n: usize, seed: u64) -> Dataset {
        // theta | sigma ~ N(0.5 log10 sigma, 0.25), sigma log-uniform [0.1, 1].
        let key = StreamKey::new(seed);
        let mut obs = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = key.stream(0, i as u64);
            let u = crate::rng::uniform01(&mut rng);
            let sigma = 10f64.powf(-1.0 + u);
            let theta = 0.5 * sigma.log10() + 0.5 * standard_normal(&mut rng);
            let y = theta + sigma * standard_normal(&mut rng);
            obs.push(crate::data::Observation::new(y, sigma));
        }
        Dataset::new(obs).unwrap()
    }

    #[test]
    fn nuisance_recovers_known_moments() {
        // Monte Carlo against the known DGP: median sup-error over 20
        // replications within the stated bands.
        let mut m_errs = Vec::new();
        let mut s2_errs = Vec::new();
        for rep in 0..20 {
            let data = location_scale_data(5000, 1000 + rep);
            let fit = fit_nuisance(&data, &NuisanceOptions::default()).unwrap();
            let sigmas = data.sigma();
            let lo = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = sigmas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let grid: Vec<f64> = linspace(lo.log10(), hi.log10(), 101)
                .iter()
                .map(|&t| 10f64.powf(t))
                .collect();
            let m_err = grid
                .iter()
                .map(|&s| (fit.m_hat(s) - 0.5 * s.log10()).abs())
                .fold(0.0, f64::max);
            let s2_err = grid
                .iter()
                .map(|&s| (fit.s_hat(s).powi(2) - 0.25).abs())
                .fold(0.0, f64::max);
            m_errs.push(m_err);
            s2_errs.push(s2_err);
        }
        m_errs.sort_by(f64::total_cmp);
        s2_errs.sort_by(f64::total_cmp);
        let m_med = 0.5 * (m_errs[9] + m_errs[10]);
        let s2_med = 0.5 * (s2_errs[9] + s2_errs[10]);
        assert!(m_med <= 0.05, "median sup |m_hat - m0| = {m_med}");
        assert!(s2_med <= 0.08, "median sup |s2_hat - s0^2| = {s2_med}");
    }

    #[test]
    fn scale_positive_under_adversarial_variance() {
        // Squared residuals far below sigma^2 everywhere: the direct
        // estimate is negative at every point, the truncation keeps s > 0.
        let n = 200;
        let key = StreamKey::new(77);
        let mut obs = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = key.stream(0, i as u64);
            let sigma = 2.0 + crate::rng::uniform01(&mut rng);
            // Nearly noiseless responses despite huge claimed sigma.
            let y = 0.01 * standard_normal(&mut rng);
            obs.push(crate::data::Observation::new(y, sigma));
        }
        let data = Dataset::new(obs).unwrap();
        let fit = fit_nuisance(&data, &NuisanceOptions::default()).unwrap();
        for &s in &data.sigma() {
            let sh = fit.s_hat(s);
            assert!(sh > 0.0 && sh.is_finite());
            assert!(fit.v_hat(s) - s * s < 0.0, "direct part should be negative");
        }
    }

    #[test]
    fn smooth_difference_variant_agrees_roughly() {
        let data = location_scale_data(2000, 5);
        let base = fit_nuisance(&data, &NuisanceOptions::default()).unwrap();
        let diff = fit_nuisance(
            &data,
            &NuisanceOptions {
                smooth_difference: true,
                ..NuisanceOptions::default()
            },
        )
        .unwrap();
        for &s in &[0.15, 0.3, 0.6] {
            assert!((base.s_hat(s) - diff.s_hat(s)).abs() < 0.15);
        }
    }

    #[test]
    fn rejects_tiny_samples() {
        let data = Dataset::from_columns(&[1.0, 2.0], &[0.5, 0.5]).unwrap();
        assert!(fit_nuisance(&data, &NuisanceOptions::default()).is_err());
    }
}
