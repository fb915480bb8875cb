//! Shared numeric kernels: stable log-domain summation, Gaussian density
//! helpers, deterministic reductions, and a small SPD solver.

/// `log(2*pi)`, used by every Gaussian log-density in the crate.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `1/sqrt(2*pi)`.
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn normal_pdf(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

/// Log of the standard normal density.
#[inline]
pub fn normal_log_pdf(u: f64) -> f64 {
    -0.5 * (u * u + LN_2PI)
}

/// Max-shifted log-sum-exp over a slice. `NEG_INFINITY` entries contribute
/// nothing; an all-`-inf` input returns `-inf`.
pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = terms.iter().map(|&t| (t - max).exp()).sum();
    max + sum.ln()
}

/// Deterministic sum over `values`: fixed-size chunks are accumulated
/// sequentially, then the per-chunk partials are combined pairwise in index
/// order. The result is independent of thread count and identical across
/// runs, and the pairwise tree keeps rounding error O(log n).
pub fn chunked_sum(values: &[f64]) -> f64 {
    const CHUNK: usize = 1024;
    if values.len() <= CHUNK {
        return values.iter().sum();
    }
    let mut partials: Vec<f64> = values.chunks(CHUNK).map(|c| c.iter().sum()).collect();
    while partials.len() > 1 {
        let mut next = Vec::with_capacity(partials.len().div_ceil(2));
        for pair in partials.chunks(2) {
            next.push(pair.iter().sum());
        }
        partials = next;
    }
    partials[0]
}

/// Mean of `values` via [`chunked_sum`].
pub fn chunked_mean(values: &[f64]) -> f64 {
    chunked_sum(values) / values.len() as f64
}

/// Sample mean and variance (denominator `n-1`; variance 0 when `n < 2`).
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = chunked_mean(values);
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: Vec<f64> = values.iter().map(|&v| (v - mean) * (v - mean)).collect();
    (mean, chunked_sum(&ss) / (n - 1) as f64)
}

/// Solve the symmetric positive-definite system `A x = b` in place via
/// Cholesky. Returns `None` when a pivot falls below `tol` times the largest
/// diagonal entry, reporting the offending column.
pub fn solve_spd(a: &mut [Vec<f64>], b: &mut [f64], tol: f64) -> Result<Vec<f64>, usize> {
    let p = b.len();
    let max_diag = (0..p).map(|j| a[j][j].abs()).fold(0.0, f64::max).max(1.0);
    // Cholesky factorization A = L L^T.
    for j in 0..p {
        for k in 0..j {
            let ljk = a[j][k];
            for i in j..p {
                a[i][j] -= a[i][k] * ljk;
            }
        }
        let d = a[j][j];
        if !(d > tol * max_diag) {
            return Err(j);
        }
        let root = d.sqrt();
        for i in j..p {
            a[i][j] /= root;
        }
    }
    // Forward then backward substitution.
    for j in 0..p {
        for k in 0..j {
            b[j] -= a[j][k] * b[k];
        }
        b[j] /= a[j][j];
    }
    for j in (0..p).rev() {
        for k in (j + 1)..p {
            b[j] -= a[k][j] * b[k];
        }
        b[j] /= a[j][j];
    }
    Ok(b.to_vec())
}

/// Equally spaced points on `[lo, hi]` inclusive. `count == 1` yields the
/// midpoint of a degenerate interval, i.e. `lo` when `lo == hi`, else `lo`.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(count >= 1);
    if count == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (count - 1) as f64;
    (0..count).map(|k| lo + step * k as f64).collect()
}
