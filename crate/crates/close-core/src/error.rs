use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-domain input (non-finite values, length
    /// mismatches, empty data, out-of-range arguments).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Every posterior weight underflowed to zero for the named unit, so no
    /// posterior summary can be formed.
    #[error("degenerate posterior for unit {unit}: all mixture weights underflowed (z = {z}, nu = {nu})")]
    DegeneratePosterior { unit: usize, z: f64, nu: f64 },

    /// The weighted least-squares design matrix is rank deficient.
    #[error("rank-deficient design: column {column} is collinear with earlier columns")]
    RankDeficient { column: usize },

    /// The NPMLE solver hit its iteration cap before reaching the requested
    /// gap tolerance. The best iterate and its certificate are preserved.
    #[error(
        "NPMLE did not reach gap tolerance {tolerance:.3e} within {iterations} iterations \
         (best certificate {certificate:.3e})"
    )]
    NpmleDidNotConverge {
        iterations: usize,
        tolerance: f64,
        certificate: f64,
        best: Box<crate::npmle::NpmleFit>,
    },

    /// A posterior was requested for a dataset other than the one the model
    /// was fitted on, without the explicit out-of-sample override.
    #[error("dataset fingerprint mismatch: model fitted on {expected}, scoring {actual} (pass allow_out_of_sample to override)")]
    FingerprintMismatch { expected: String, actual: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
