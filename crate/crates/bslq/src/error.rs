//! Error type shared by all solver stages, with a stable mapping to CLI exit codes.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by problem ingestion, the deterministic solvers, the
/// Monte-Carlo stages and the verification oracles.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed configuration, command line or problem file.
    #[error("configuration error: {0}")]
    Config(String),

    /// A structural validation check failed (shapes, symmetry, finiteness,
    /// artifact integrity).
    #[error("validation error: {0}")]
    Validation(String),

    /// The terminal penalty weight is below the admissible range: the block
    /// weight matrix diag(N1 + P1, N2 + P2, R) lost positivity during the
    /// backward Riccati solve.
    #[error(
        "lambda {lambda} too small: block positivity margin {margin:.3e} fell below floor {floor:.3e} at t = {t}"
    )]
    LambdaTooSmall {
        lambda: f64,
        margin: f64,
        floor: f64,
        t: f64,
    },

    /// N_Gamma = I + Gamma * N2 became numerically singular, so the
    /// decoupling is ill-posed at the current resolution.
    #[error("N_Gamma nearly singular at t = {t}: reciprocal condition {rcond:.3e}")]
    NGammaSingular { t: f64, rcond: f64 },

    /// A non-finite value appeared during integration or simulation.
    #[error("numerical blow-up: {0}")]
    Blowup(String),

    /// A verification gate did not meet its tolerance.
    #[error("verification failed: {0}")]
    VerificationFailed(String),

    /// Incompatible matrix shapes or state dimensions.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Two objects were built on different time grids.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Least-squares regression could not be solved reliably.
    #[error(
        "regression rank-deficient (condition {cond:.3e}); use a smaller basis or more paths"
    )]
    RegressionRankDeficient { cond: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code used by the command-line driver.
    ///
    /// 2 config, 3 validation, 4 lambda-too-small, 5 N_Gamma singular,
    /// 6 numeric blow-up, 7 verification failed.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::GridMismatch(_) => 2,
            Error::Validation(_) | Error::Io(_) => 3,
            Error::LambdaTooSmall { .. } => 4,
            Error::NGammaSingular { .. } => 5,
            Error::Blowup(_) | Error::RegressionRankDeficient { .. } => 6,
            Error::VerificationFailed(_) => 7,
        }
    }
}
