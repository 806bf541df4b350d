//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("time {t} outside horizon [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("grid misaligned: {0}")]
    GridMisaligned(String),

    #[error("processes built on different ensembles cannot be compared")]
    EnsembleMismatch,

    #[error("state exploded at scenario {scenario}, step {step} (|x| = {value:.3e})")]
    Explosion {
        scenario: usize,
        step: usize,
        value: f64,
    },

    #[error("process has unchecked provenance; adaptedness cannot be verified")]
    NotCheckable,

    #[error("game declares no strong-convexity modulus; certificate impossible")]
    MissingConvexityModulus,

    #[error("strong-convexity modulus must be positive, got {0}")]
    NonPositiveModulus(f64),

    #[error(
        "best-response solve did not converge after {iters} iterations \
         (grad norm {grad_norm:.3e} > tol {tol:.3e}, J1 = {objective:.6e})"
    )]
    NonConvergence {
        iters: usize,
        grad_norm: f64,
        tol: f64,
        objective: f64,
        last_coeffs: Vec<f64>,
    },

    #[error("best-response target solve failed for sample {index}: {source}")]
    TargetSolveFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged (loss = {loss:.3e})")]
    Divergence { loss: f64 },

    #[error(
        "parameter budget exceeded: {count} non-zero parameters > \
         J_max*W_max^2 + N*Q = {budget} (processor {processor}, values {values})"
    )]
    BudgetExceeded {
        count: usize,
        budget: usize,
        processor: usize,
        values: usize,
    },

    #[error("invalid compact-set specification: {0}")]
    InvalidCompactSet(String),

    #[error("gradient root must be scalar, got length {0}")]
    NonScalarRoot(usize),

    #[error("empty input for {0}")]
    EmptyInput(&'static str),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
