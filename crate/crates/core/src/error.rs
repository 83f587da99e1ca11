use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("quadrature order {0} outside the supported range 2..=512")]
    OrderOutOfRange(usize),

    #[error("non-finite integrand value {value} at node {node}")]
    NonFinite { node: f64, value: f64 },

    #[error("reducer domain violation: {0}")]
    ReducerDomain(String),

    #[error("quadrature did not converge: order {low} and {high} differ by {diff:e}")]
    QuadratureNonConvergence { low: usize, high: usize, diff: f64 },

    #[error("unknown activation `{0}` (expected relu, quadratic, erf or tanh)")]
    UnknownActivation(String),

    #[error("overlap p = {0} outside [0, 1]")]
    OverlapOutOfRange(f64),

    #[error("invalid overlap vector: {0}")]
    InvalidOverlapVector(String),

    #[error("degenerate activation: E[f'(g)^2] = {0}")]
    DegenerateActivation(f64),

    #[error("parameters outside the admissible region: {0}")]
    Inadmissible(String),

    #[error("invalid level `{0}`")]
    InvalidLevel(String),

    #[error("solver did not converge after {iters} iterations (residual {residual:e})")]
    NonConvergence { iters: usize, residual: f64 },

    #[error("free energy does not change sign on [{lo}, {hi}]")]
    BracketFailure { lo: f64, hi: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// True for failures caused by leaving a numerical domain (log of a
    /// non-positive value, non-finite integrand) rather than by the solver.
    pub fn is_domain(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::ReducerDomain(_)
                | Error::Inadmissible(_)
                | Error::OverlapOutOfRange(_)
                | Error::DegenerateActivation(_)
                | Error::QuadratureNonConvergence { .. }
        )
    }
}
