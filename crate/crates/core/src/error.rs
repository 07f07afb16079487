use thiserror::Error;

/// Errors raised by the simulator.
///
/// Variants split into input validation problems (bad configuration, out of
/// range indices) and numerical failures (non-convergence, step underflow,
/// degenerate fits). The CLI maps the two groups to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("index out of range: {what} = {index} (limit {limit})")]
    OutOfRange { what: &'static str, index: usize, limit: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("operator is not Hermitian (max deviation {0:.3e})")]
    NotHermitian(f64),

    #[error("no convergence in {what} after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("integrator step size underflow at t = {t:.6e} s (h = {h:.3e} s)")]
    StepUnderflow { t: f64, h: f64 },

    #[error("population at the Fock cutoff is {population:.3e} (limit {limit:.1e}); increase n_max")]
    Truncation { population: f64, limit: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("target unreachable: {0}")]
    Unreachable(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for failures of the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::StepUnderflow { .. }
                | Error::Truncation { .. }
                | Error::DegenerateFit(_)
                | Error::Unreachable(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
