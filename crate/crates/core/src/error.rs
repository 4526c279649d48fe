use thiserror::Error;

/// Errors raised by the library.
///
/// `is_numerical` separates failures of a computation (overflow, a scan that
/// never terminates, a generator that gives up) from rejected input.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("step-size assumption A2 violated: need 1 > alpha > beta > 0, got alpha={alpha}, beta={beta}")]
    InvalidSchedule { alpha: f64, beta: f64 },

    #[error("degenerate timescales: alpha == beta makes the finite-time constants infinite (assumption A2)")]
    DegenerateTimescales,

    #[error("{which} is singular to working precision")]
    SingularMatrix { which: &'static str },

    #[error("assumption violated: {which}")]
    AssumptionViolated { which: String },

    #[error("non-finite iterate at index {index}")]
    NonFinite { index: u64 },

    #[error("scan for {name} exceeded the cap of {cap} iterations")]
    CapExceeded { name: String, cap: u64 },

    #[error("transition matrix is not irreducible and aperiodic")]
    NotErgodic,

    #[error("feature matrix is rank deficient (rank < {dim})")]
    RankDeficient { dim: usize },

    #[error("random MDP generation failed after {tries} tries")]
    GenerationFailed { tries: u32 },

    #[error("trajectory has no noise record from index {from}")]
    MissingNoise { from: u64 },

    #[error("trajectory was projected at index {index} inside the decomposition window")]
    ProjectedStretch { index: u64 },

    #[error("rate window [{lo}, {hi}] holds fewer than two usable checkpoints")]
    DegenerateWindow { lo: u64, hi: u64 },
}

impl Error {
    /// True for failures of a computation rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::CapExceeded { .. }
                | Error::GenerationFailed { .. }
                | Error::DegenerateWindow { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
