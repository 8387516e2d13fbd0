use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument outside the operation's domain.
    #[error("validation error: {0}")]
    Validation(String),

    /// `-A` is not Hurwitz, or a certificate failed its own contraction check.
    #[error("stability error: {reason} (offending eigenvalue {re:+.6e}{im:+.6e}i)")]
    Stability { reason: String, re: f64, im: f64 },

    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue:.6e}")]
    NotPsd { eigenvalue: f64 },

    /// Iterate left the finite range or exceeded the divergence guard.
    #[error("divergence at step {step}{}: |theta| = {norm:.6e}", replica.map(|r| format!(" in replica {r}")).unwrap_or_default())]
    Divergence {
        step: usize,
        replica: Option<usize>,
        norm: f64,
    },

    /// The MDP/policy pair does not define a valid TD problem.
    #[error("model error: {0}")]
    Model(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by bad input rather than numerical breakdown.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
