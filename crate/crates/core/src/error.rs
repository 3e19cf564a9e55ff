use thiserror::Error;

/// Errors raised by the solvers, operators and configuration layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context} did not converge after {iters} iterations (residual {residual:e})")]
    NonConverged {
        context: &'static str,
        iters: usize,
        residual: f64,
    },

    #[error(
        "smallness assumption violated: L_phi = {lip_phi} with gamma_A = {gamma}; \
         general bound L_phi < 1/gamma_A = {bound_general}, \
         gradient bound L_phi < 2 sqrt(gamma_A)/(1+gamma_A) = {bound_potential}"
    )]
    SmallnessViolated {
        gamma: f64,
        lip_phi: f64,
        bound_general: f64,
        bound_potential: f64,
    },

    #[error("operator `{0}` has no analytic resolvent derivative and the numeric fallback is disabled")]
    MissingDerivative(&'static str),

    #[error("reference point is not a solution: resolvent identity violated by {0:e}")]
    NotASolution(f64),

    #[error("difference quotients drift by {drift:e}, above the threshold {threshold:e}")]
    NonConvergedDerivative { drift: f64, threshold: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
