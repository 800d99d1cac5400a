//! Existence and stability analysis of periodic orbits of periodically
//! forced, perturbatively graded ODE systems.
//!
//! The pipeline: parse a system file ([`sysdsl`]), transport truncated
//! perturbation series and spatial jets of the time-T map through one period
//! ([`flow`]), average to obtain the displacement expansion ([`averaging`]),
//! reduce onto the manifold of unperturbed periodic states and expand the
//! branch of fixed points ([`reduction`]), then classify the branch through
//! spectral data of the return-map Jacobian ([`stability`]). Every prediction
//! can be cross-checked against a direct shooting computation ([`oracle`]).

pub mod averaging;
pub mod eps_series;
pub mod flow;
pub mod jets;
pub mod oracle;
pub mod poly;
pub mod reduction;
pub mod report;
pub mod scalar;
pub mod stability;
pub mod sysdsl;

/// Errors surfaced by the analysis pipeline.
///
/// The variants map one-to-one onto the CLI exit codes: `Parse` is 2,
/// `Numerics` and `Hypothesis` are 3, `Oracle` is 4.
#[derive(thiserror::Error, Debug)]
pub enum AvError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("numerical failure: {0}")]
    Numerics(String),
    #[error("hypothesis check failed: {0}")]
    Hypothesis(String),
    #[error("oracle disagreement: {0}")]
    Oracle(String),
}

pub type Result<T> = std::result::Result<T, AvError>;
