use thiserror::Error;

/// Errors raised by the simulator and the fitting pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("m_S = {0} is not one of -1, 0, +1")]
    InvalidSpinProjection(i32),

    #[error("basis index {0} out of range 0..6")]
    BasisIndex(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// Propagation finished but the state failed the physicality checks,
    /// typically because the rates make the generator too stiff.
    #[error("evolution produced an unphysical state: {0}")]
    Unphysical(String),

    #[error("step too large: dt * |generator| = {product:.3e} exceeds {limit}")]
    StepTooLarge { product: f64, limit: f64 },

    #[error("invalid gate: {0}")]
    InvalidGate(String),

    #[error("engine/noise mismatch: {0}")]
    EngineMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("fit window too short: {0}")]
    WindowTooShort(String),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
