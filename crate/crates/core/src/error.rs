use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("integration blew up for {system} at step {step}")]
    Blowup { system: String, step: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("series too short: need at least {required} samples, have {available}")]
    Sizing { required: usize, available: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("generator {index} is not unit norm (norm = {norm})")]
    Normalization { index: usize, norm: f64 },

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("unknown scenario `{id}`; available: {available}")]
    UnknownScenario { id: String, available: String },

    #[error("scenario `{0}` is out of scope (Kuramoto-Sivashinsky is not supported by this engine)")]
    OutOfScope(String),

    #[error("exchange format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
