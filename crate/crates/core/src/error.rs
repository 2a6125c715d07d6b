use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    InputShape { expected: String, got: String },

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate classifier: logit margins need at least 2 classes, got {0}")]
    DegenerateClassifier(usize),

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid mask: forget set covers all {0} classes")]
    InvalidMask(usize),

    #[error("perturbation failed: {0}")]
    Perturbation(String),

    #[error("empty perturbation tube")]
    EmptyTube,

    #[error("empty support set for class {0}")]
    EmptySupport(usize),

    #[error("degenerate prototype for class {0}: zero norm under cosine head")]
    DegeneratePrototype(usize),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("empty training data: {0}")]
    EmptyData(&'static str),

    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFiniteLoss { value: f64, epoch: usize, step: usize },

    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
