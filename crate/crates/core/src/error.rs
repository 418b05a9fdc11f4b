use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("bad magic in {kind} container")]
    BadMagic { kind: &'static str },

    #[error("unsupported {kind} container version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u16,
        expected: u16,
    },

    #[error("malformed {kind} data: {detail}")]
    Malformed { kind: &'static str, detail: String },

    #[error("config digest mismatch: checkpoint has {found}, run config has {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error("sampler diverged at step {step}: |z|_inf = {norm}")]
    Diverged { step: usize, norm: f64 },

    #[error("{0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn malformed(kind: &'static str, detail: impl Into<String>) -> Error {
    Error::Malformed {
        kind,
        detail: detail.into(),
    }
}
