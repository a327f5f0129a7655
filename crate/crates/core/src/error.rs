use thiserror::Error;

/// Why a dataset or checkpoint file was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FormatCode {
    BadMagic,
    UnsupportedVersion,
    Truncated,
    OverlappingOffsets,
    ShapeMismatch,
    /// Structurally invalid content (bad JSON, out-of-range label, unknown dtype, trailing bytes).
    Malformed,
}

impl FormatCode {
    /// Stable numeric code, also used as the CLI exit status.
    pub fn code(self) -> u8 {
        match self {
            FormatCode::BadMagic => 10,
            FormatCode::UnsupportedVersion => 11,
            FormatCode::Truncated => 12,
            FormatCode::OverlappingOffsets => 13,
            FormatCode::ShapeMismatch => 14,
            FormatCode::Malformed => 15,
        }
    }
}

/// Errors raised by tensor kernels, the tape, model assembly, and file formats.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("autograd error: {0}")]
    Autograd(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("format error {} ({code:?}): {detail}", code.code())]
    Format { code: FormatCode, detail: String },

    #[error("io error: {0}")]
    Io(String),

    #[error("training diverged at step {step}: first non-finite value in `{scope}` ({op})")]
    Diverged { step: usize, scope: String, op: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(code: FormatCode, detail: impl Into<String>) -> Self {
        Error::Format {
            code,
            detail: detail.into(),
        }
    }

    pub fn format_code(&self) -> Option<FormatCode> {
        match self {
            Error::Format { code, .. } => Some(*code),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
