use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, extents).
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("weight container: {0}")]
    Format(#[from] FormatError),

    /// An objective or iterate stopped being finite.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }
}

/// Failures while decoding or validating an ELPW weight container.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes (expected \"ELPW\")")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("data ends inside {0}")]
    Truncated(&'static str),
    #[error("invalid UTF-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("tensor `{0}` has rank {1}, at most 4 is supported")]
    Rank(String, u8),
    #[error("tensor `{0}` holds NaN or infinite values")]
    NonFinitePayload(String),
    #[error("tensor `{0}` appears twice")]
    DuplicateTensor(String),
    #[error("malformed metadata line {0:?}")]
    BadMetadata(String),
    #[error("missing metadata key `{0}`")]
    MissingMetadata(&'static str),
    #[error("unknown architecture id `{0}`")]
    UnknownArchitecture(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{0}` is not used by the architecture")]
    UnexpectedTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("layer weight `{0}` has a negative entry")]
    NegativeLayerWeight(String),
    #[error("keep probability {0} is outside (0, 1]")]
    KeepProb(f32),
    #[error("extent too large to encode: {0}")]
    Oversize(String),
}
