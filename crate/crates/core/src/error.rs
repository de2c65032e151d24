use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Every failure the core can report. Variants map onto the CLI exit-code
/// classes: `Config`/`Usage`/`Shape`/`Index` are usage errors, `Data` is a
/// data-consistency error.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands whose shapes cannot be combined by `op`.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An id outside its valid range, e.g. a phoneme id past the table size.
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    Axis {
        axis: usize,
        rank: usize,
    },
    /// `backward` was called on a tensor with more than one element.
    NotScalar(Vec<usize>),
    Config(String),
    Input(String),
    Usage(String),
    /// Inconsistent training data (e.g. durations not summing to frame count).
    Data {
        utt_id: Option<String>,
        detail: String,
    },
    /// A non-finite gradient reached the optimizer.
    NonFinite {
        param: String,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn data(detail: impl Into<String>) -> Self {
        Error::Data {
            utt_id: None,
            detail: detail.into(),
        }
    }

    /// Attaches an utterance id to a data-consistency error; other variants
    /// pass through untouched.
    pub fn with_utterance(self, id: &str) -> Self {
        match self {
            Error::Data { utt_id: None, detail } => Error::Data {
                utt_id: Some(id.into()),
                detail,
            },
            other => other,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "dimension error in {op}: {left:?} vs {right:?}")
            }
            Error::Index { what, index, bound } => {
                write!(f, "{what} {index} out of range (must be < {bound})")
            }
            Error::Axis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank-{rank} tensor")
            }
            Error::NotScalar(shape) => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Data {
                utt_id: Some(id),
                detail,
            } => write!(f, "data-consistency error in utterance {id}: {detail}"),
            Error::Data {
                utt_id: None,
                detail,
            } => write!(f, "data-consistency error: {detail}"),
            Error::NonFinite { param } => {
                write!(f, "non-finite gradient for parameter `{param}`")
            }
        }
    }
}

#[cfg(feature = "std")]
extern crate std;

#[cfg(feature = "std")]
impl std::error::Error for Error {}
