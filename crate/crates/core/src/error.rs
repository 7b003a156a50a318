use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operands of `op` have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A matrix was requested with a zero dimension.
    EmptyMatrix { rows: usize, cols: usize },
    /// Backing buffer does not match the declared shape.
    DataLength { expected: usize, actual: usize },
    NonFinite,
    RankOutOfRange { rank: usize, max: usize },
    BitCountOutOfRange(u32),
    RateOutOfRange(f64),
    LabelOutOfRange { label: u32, class_count: usize },
    EmptySplit,
    /// A compression plan or probe addressed a layer of the wrong kind.
    NotDense { layer: usize },
    LayerIndex { layer: usize, count: usize },
    InvalidModel(String),
    InvalidConfig(String),
    InvalidDataset(String),
    /// Energy ledger problems (too few samples, non-monotonic time, bad marks).
    Ledger(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch between {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::EmptyMatrix { rows, cols } => {
                write!(f, "matrix dimensions must be non-zero, got {rows}x{cols}")
            }
            Error::DataLength { expected, actual } => {
                write!(f, "expected {expected} values, got {actual}")
            }
            Error::NonFinite => write!(f, "input contains non-finite values"),
            Error::RankOutOfRange { rank, max } => {
                write!(f, "rank {rank} outside the valid range 1..={max}")
            }
            Error::BitCountOutOfRange(n) => write!(f, "bit count {n} exceeds 32"),
            Error::RateOutOfRange(r) => write!(f, "rate {r} outside [0, 1]"),
            Error::LabelOutOfRange { label, class_count } => {
                write!(f, "label {label} out of range for {class_count} classes")
            }
            Error::EmptySplit => write!(f, "dataset split is empty"),
            Error::NotDense { layer } => write!(f, "layer {layer} is not a dense layer"),
            Error::LayerIndex { layer, count } => {
                write!(f, "layer index {layer} out of range for {count} layers")
            }
            Error::InvalidModel(msg) => write!(f, "invalid model: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::InvalidDataset(msg) => write!(f, "invalid dataset: {msg}"),
            Error::Ledger(msg) => write!(f, "energy ledger: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
