use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("tape state error: {0}")]
    State(&'static str),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("truncated input at byte offset {offset}")]
    Truncated { offset: usize },

    #[error("corrupt record {record}: {detail}")]
    CorruptRecord { record: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint shape table mismatch: {0}")]
    ShapeTable(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        history: Vec<crate::train::EpochRecord>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
