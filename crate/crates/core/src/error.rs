use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use crate::finetune::ShadowState;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bit width {0} outside [2, 32]")]
    InvalidBitWidth(u32),
    #[error("fractional length {0} outside [-126, 126]")]
    InvalidFracLen(i32),
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("stochastic rounding requested without a random stream")]
    MissingRng,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("degenerate output size for {0}")]
    DegenerateOutput(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("layer `{0}` is not quantizable")]
    NotQuantizable(String),
    #[error("scheme has no format for layer `{0}`")]
    MissingLayerFormat(String),
    #[error("dangling reference to layer `{0}`")]
    DanglingReference(String),
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
    #[error("incomplete range profile: {0}")]
    IncompleteProfile(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged {
        iteration: usize,
        loss: f32,
        state: Box<ShadowState>,
    },
}
