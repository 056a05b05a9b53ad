//! Multi-task MFM residual network: tensors, layers, the model, and its
//! checkpoint format.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{
    normalize_columns, param_count, printed_count, BnUpdate, ClassifierKind, ForwardMode,
    ForwardOutput, ForwardTrace, HeadParams, HeadUpstream, MtlNetwork, NetConfig, NetParams,
    ParamClass, ParamCountReport, SD_CLASSES,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("missing forward trace: backward needs a train-mode forward")]
    MissingTrace,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
