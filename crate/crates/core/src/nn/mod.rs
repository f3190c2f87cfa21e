//! Dense double-precision network stack: tensors, a reverse-mode tape, MLPs
//! with sharing-aware parameter binding, Adam and orthogonal init.

pub mod checkpoint;
pub mod graph;
pub mod init;
pub mod mlp;
pub mod optim;
pub mod store;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use mlp::{bind_sharing, forward, infer, HeadKind, HeadOut, MlpSpec, SharingMode};
pub use optim::{clip_grad_norm, Adam};
pub use store::{ParamStore, SlotId};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("loss does not depend on any parameter")]
    Detached,
    #[error("slot {0} has no binding")]
    Dangling(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
