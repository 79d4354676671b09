//! Minimal tensor, autograd and layer toolkit backing the models.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{BatchStats, Gradients, Graph, Var};
pub use layers::{apply_batch_stats, bind, BatchNorm, Conv2d, ConvNorm, Linear, Mode};
pub use optim::{Masks, Sgd};
pub use params::{Init, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;
