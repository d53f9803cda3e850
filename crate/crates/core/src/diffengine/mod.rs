//! Reverse-mode differentiation, parameter storage and optimization.
//!
//! Every trainable component records its forward computation on a
//! [`Graph`]. Primitive array operations live in `ops`; geometry, splatting
//! and loss modules register their own adjoints through [`Graph::custom`].

mod graph;
pub mod gradcheck;
mod ops;
mod optim;
mod tensor;

pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, ParamGrads, Var};
pub use ops::sigmoid;
pub use optim::{cosine_lr, Adam, Moments, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
