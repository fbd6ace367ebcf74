//! Dense tensors, reverse-mode differentiation, optimizers, and seeded randomness.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{evaluate, grad_check};
pub use graph::{Binding, Gradients, Graph, NodeId};
pub use nn::{Activation, Linear, Mlp};
pub use optim::Adam;
pub use params::{Moments, ParamId, ParamStore};
pub use rng::RngStream;
pub use tensor::Tensor;
