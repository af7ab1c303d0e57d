//! A small CPU tensor engine: NCHW tensors, a recording graph with
//! reverse-mode gradients, and Adam.

mod conv;
mod graph;
mod params;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use params::{Adam, ParamStore};
pub use tensor::{Real, Tensor};

pub(crate) use graph::softmax_channels;
