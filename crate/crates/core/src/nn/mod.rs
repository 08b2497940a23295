//! Hand-written differentiable layers and the optimizer used to train the
//! desk-scale classifiers. Every layer exposes an explicit forward and a
//! backward that consumes the forward's cache; there is no autodiff graph.

mod activation;
pub mod checkpoint;
mod conv;
mod dense;
mod loss;
mod sgd;

pub use activation::{relu_backward, relu_forward};
pub use conv::{conv_output_size, Conv2d, ConvCache, ConvGrads};
pub use dense::{Dense, DenseGrads};
pub use loss::{argmax_rows, softmax_xent};
pub use sgd::{ParamSlot, Sgd, SgdConfig, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM};
