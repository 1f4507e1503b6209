//! Minimal dense-tensor engine: layer forward/backward, cross-entropy and SGD.

mod engine;
mod layer;
mod loss;
mod params;

pub use engine::{backward, backward_with_input, forward, infer, GradientTape, LayerStack};
pub use layer::{stack_output_shape, LayerSpec, BN_EPS};
pub use loss::{cross_entropy, sgd_step};
pub use params::{ParamKey, ParameterTree, Role};
