//! Dense `f64` tensors and a small reverse-mode differentiation engine.

pub mod graph;
pub mod params;
pub mod rng;
pub mod sum;
pub mod tensor;

pub use graph::{alpha_dropout_affine, Activation, BinTarget, Graph, OuterKind, Var, ALPHA_PRIME};
pub use params::{Adam, AdamConfig, BoundParams, ParamStore};
pub use rng::SeededRng;
pub use sum::exact_sum;
pub use tensor::Tensor;
