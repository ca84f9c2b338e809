//! Minimal differentiable-computation substrate.

mod checkpoint;
mod graph;
pub mod gradcheck;
mod matrix;
mod mlp;
mod optim;
mod params;

pub use checkpoint::{load_params_into, read_params, write_params};
pub use graph::{column_bilinear, expectile, gelu, layer_norm, Graph, Var, LAYER_NORM_EPS};
pub use matrix::{gemm, Matrix};
pub use mlp::{Bind, Mlp};
pub use optim::{Adam, EmaTarget};
pub use params::{Grads, ParamId, ParamStore};
