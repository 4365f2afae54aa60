//! Dense tensors with reverse-mode gradients, the substrate for both the
//! recommender and the sampler.

mod block;
mod gradcheck;
mod graph;
mod linalg;
mod params;
mod tensor;

pub use block::{causal_self_attention_block, BlockOutput, BlockParams, INIT_STD, LAYER_NORM_EPS};
pub use gradcheck::{finite_difference_check, GradCheckReport, DEFAULT_MAGNITUDE_FLOOR};
pub use graph::{Candidates, Graph, Var};
pub use params::{truncated_normal, Bound, Grads, ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use linalg::gemm;

#[cfg(test)]
mod tests;
