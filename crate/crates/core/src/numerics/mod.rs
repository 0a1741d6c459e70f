//! Dense f32 tensors with hand-written gradients for the fixed model graph.

mod kernels;
mod ops;
mod rng;
mod sgd;
mod tensor;

pub(crate) use kernels::{gemm_nn, gemm_nt, gemm_tn};
pub use ops::{
    cosine_similarity, cosine_similarity_backward, finite_difference_grad, log_softmax_row, matmul,
    matmul_backward, softmax_cross_entropy, softmax_row,
};
pub use rng::SeededRng;
pub use sgd::SgdState;
pub use tensor::Tensor;
