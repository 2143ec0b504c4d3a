//! Dense tensor kernels with reverse-mode gradients and the Adam optimizer.

pub mod graph;
pub mod loss;
pub mod ops;
pub mod param;
pub mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use loss::{sigmoid, sigmoid_xent, sigmoid_xent_scalar, softmax, softmax_xent, softmax_xent_row};
pub use ops::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, depthwise_conv2d_backward,
    depthwise_conv2d_forward, global_avg_pool, global_avg_pool_backward, maxpool2d_backward,
    maxpool2d_forward, relu, relu_backward, residual_add, separable_conv2d, sparse_conv2d_backward,
    sparse_conv2d_forward, Padding, SparseBatch, WindowGeometry,
};
pub use param::{adam_step, uniform_init, AdamConfig, LayerParam, ParamId, ParamStore};
pub use tensor::{gemm, Scalar, Tensor};
