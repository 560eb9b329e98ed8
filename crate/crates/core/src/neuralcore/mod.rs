//! Dense tensors and the forward/backward passes of every layer type the
//! networks use. All arithmetic is `f64`.

pub mod activation;
pub mod batchnorm;
pub mod conv;
mod gemm;
pub mod init;
pub mod linear;
pub mod pool;
pub mod temporal;
pub mod tensor;

pub use activation::{activation_backward, activation_forward, Activation};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BnCache, Mode, RunningStats};
pub use conv::{
    conv2d_backward, conv2d_forward, conv3d_backward, conv3d_forward, Conv2dSpec, ConvSpec,
};
pub use linear::{
    cross_entropy_loss, global_avgpool3d, global_avgpool3d_backward, linear_backward,
    linear_forward, softmax,
};
pub use pool::{maxpool3d_backward, maxpool3d_forward};
pub use temporal::{temporal_diff_backward, temporal_diff_forward, DiffKind};
pub use tensor::Tensor;

/// Gradients produced by a layer's backward pass.
#[derive(Clone, Debug)]
pub struct LayerGrad {
    /// One tensor per parameter, in the layer's parameter order.
    pub param_grads: Vec<Tensor>,
    pub input_grad: Tensor,
}
