//! Layers, architectures and the shared-parameter network.

mod arch;
mod block;
mod layers;
mod network;

pub use arch::{ActShape, Architecture, AuxHeadSpec, LayerSpec};
pub use block::{gather_leading, scatter_leading};
pub use layers::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, dense_backward, dense_forward, global_avg_pool,
    global_avg_pool_backward, relu_backward, relu_forward, softmax_cross_entropy, BatchNormCache, BN_EPS, BN_MOMENTUM,
};
pub use network::{param_name, Buffer, ForwardTrace, Gradients, Mode, NestedNetwork, Param, ParamRole};
