//! Hand-written 3D convolutional network with exact analytic gradients.

mod checkpoint;
mod conv;
mod munet;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use conv::{conv3d_backward, conv3d_forward, ConvGrads, ConvLayer, KERNEL, TAPS};
pub use munet::{
    init_params, munet_backward, munet_forward, munet_predict, MuNet, MuNetGrads, NetParams,
    NetShape, Tape,
};
pub use tensor::{concat_channels, relu_backward, relu_forward, split_channels, Real, Tensor5};
