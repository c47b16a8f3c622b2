//! Minimal neural-network toolkit: channel-major feature maps, layers with
//! explicit backward passes, and Adam.

pub mod layers;
pub mod optim;
pub mod param;
pub mod tensor;

pub use layers::{Act, BatchNorm2d, ConvBlock, Conv2d, ConvTranspose2d, Linear, Mode};
pub use optim::{Adam, AdamConfig};
pub use param::{
    freeze_all, grad_norm_sq, init_weights, load_named, named_buffers, named_params, param_count, param_hash, zero_grad,
    Module, Param, ParamKind,
};
pub use tensor::{ConvGeom, Real};
