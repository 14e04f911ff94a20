//! Minimal CPU neural-network engine: dense `f64` tensors, convolution,
//! transposed convolution, max pooling, ReLU, MSE loss and ADAM.

mod adam;
mod layers;
mod loss;
mod network;
mod tensor;
mod weights;

pub mod gradcheck;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::{
    clamp01, clamp01_backward, crop_to, encoded_rescale, pad_to, relu, relu_backward, rescale_backward,
    rescale_to, Conv, ConvTranspose, MaxPool,
};
pub use loss::mse_loss;
pub use network::{Layer, LayerGrad, Mode, Sequential, Trace};
pub(crate) use network::hex_digest;
pub use tensor::Tensor;
pub use weights::{
    decode_weights, encode_weights, load_weights, save_weights, WEIGHT_MAGIC, WEIGHT_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weight file checksum mismatch")]
    ChecksumMismatch,
    #[error("corrupt weight file: {0}")]
    CorruptWeights(String),
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),
    #[error("layer {0} has no backward pass")]
    NotDifferentiable(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
