//! Minimal differentiable engine: tensors, a gradient tape, convolutional
//! networks, the Adam optimizer and a binary checkpoint format.

mod adam;
pub mod checkpoint;
mod network;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use network::{
    build_discriminator, build_generator, Activation, DiscriminatorConfig, GeneratorConfig, LayerNode, LayerSpec,
    NetRole, Network, INIT_STD, LEAKY_SLOPE,
};
pub use tape::{conv_out_size, Tape, Var, BCE_EPS, NORM_EPS};
pub use tensor::{Scalar, Tensor};

pub(crate) use tape::bce_value;

/// Mean binary cross-entropy with predictions clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> crate::Result<T> {
    if pred.shape() != target.shape() {
        return Err(crate::Error::Shape(format!(
            "bce between {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(bce_value(pred.data(), target.data()))
}
