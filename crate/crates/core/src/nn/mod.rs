//! U-Net regressor with hand-written backward passes.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod unet;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::ModelCheckpoint;
pub use loss::masked_mse;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{dataset_loss, predict, train, train_with_progress};
pub use unet::{unet_backward, unet_forward, Param, ParamSpec, UNetConfig, UNetLayout};
