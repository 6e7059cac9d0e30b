//! Self-contained 2D convolutional segmentation network.

mod conv;
mod io;
mod train;
mod unet;

pub use conv::{activation_backward, conv2d_backward, conv2d_forward, Activation, ConvBlock, ConvGrads};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, FORMAT_VERSION, MAGIC};
pub use train::{train, TrainOptions, TrainReport};
pub use unet::{
    cross_entropy, softmax_channels, unet_backward, unet_forward, Architecture, Gradients,
    Prediction, Stage, UNetModel,
};
