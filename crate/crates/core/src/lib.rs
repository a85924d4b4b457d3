//! Vector-quantized image autoencoder with adversarial and perceptual
//! training, a channel-wise PCA baseline and an ablation harness, all on a
//! small reverse-mode autodiff engine over `f64` tensors.

pub mod autodiff;
pub mod codebook;
pub mod codec;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod pca;
pub mod pos_encoding;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use codebook::{Codebook, QuantizationResult};
pub use codec::{ModelConfig, VqModel};
pub use error::{Error, Result};
pub use harness::{Checkpoint, ExperimentSpec, GridConfig, Trainer};
pub use losses::{LossBreakdown, LossWeights};
pub use pca::PcaModel;
pub use pos_encoding::PositionalEncoding2D;
pub use tensor::Tensor;
