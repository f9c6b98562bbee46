//! Masked-diffusion pretraining of a conditioned ConvNeXt U-Net, frozen
//! dense-feature extraction and downstream segmentation heads.

pub mod backbone;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod features;
pub mod heads;
pub mod masking;
pub mod metrics;
pub mod objective;
pub mod pretrain;
pub mod visualize;

pub use error::{CmdError, Result};
