//! Swin-UMamba and Swin-UMamba† segmentation networks built from first
//! principles: a dense tensor engine with reverse-mode autodiff, the S6
//! selective scan and its four-direction 2D wrapper, both encoder/decoder
//! variants, the training recipe, evaluation metrics, checkpoint I/O with
//! selective pretrained initialization, and parameter/FLOP accounting.

pub mod arch;
pub mod bench;
pub mod check;
pub mod check_net;
pub mod cli;
pub mod ssm;
pub mod error;
pub mod io;
pub mod data;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{DType, Storage, Tensor};
