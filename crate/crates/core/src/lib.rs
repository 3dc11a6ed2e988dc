//! Parser-prompted transformer for image restoration.
//!
//! A restoration network ([`backbone::IrNet`]) is conditioned on multi-scale
//! features computed from a segmentation rendering of the degraded input
//! ([`parser::ParserNet`]). Everything runs on a small reverse-mode autodiff
//! tape ([`autograd::Graph`]) that is generic over `f32`/`f64`.

pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli_io;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod imageio;
pub mod layers;
pub mod params;
pub mod parser;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use backbone::{ModelConfig, PptFormer};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use training::{Ablation, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type PptFormer32 = PptFormer<f32>;
pub type PptFormer64 = PptFormer<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
