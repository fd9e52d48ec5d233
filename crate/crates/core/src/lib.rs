//! Audio-visual speech separation for a flexible number of speakers.
//!
//! A time-domain encoder/mask/decoder network with one separation branch per
//! visual cue and a counting head that decides which branches hold a real
//! speaker. Everything numeric is generic over [`Scalar`] (`f32` or `f64`)
//! and differentiated by the tape in [`autodiff`].
//!
//! ```
//! use avfsnet::config::ModelConfig;
//! use avfsnet::audio_codec::Waveform;
//! use avfsnet::model::{AvfsNet32, MaskMode};
//! use avfsnet::visual::VisualStream;
//!
//! let net = AvfsNet32::new(ModelConfig::tiny(), 0).unwrap();
//! let mixture = Waveform::zeros(4000, 8000);
//! let cues = vec![VisualStream::new(8, 25, vec![0.0; 8 * 13]).unwrap(); 2];
//! let (waves, probs) = net.infer(&mixture, &cues, MaskMode::Learned).unwrap();
//! assert_eq!((waves.len(), probs.len()), (2, 2));
//! ```

pub mod autodiff;
pub mod error;
pub mod gradcheck;
mod linalg;
pub mod params;
pub mod scalar;
pub mod tensor;

pub mod audio_codec;
pub mod branchformer;
pub mod config;
pub mod counting;
pub mod data_synth;
pub mod layers;
pub mod losses;
pub mod model;
pub mod separator;
pub mod spectrogram;
pub mod training;
pub mod visual;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{AvfsNet, AvfsNet32, AvfsNet64};
pub use params::{ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
