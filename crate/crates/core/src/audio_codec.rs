//! Convolutional front-end (before the Branchformer) and the
//! transposed-convolution decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mono waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self { samples: self.samples.iter().map(|v| v * gain).collect(), sample_rate: self.sample_rate }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.samples.len()], |i| T::from_f64_lossy(self.samples[i]))
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, sample_rate: u32) -> Self {
        Self { samples: t.to_f64_vec(), sample_rate }
    }
}

/// Front-end output `h[D, L]` plus the frame geometry needed to decode.
#[derive(Debug, Clone, Copy)]
pub struct EncodedAudio<'t, T: Scalar> {
    pub features: Var<'t, T>,
    pub frame_stride_samples: usize,
    pub frame_kernel_samples: usize,
    pub input_len: usize,
}

impl<T: Scalar> EncodedAudio<'_, T> {
    pub fn frames(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Number of encoder frames for `samples` input samples.
pub fn frame_count(samples: usize, kernel: usize) -> Option<usize> {
    let stride = kernel / 2;
    (samples >= kernel).then(|| (samples - kernel) / stride + 1)
}

/// Bias-free 1-to-D convolution with kernel K and stride K/2, then ReLU.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub weight: ParamId,
    pub kernel: usize,
    pub dim: usize,
}

impl AudioEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, path: &str, dim: usize, kernel: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{path}.weight"), &[dim, 1, kernel], kernel, rng);
        Self { weight, kernel, dim }
    }

    pub fn stride(&self) -> usize {
        self.kernel / 2
    }

    /// Encodes `x[1, T]` (or `x[T]`).
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<EncodedAudio<'t, T>> {
        let x = match x.shape()[..] {
            [n] => x.reshape(&[1, n])?,
            [1, _] => x,
            ref s => return Err(Error::shape("encode_frontend", format!("expected a mono signal, got {s:?}"))),
        };
        let len = x.shape()[1];
        if len < self.kernel {
            return Err(Error::InputTooShort { op: "encode_frontend", len, min: self.kernel });
        }
        let features = self.pre_activation(cx, x)?.relu()?;
        Ok(EncodedAudio { features, frame_stride_samples: self.stride(), frame_kernel_samples: self.kernel, input_len: len })
    }

    /// Convolution output before the ReLU.
    pub fn pre_activation<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv1d(cx.p(self.weight), self.stride())
    }
}

/// Transposed convolution D-to-1 applied to `mask ⊙ h`.
#[derive(Debug, Clone)]
pub struct AudioDecoder {
    pub weight: ParamId,
    pub kernel: usize,
}

impl AudioDecoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, path: &str, dim: usize, kernel: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{path}.weight"), &[dim, 1, kernel], dim, rng);
        Self { weight, kernel }
    }

    /// Untrimmed reconstruction `[1, (L-1)*K/2 + K]`.
    pub fn reconstruct<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, mask: Var<'t, T>, h: &EncodedAudio<'t, T>) -> Result<Var<'t, T>> {
        let (ms, hs) = (mask.shape(), h.features.shape());
        if ms != hs {
            return Err(Error::shape("decode", format!("mask {ms:?} vs features {hs:?}")));
        }
        mask.mul(h.features)?.conv1d_transpose(cx.p(self.weight), self.kernel / 2)
    }

    /// Waveform `[T]` trimmed or zero-padded to the encoder's input length.
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, mask: Var<'t, T>, h: &EncodedAudio<'t, T>) -> Result<Var<'t, T>> {
        self.reconstruct(cx, mask, h)?.fit_last(h.input_len)?.reshape(&[h.input_len])
    }
}
