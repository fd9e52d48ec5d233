//! Speaker-presence classifier over separator masks and threshold-based
//! selection of output sources.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio_codec::Waveform;
use crate::autodiff::{ConvGeom, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{Ctx, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CountingHead {
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub conv_kernel: usize,
    pub pool: usize,
    pub attn: MultiHeadAttention,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

impl CountingHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, path: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let cc = &cfg.counting;
        Ok(Self {
            conv_weight: store.add_uniform(format!("{path}.conv.weight"), &[cc.dim, cfg.dim, cc.conv_kernel], cfg.dim * cc.conv_kernel, rng),
            conv_bias: store.add(format!("{path}.conv.bias"), Tensor::zeros(&[cc.dim])),
            conv_kernel: cc.conv_kernel,
            pool: cc.pool,
            attn: MultiHeadAttention::new(store, &format!("{path}.attn"), cc.dim, cc.heads, rng)?,
            mlp1: Linear::new(store, &format!("{path}.mlp1"), cc.dim, cc.mlp_hidden, true, rng),
            mlp2: Linear::new(store, &format!("{path}.mlp2"), cc.mlp_hidden, 1, true, rng),
        })
    }

    /// `m[D, L] -> [D_c, floor(L/pool)]`: same-padded conv, GeLU, max-pool.
    pub fn mask_to_frames<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, mask: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = mask.shape();
        if s.len() != 2 {
            return Err(Error::shape("mask_to_frames", format!("expected [D, L], got {s:?}")));
        }
        if s[1] < self.pool {
            return Err(Error::InputTooShort { op: "mask_to_frames", len: s[1], min: self.pool });
        }
        mask.conv1d_geom(cx.p(self.conv_weight), ConvGeom::same(self.conv_kernel, 1))?
            .add_channel_bias(cx.p(self.conv_bias))?
            .gelu()?
            .max_pool1d(self.pool)
    }

    /// Self-attention over `f[D_c, L']` then mean over time, giving `[D_c]`.
    pub fn attend_pool<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, frames: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = frames.shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape("attend_pool", format!("frames {s:?}")));
        }
        self.attn.forward(cx, frames.t()?)?.mean_rows()
    }

    /// Pre-sigmoid score `Linear2(GeLU(Linear1(f)))`, shape `[1]`.
    pub fn logit<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let n = f.numel();
        let h = self.mlp1.forward(cx, f.reshape(&[1, n])?)?.gelu()?;
        self.mlp2.forward(cx, h)?.reshape(&[1])
    }

    pub fn presence_probability<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        self.logit(cx, f)?.sigmoid()
    }

    /// Full path from a mask to `p`, shape `[1]`.
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, mask: Var<'t, T>) -> Result<Var<'t, T>> {
        let frames = self.mask_to_frames(cx, mask)?;
        let f = self.attend_pool(cx, frames)?;
        self.presence_probability(cx, f)
    }
}

/// Per-branch presence probabilities and the thresholded selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceEstimate {
    pub probabilities: Vec<f64>,
    pub threshold: f64,
    pub selected_indices: Vec<usize>,
    pub estimated_count: usize,
}

impl PresenceEstimate {
    /// Keeps branches with `p >= threshold`, in branch order.
    pub fn from_probabilities(probabilities: Vec<f64>, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1], got {threshold}")));
        }
        let selected_indices: Vec<usize> =
            probabilities.iter().enumerate().filter(|(_, &p)| p >= threshold).map(|(i, _)| i).collect();
        Ok(Self { estimated_count: selected_indices.len(), probabilities, threshold, selected_indices })
    }

    pub fn is_selected(&self, branch: usize) -> bool {
        self.selected_indices.binary_search(&branch).is_ok()
    }
}

/// Pair probabilities with waveforms and keep the selected ones.
pub fn count_and_select(
    probabilities: &[f64],
    waveforms: &[Waveform],
    threshold: f64,
) -> Result<(PresenceEstimate, Vec<Waveform>)> {
    if probabilities.len() != waveforms.len() {
        return Err(Error::Pairing { masks: probabilities.len(), waveforms: waveforms.len() });
    }
    let est = PresenceEstimate::from_probabilities(probabilities.to_vec(), threshold)?;
    let selected = est.selected_indices.iter().map(|&i| waveforms[i].clone()).collect();
    Ok((est, selected))
}
