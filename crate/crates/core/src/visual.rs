//! Visual cue encoder: a small trainable frame-embedding stack followed by
//! a residual dilated TCN, plus temporal alignment to the chunk grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, SparseMap, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-frame visual features `[F_v, I_raw]` at `frame_rate` Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualStream {
    pub feature_dim: usize,
    pub frame_rate: u32,
    /// Row-major `[feature_dim, frames]`.
    pub data: Vec<f32>,
}

impl VisualStream {
    pub fn new(feature_dim: usize, frame_rate: u32, data: Vec<f32>) -> Result<Self> {
        if feature_dim == 0 || data.len() % feature_dim != 0 {
            return Err(Error::shape("VisualStream", format!("{} values for feature dim {feature_dim}", data.len())));
        }
        Ok(Self { feature_dim, frame_rate, data })
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.feature_dim.max(1)
    }

    pub fn at(&self, feature: usize, frame: usize) -> f32 {
        self.data[feature * self.frames() + frame]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.feature_dim, self.frames()], |i| T::from_f64_lossy(self.data[i] as f64))
    }
}

/// Frames needed to cover `duration_s` seconds.
pub fn frames_for(duration_s: f64, frame_rate: u32) -> usize {
    (duration_s * frame_rate as f64 - 1e-9).ceil() as usize
}

#[derive(Debug, Clone)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    geom: ConvGeom,
}

impl Conv {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        path: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_uniform(format!("{path}.weight"), &[cout, cin, kernel], cin * kernel, rng),
            bias: store.add(format!("{path}.bias"), Tensor::zeros(&[cout])),
            geom: ConvGeom::same(kernel, dilation),
        }
    }

    fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv1d_geom(cx.p(self.weight), self.geom)?.add_channel_bias(cx.p(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct VisualFrontend {
    pointwise: Conv,
    temporal: Conv,
    tcn_blocks: Vec<Conv>,
    projection: Conv,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub dim: usize,
}

impl VisualFrontend {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, path: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let vc = &cfg.visual;
        let (f, e) = (vc.feature_dim, vc.embed_dim);
        Self {
            pointwise: Conv::new(store, &format!("{path}.embed.pointwise"), f, e, 1, 1, rng),
            temporal: Conv::new(store, &format!("{path}.embed.temporal"), e, e, 3, 1, rng),
            tcn_blocks: (0..vc.tcn_blocks)
                .map(|i| Conv::new(store, &format!("{path}.tcn.{i}"), e, e, vc.tcn_kernel, 1 << i, rng))
                .collect(),
            projection: Conv::new(store, &format!("{path}.tcn.proj"), e, cfg.dim, 1, 1, rng),
            feature_dim: f,
            embed_dim: e,
            dim: cfg.dim,
        }
    }

    /// `v[F_v, I_raw] -> [E, I_raw]`: pointwise conv + GeLU, temporal conv + GeLU.
    pub fn extract_embedding<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = v.shape();
        if s.len() != 2 || s[0] != self.feature_dim {
            return Err(Error::shape("extract_embedding", format!("stream {s:?}, expected [{}, I]", self.feature_dim)));
        }
        if s[1] == 0 {
            return Err(Error::EmptyInput("extract_embedding"));
        }
        let h = self.pointwise.forward(cx, v)?.gelu()?;
        self.temporal.forward(cx, h)?.gelu()
    }

    /// Residual dilated blocks `x + gelu(conv_d(x))`, then a pointwise E-to-D projection.
    pub fn tcn<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, emb: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = emb;
        for block in &self.tcn_blocks {
            h = h.add(block.forward(cx, h)?.gelu()?)?;
        }
        self.projection.forward(cx, h)
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        let emb = self.extract_embedding(cx, v)?;
        self.tcn(cx, emb)
    }

    /// Frames of context seen by one TCN output frame.
    pub fn receptive_field(kernel: usize, blocks: usize) -> usize {
        1 + (0..blocks).map(|i| (kernel - 1) << i).sum::<usize>()
    }
}

/// Frame-centre-aligned linear interpolation of `f[D, I_raw]` to `I_target` frames.
pub fn align_to_chunks<'t, T: Scalar>(f: Var<'t, T>, target: usize) -> Result<Var<'t, T>> {
    let s = f.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::shape("align_to_chunks", format!("features {s:?}")));
    }
    if target == 0 {
        return Err(Error::Config("align_to_chunks target must be >= 1".into()));
    }
    let (d, raw) = (s[0], s[1]);
    if raw == target {
        return Ok(f);
    }
    f.sparse_map(interpolation_map(d, raw, target))
}

pub(crate) fn interpolation_map<T: Scalar>(d: usize, raw: usize, target: usize) -> SparseMap<T> {
    let ratio = raw as f64 / target as f64;
    let mut rows = Vec::with_capacity(d * target);
    for c in 0..d {
        for j in 0..target {
            let pos = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, (raw - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(raw - 1);
            let w = pos - lo as f64;
            let mut row = vec![(c * raw + lo, T::from_f64_lossy(1.0 - w))];
            if hi != lo && w > 0.0 {
                row.push((c * raw + hi, T::from_f64_lossy(w)));
            }
            rows.push(row);
        }
    }
    SparseMap::from_rows(&[d, target], d * raw, rows)
}
