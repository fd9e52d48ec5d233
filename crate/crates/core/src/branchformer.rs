//! Two-branch multi-scale encoder: global self-attention and a local
//! convolutional-gating MLP, merged by a learnable convex weight.
//!
//! Public entry points take channel-major `[D, L]` maps; internally the
//! branches run time-major `[L, D]` so projections act on the last axis.

use rand::Rng;

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{Ctx, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Convolutional spatial gating unit.
#[derive(Debug, Clone)]
pub struct Csgu {
    pub norm: LayerNorm,
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub half: usize,
}

impl Csgu {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        path: &str,
        hidden: usize,
        kernel: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden % 2 != 0 {
            return Err(Error::Config(format!("CSGU input size must be even, got {hidden}")));
        }
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {kernel}")));
        }
        let half = hidden / 2;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{path}.norm"), half, eps),
            dw_weight: store.add_uniform(format!("{path}.dw.weight"), &[half, kernel], kernel, rng),
            // unit bias starts the gate near identity
            dw_bias: store.add(format!("{path}.dw.bias"), Tensor::ones(&[half])),
            half,
        })
    }

    /// Time-major `[L, hidden] -> [L, hidden/2]`.
    pub fn forward_tm<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = z.shape();
        if s.len() != 2 || s[1] != 2 * self.half {
            return Err(Error::Config(format!("CSGU expects [L, {}], got {s:?}", 2 * self.half)));
        }
        let z1 = z.narrow(1, 0, self.half)?;
        let z2 = self.norm.forward(cx, z.narrow(1, self.half, self.half)?)?;
        let gate = z2
            .t()?
            .depthwise_conv1d(cx.p(self.dw_weight))?
            .add_channel_bias(cx.p(self.dw_bias))?
            .t()?;
        z1.mul(gate)
    }

    /// Channel-major `[hidden, L] -> [hidden/2, L]`.
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = z.shape();
        if s.len() != 2 || s[0] % 2 != 0 {
            return Err(Error::Config(format!("CSGU needs an even feature dimension, got {s:?}")));
        }
        self.forward_tm(cx, z.t()?)?.t()
    }
}

#[derive(Debug, Clone)]
pub struct MhsaBranch {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl MhsaBranch {
    pub fn forward_tm<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.attn.forward(cx, self.norm.forward(cx, x)?)
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_tm(cx, h.t()?)?.t()
    }
}

#[derive(Debug, Clone)]
pub struct CgmlpBranch {
    pub norm: LayerNorm,
    pub up: Linear,
    pub csgu: Csgu,
    pub down: Linear,
}

impl CgmlpBranch {
    pub fn forward_tm<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let z = self.up.forward(cx, self.norm.forward(cx, x)?)?.gelu()?;
        self.down.forward(cx, self.csgu.forward_tm(cx, z)?)
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_tm(cx, h.t()?)?.t()
    }
}

#[derive(Debug, Clone)]
pub struct BranchformerBlock {
    pub mhsa: MhsaBranch,
    pub cgmlp: CgmlpBranch,
    /// Merge weight is `sigmoid(alpha_logit)`.
    pub alpha_logit: ParamId,
    pub fixed_alpha: Option<f64>,
}

/// Per-block branch outputs, exposed for merge checks.
pub struct BlockTrace<'t, T: Scalar> {
    pub input: Var<'t, T>,
    pub mhsa: Var<'t, T>,
    pub cgmlp: Var<'t, T>,
    pub alpha: Var<'t, T>,
    pub output: Var<'t, T>,
}

impl BranchformerBlock {
    pub fn alpha<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>) -> Result<Var<'t, T>> {
        match self.fixed_alpha {
            Some(a) => Ok(cx.constant(Tensor::scalar(T::from_f64_lossy(a)))),
            None => cx.p(self.alpha_logit).sigmoid(),
        }
    }

    /// Time-major `[L, D]`: `x + α·mhsa(x) + (1-α)·cgmlp(x)`.
    pub fn trace_tm<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<BlockTrace<'t, T>> {
        let a = self.mhsa.forward_tm(cx, x)?;
        let b = self.cgmlp.forward_tm(cx, x)?;
        let alpha = self.alpha(cx)?;
        let one_minus = alpha.neg()?.add_scalar(T::one())?;
        let merged = a.scale_by(alpha)?.add(b.scale_by(one_minus)?)?;
        let output = x.add(merged)?;
        Ok(BlockTrace { input: x, mhsa: a, cgmlp: b, alpha, output })
    }
}

#[derive(Debug, Clone)]
pub struct BranchformerEncoder {
    pub blocks: Vec<BranchformerBlock>,
    pub dim: usize,
}

impl BranchformerEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, path: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let bc = &cfg.branchformer;
        let d = cfg.dim;
        let eps = cfg.layer_norm_eps;
        let mut blocks = Vec::with_capacity(bc.blocks);
        for i in 0..bc.blocks {
            let p = format!("{path}.{i}");
            blocks.push(BranchformerBlock {
                mhsa: MhsaBranch {
                    norm: LayerNorm::new(store, &format!("{p}.mhsa.norm"), d, eps),
                    attn: MultiHeadAttention::new(store, &format!("{p}.mhsa.attn"), d, bc.heads, rng)?,
                },
                cgmlp: CgmlpBranch {
                    norm: LayerNorm::new(store, &format!("{p}.cgmlp.norm"), d, eps),
                    up: Linear::new(store, &format!("{p}.cgmlp.up"), d, bc.hidden, true, rng),
                    csgu: Csgu::new(store, &format!("{p}.cgmlp.csgu"), bc.hidden, bc.csgu_kernel, eps, rng)?,
                    down: Linear::new(store, &format!("{p}.cgmlp.down"), bc.hidden / 2, d, true, rng),
                },
                alpha_logit: store.add(format!("{p}.alpha_logit"), Tensor::zeros(&[1])),
                fixed_alpha: bc.fixed_alpha,
            });
        }
        Ok(Self { blocks, dim: d })
    }

    pub fn forward_tm<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x;
        for block in &self.blocks {
            h = block.trace_tm(cx, h)?.output;
        }
        Ok(h)
    }

    /// `h_x[D, L] -> h_a[D, L]`.
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = h.shape();
        if s.len() != 2 || s[0] != self.dim || s[1] == 0 {
            return Err(Error::shape("branchformer", format!("input {s:?}, expected [{}, L>=1]", self.dim)));
        }
        self.forward_tm(cx, h.t()?)?.t()
    }
}
