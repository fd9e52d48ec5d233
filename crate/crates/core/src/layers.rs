//! Parameterized building blocks shared by the encoder, separator and
//! counting head.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A tape paired with the parameters it reads.
#[derive(Clone, Copy)]
pub struct Ctx<'t, 's, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub store: &'s ParamStore<T>,
}

impl<'t, 's, T: Scalar> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        path: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{path}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = bias.then(|| store.add(format!("{path}.bias"), Tensor::zeros(&[out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    /// Applies to the last axis of `x[.., in_dim]`.
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(cx.p(self.weight), self.bias.map(|b| cx.p(b)))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, dim: usize, eps: f64) -> Self {
        let gamma = store.add(format!("{path}.gamma"), Tensor::ones(&[dim]));
        let beta = store.add(format!("{path}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta, eps }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(cx.p(self.gamma), cx.p(self.beta), T::from_f64_lossy(self.eps))
    }
}

/// Multi-head self/cross attention with per-head scale `1/sqrt(D/heads)`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        path: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{path}.q"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{path}.k"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{path}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{path}.o"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn split_heads<'t, T: Scalar>(&self, x: Var<'t, T>, b: usize, l: usize) -> Result<Var<'t, T>> {
        let (h, d) = (self.heads, self.head_dim());
        if h == 1 {
            return x.reshape(&[b, l, d]);
        }
        x.reshape(&[b, l, h, d])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, l, d])
    }

    fn merge_heads<'t, T: Scalar>(&self, x: Var<'t, T>, b: usize, l: usize) -> Result<Var<'t, T>> {
        let (h, d) = (self.heads, self.head_dim());
        if h == 1 {
            return x.reshape(&[b, l, d]);
        }
        x.reshape(&[b, h, l, d])?.permute(&[0, 2, 1, 3])?.reshape(&[b, l, h * d])
    }

    fn batch_dims(x: &[usize], dim: usize) -> Result<(usize, usize)> {
        match x {
            [l, d] if *d == dim => Ok((1, *l)),
            [b, l, d] if *d == dim => Ok((*b, *l)),
            _ => Err(Error::shape("attention", format!("input {x:?}, expected [.., L, {dim}]"))),
        }
    }

    /// Queries from `xq[(B,) Lq, D]`, keys/values from `xkv[(B,) Lk, D]`.
    pub fn forward_cross<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, '_, T>,
        xq: Var<'t, T>,
        xkv: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let qs = xq.shape();
        let (b, lq) = Self::batch_dims(&qs, self.dim)?;
        let (bk, lk) = Self::batch_dims(&xkv.shape(), self.dim)?;
        if b != bk {
            return Err(Error::shape("attention", format!("batch {b} vs {bk}")));
        }
        let q = self.split_heads(self.query.forward(cx, xq)?, b, lq)?;
        let k = self.split_heads(self.key.forward(cx, xkv)?, b, lk)?;
        let v = self.split_heads(self.value.forward(cx, xkv)?, b, lk)?;
        let scale = T::one() / T::from_usize_lossy(self.head_dim()).sqrt();
        let ctx = self.merge_heads(q.attention(k, v, scale)?, b, lq)?;
        let y = self.out.forward(cx, ctx)?;
        y.reshape(&qs)
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_cross(cx, x, x)
    }

    /// Attention probabilities `[B*heads, L, L]` for a self-attention input.
    pub fn weights<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store);
        let (b, l) = Self::batch_dims(x.shape(), self.dim)?;
        let xv = tape.constant(x.clone());
        let q = self.split_heads(self.query.forward(&cx, xv)?, b, l)?.value();
        let k = self.split_heads(self.key.forward(&cx, xv)?, b, l)?.value();
        let scale = T::one() / T::from_usize_lossy(self.head_dim()).sqrt();
        crate::autodiff::attention_weights(&q, &k, scale)
    }
}

/// Pre-norm transformer layer: attention and feed-forward sublayers, each
/// with a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        path: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{path}.norm1"), dim, eps),
            attn: MultiHeadAttention::new(store, &format!("{path}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{path}.norm2"), dim, eps),
            ff1: Linear::new(store, &format!("{path}.ff1"), dim, dim * ffn_mult, true, rng),
            ff2: Linear::new(store, &format!("{path}.ff2"), dim * ffn_mult, dim, true, rng),
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.attn.forward(cx, self.norm1.forward(cx, x)?)?;
        let x = x.add(a)?;
        let h = self.ff1.forward(cx, self.norm2.forward(cx, x)?)?.relu()?;
        x.add(self.ff2.forward(cx, h)?)
    }
}

/// Layers applied to `[B, L, D]` sequences after adding sinusoidal
/// positional encodings.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
    pub dim: usize,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        path: &str,
        n_layers: usize,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| TransformerLayer::new(store, &format!("{path}.{i}"), dim, heads, ffn_mult, eps, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, dim })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (b, l) = match s[..] {
            [b, l, d] if d == self.dim => (b, l),
            _ => return Err(Error::shape("transformer", format!("input {s:?}, expected [B, L, {}]", self.dim))),
        };
        let pe = sinusoidal_encoding::<T>(l, self.dim);
        let tiled = Tensor::from_fn(&[b, l, self.dim], |i| pe.data()[i % (l * self.dim)]);
        let mut h = x.add(cx.constant(tiled))?;
        for layer in &self.layers {
            h = layer.forward(cx, h)?;
        }
        Ok(h)
    }
}

/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(..)`.
pub fn sinusoidal_encoding<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, dim], |idx| {
        let (pos, i) = (idx / dim, idx % dim);
        let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
        let angle = pos as f64 * freq;
        T::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
