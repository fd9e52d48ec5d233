//! Element-wise, reduction and index-map primitives.

use crate::autodiff::tape::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Marks an output position that reads zero in a [`Var::gather`] map.
pub const ZERO_SLOT: usize = usize::MAX;

/// Linear map where each output element is a weighted sum of a few inputs.
#[derive(Debug, Clone)]
pub struct SparseMap<T> {
    out_shape: Vec<usize>,
    in_numel: usize,
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<T>,
}

impl<T: Scalar> SparseMap<T> {
    /// `rows[o]` lists `(input index, weight)` terms for output element `o`.
    pub fn from_rows(out_shape: &[usize], in_numel: usize, rows: Vec<Vec<(usize, T)>>) -> Self {
        assert_eq!(rows.len(), out_shape.iter().product::<usize>());
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut index = Vec::new();
        let mut weight = Vec::new();
        offsets.push(0);
        for row in rows {
            for (i, w) in row {
                assert!(i < in_numel);
                index.push(i);
                weight.push(w);
            }
            offsets.push(index.len());
        }
        Self { out_shape: out_shape.to_vec(), in_numel, offsets, index, weight }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        (0..self.offsets.len() - 1)
            .map(|o| {
                (self.offsets[o]..self.offsets[o + 1])
                    .map(|j| x[self.index[j]] * self.weight[j])
                    .sum()
            })
            .collect()
    }

    pub fn apply_transpose(&self, g: &[T], out: &mut [T]) {
        for o in 0..self.offsets.len() - 1 {
            for j in self.offsets[o]..self.offsets[o + 1] {
                out[self.index[j]] += g[o] * self.weight[j];
            }
        }
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn in_numel(&self) -> usize {
        self.in_numel
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        // derivative from (input, output)
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let x = self.id;
        let value = self.value_ref().map(f);
        self.tape.push_op(op, value, &[x], move |ctx, g, sink| {
            let xv = ctx.value(x).data();
            let yv = ctx.out_value().data();
            if let Some(gx) = sink.get(x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * df(xv[i], yv[i]);
                }
            }
        })
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("add", &self, &other)?;
        let (a, b) = (self.id, other.id);
        let value = self.value_ref().zip_map(&other.value_ref(), |x, y| x + y)?;
        self.tape.push_op("add", value, &[a, b], move |_, g, sink| {
            sink.add(a, g);
            sink.add(b, g);
        })
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("sub", &self, &other)?;
        let (a, b) = (self.id, other.id);
        let value = self.value_ref().zip_map(&other.value_ref(), |x, y| x - y)?;
        self.tape.push_op("sub", value, &[a, b], move |_, g, sink| {
            sink.add(a, g);
            if let Some(gb) = sink.get(b) {
                for (o, &v) in gb.iter_mut().zip(g) {
                    *o -= v;
                }
            }
        })
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("mul", &self, &other)?;
        let (a, b) = (self.id, other.id);
        let value = self.value_ref().zip_map(&other.value_ref(), |x, y| x * y)?;
        self.tape.push_op("mul", value, &[a, b], move |ctx, g, sink| {
            let (av, bv) = (ctx.value(a).data(), ctx.value(b).data());
            if let Some(ga) = sink.get(a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = sink.get(b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        })
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("div", &self, &other)?;
        let (a, b) = (self.id, other.id);
        let value = self.value_ref().zip_map(&other.value_ref(), |x, y| x / y)?;
        self.tape.push_op("div", value, &[a, b], move |ctx, g, sink| {
            let (av, bv) = (ctx.value(a).data(), ctx.value(b).data());
            if let Some(ga) = sink.get(a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / bv[i];
                }
            }
            if let Some(gb) = sink.get(b) {
                for i in 0..g.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        })
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        self.unary("add_scalar", move |v| v + c, |_, _| T::one())
    }

    pub fn mul_scalar(self, c: T) -> Result<Var<'t, T>> {
        self.unary("mul_scalar", move |v| v * c, move |_, _| c)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.mul_scalar(-T::one())
    }

    /// Multiply every element by a one-element variable.
    pub fn scale_by(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        if s.numel() != 1 {
            return Err(Error::shape("scale_by", format!("scale must be scalar, got {:?}", s.shape())));
        }
        let (x, sid) = (self.id, s.id);
        let sv = s.item();
        let value = self.value_ref().scale(sv);
        self.tape.push_op("scale_by", value, &[x, sid], move |ctx, g, sink| {
            let xv = ctx.value(x).data();
            let sv = ctx.value(sid).item();
            if let Some(gx) = sink.get(x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * sv;
                }
            }
            if let Some(gs) = sink.get(sid) {
                gs[0] += g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>();
            }
        })
    }

    /// `x[..., n] + b[n]`, broadcasting the bias over leading positions.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let xs = self.shape();
        let bs = bias.shape();
        let n = *xs.last().unwrap_or(&0);
        if bs.len() != 1 || bs[0] != n {
            return Err(Error::shape("add_bias", format!("bias {bs:?} for input {xs:?}")));
        }
        let (x, b) = (self.id, bias.id);
        let value = {
            let bv = bias.value_ref();
            let mut v = self.value();
            for row in v.data_mut().chunks_mut(n) {
                for (o, &c) in row.iter_mut().zip(bv.data()) {
                    *o += c;
                }
            }
            v
        };
        self.tape.push_op("add_bias", value, &[x, b], move |_, g, sink| {
            sink.add(x, g);
            if let Some(gb) = sink.get(b) {
                for row in g.chunks(n) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
        })
    }

    /// `x[c, t] + b[c]`: per-row bias for channel-major maps.
    pub fn add_channel_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let xs = self.shape();
        let bs = bias.shape();
        if xs.len() != 2 || bs != [xs[0]] {
            return Err(Error::shape("add_channel_bias", format!("bias {bs:?} for input {xs:?}")));
        }
        let t = xs[1];
        let (x, b) = (self.id, bias.id);
        let value = {
            let bv = bias.value_ref();
            let mut v = self.value();
            for (row, &c) in v.data_mut().chunks_mut(t).zip(bv.data()) {
                row.iter_mut().for_each(|o| *o += c);
            }
            v
        };
        self.tape.push_op("add_channel_bias", value, &[x, b], move |_, g, sink| {
            sink.add(x, g);
            if let Some(gb) = sink.get(b) {
                for (o, row) in gb.iter_mut().zip(g.chunks(t)) {
                    *o += row.iter().copied().sum::<T>();
                }
            }
        })
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Exact GeLU, `x * Phi(x)`.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.unary("gelu", gelu_scalar, |x, _| {
            let half = T::from_f64_lossy(0.5);
            let cdf = half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (-(x * x) * half).exp() * T::from_f64_lossy(0.398_942_280_401_432_7);
            cdf + x * pdf
        })
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary("exp", |v| v.exp(), |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.unary("ln", |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary("sqrt", |v| v.sqrt(), |_, y| T::from_f64_lossy(0.5) / y)
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary("square", |v| v * v, |x, _| x + x)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(self, lo: T, hi: T) -> Result<Var<'t, T>> {
        self.unary(
            "clamp",
            move |v| v.max(lo).min(hi),
            move |x, _| if x < lo || x > hi { T::zero() } else { T::one() },
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let x = self.id;
        let value = Tensor::scalar(self.value_ref().sum());
        self.tape.push_op("sum", value, &[x], move |_, g, sink| {
            if let Some(gx) = sink.get(x) {
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
        })
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = T::from_usize_lossy(self.numel().max(1));
        self.sum()?.mul_scalar(T::one() / n)
    }

    /// Mean over the leading axis of a 2-D tensor: `[n, d] -> [d]`.
    pub fn mean_rows(self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape("mean_rows", format!("expected non-empty 2-D, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let inv = T::one() / T::from_usize_lossy(n);
        let x = self.id;
        let value = {
            let xv = self.value_ref();
            let mut acc = vec![T::zero(); d];
            for row in xv.data().chunks(d) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::new(&[d], acc.into_iter().map(|v| v * inv).collect())?
        };
        self.tape.push_op("mean_rows", value, &[x], move |_, g, sink| {
            if let Some(gx) = sink.get(x) {
                for row in gx.chunks_mut(d) {
                    for (o, &v) in row.iter_mut().zip(g) {
                        *o += v * inv;
                    }
                }
            }
        })
    }

    /// Sum of element-wise products, a scalar.
    pub fn dot(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.mul(other)?.sum()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.id;
        let value = self.value().reshape(shape)?;
        self.tape.push_op("reshape", value, &[x], move |_, g, sink| sink.add(x, g))
    }

    /// `out[o] = x[index[o]]`, or zero where `index[o] == ZERO_SLOT`.
    pub fn gather(self, index: Vec<usize>, out_shape: &[usize]) -> Result<Var<'t, T>> {
        let numel: usize = out_shape.iter().product();
        if numel != index.len() {
            return Err(Error::shape("gather", format!("{} indices for shape {out_shape:?}", index.len())));
        }
        let x = self.id;
        let value = {
            let xv = self.value_ref();
            let src = xv.data();
            if let Some(&bad) = index.iter().find(|&&i| i != ZERO_SLOT && i >= src.len()) {
                return Err(Error::shape("gather", format!("index {bad} out of range {}", src.len())));
            }
            let data = index.iter().map(|&i| if i == ZERO_SLOT { T::zero() } else { src[i] }).collect();
            Tensor::new(out_shape, data)?
        };
        self.tape.push_op("gather", value, &[x], move |_, g, sink| {
            if let Some(gx) = sink.get(x) {
                for (&i, &v) in index.iter().zip(g) {
                    if i != ZERO_SLOT {
                        gx[i] += v;
                    }
                }
            }
        })
    }

    pub fn sparse_map(self, map: SparseMap<T>) -> Result<Var<'t, T>> {
        if self.numel() != map.in_numel {
            return Err(Error::shape(
                "sparse_map",
                format!("map expects {} inputs, got {:?}", map.in_numel, self.shape()),
            ));
        }
        let x = self.id;
        let value = Tensor::new(&map.out_shape, map.apply(self.value_ref().data()))?;
        self.tape.push_op("sparse_map", value, &[x], move |_, g, sink| {
            if let Some(gx) = sink.get(x) {
                map.apply_transpose(g, gx);
            }
        })
    }

    /// Reorder axes; `axes[i]` names the input axis that becomes output axis `i`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let s = self.shape();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {s:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let in_strides = strides(&s);
        let numel: usize = s.iter().product();
        let mut index = Vec::with_capacity(numel);
        let mut counter = vec![0usize; s.len()];
        for _ in 0..numel {
            index.push(counter.iter().zip(axes).map(|(&c, &a)| c * in_strides[a]).sum());
            for ax in (0..out_shape.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.gather(index, &out_shape)
    }

    /// Transpose of a 2-D variable.
    pub fn t(self) -> Result<Var<'t, T>> {
        self.permute(&[1, 0])
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("narrow", format!("axis {axis} range {start}+{len} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for j in 0..len {
                let base = (o * s[axis] + start + j) * inner;
                index.extend(base..base + inner);
            }
        }
        self.gather(index, &out_shape)
    }

    /// Zero-pad or truncate the last axis to `len`.
    pub fn fit_last(self, len: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        let cur = *s.last().ok_or_else(|| Error::shape("fit_last", "scalar input"))?;
        if cur == len {
            return Ok(self);
        }
        let outer: usize = s[..s.len() - 1].iter().product();
        let mut out_shape = s.clone();
        *out_shape.last_mut().unwrap() = len;
        let mut index = Vec::with_capacity(outer * len);
        for o in 0..outer {
            for j in 0..len {
                index.push(if j < cur { o * cur + j } else { ZERO_SLOT });
            }
        }
        self.gather(index, &out_shape)
    }

    /// Concatenate along axis 0.
    pub fn concat0(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(Error::EmptyInput("concat0"))?;
        let tail = first.shape()[1..].to_vec();
        let mut rows = 0;
        for p in parts {
            let s = p.shape();
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat0", format!("{s:?} vs trailing {tail:?}")));
            }
            rows += s[0];
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        let mut data = Vec::with_capacity(sizes.iter().sum());
        for p in parts {
            data.extend_from_slice(p.value_ref().data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        first.tape.push_op("concat0", value, &ids.clone(), move |_, g, sink| {
            let mut off = 0;
            for (&id, &n) in ids.iter().zip(&sizes) {
                sink.add(id, &g[off..off + n]);
                off += n;
            }
        })
    }
}

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    x * half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
