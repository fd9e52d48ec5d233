//! Matrix, convolution, normalization and attention primitives.

use crate::autodiff::tape::Var;
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a 1-D convolution over `[channels, time]` maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    pub fn strided(stride: usize) -> Self {
        Self { stride, dilation: 1, pad_left: 0, pad_right: 0 }
    }

    /// Length-preserving geometry for an odd kernel at the given dilation.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let total = dilation * (kernel - 1);
        Self { stride: 1, dilation, pad_left: total / 2, pad_right: total - total / 2 }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let padded = len + self.pad_left + self.pad_right;
        let span = self.dilation * (kernel - 1) + 1;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }
}

fn im2col<T: Scalar>(x: &[T], cin: usize, t: usize, k: usize, geom: ConvGeom, l: usize) -> Vec<T> {
    let mut cols = vec![T::zero(); cin * k * l];
    for i in 0..cin {
        let row = &x[i * t..(i + 1) * t];
        for kk in 0..k {
            let dst = &mut cols[(i * k + kk) * l..(i * k + kk + 1) * l];
            for (li, d) in dst.iter_mut().enumerate() {
                let pos = li * geom.stride + kk * geom.dilation;
                if pos >= geom.pad_left && pos - geom.pad_left < t {
                    *d = row[pos - geom.pad_left];
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], cin: usize, t: usize, k: usize, geom: ConvGeom, l: usize, dx: &mut [T]) {
    for i in 0..cin {
        for kk in 0..k {
            let src = &cols[(i * k + kk) * l..(i * k + kk + 1) * l];
            for (li, &v) in src.iter().enumerate() {
                let pos = li * geom.stride + kk * geom.dilation;
                if pos >= geom.pad_left && pos - geom.pad_left < t {
                    dx[i * t + pos - geom.pad_left] += v;
                }
            }
        }
    }
}

fn softmax_rows<T: Scalar>(data: &mut [T], n: usize) {
    for row in data.chunks_mut(n) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = T::one() / s;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Attention probabilities `softmax(scale * q k^T)` for `q[b,lq,d]`, `k[b,lk,d]`.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let (b, lq, d) = dims3("attention_weights", q.shape())?;
    let (bk, lk, dk) = dims3("attention_weights", k.shape())?;
    if b != bk || d != dk {
        return Err(Error::shape("attention_weights", format!("{:?} vs {:?}", q.shape(), k.shape())));
    }
    let mut p = vec![T::zero(); b * lq * lk];
    for bi in 0..b {
        let dst = &mut p[bi * lq * lk..(bi + 1) * lq * lk];
        gemm(false, true, lq, d, lk, scale, &q.data()[bi * lq * d..], &k.data()[bi * lk * d..], T::zero(), dst);
        softmax_rows(dst, lk);
    }
    Tensor::new(&[b, lq, lk], p)
}

/// Largest weight tensor, in elements, that attention keeps for backward.
pub const ATTENTION_KEEP_LIMIT: usize = 1 << 25;

fn dims3(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    match s {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(Error::shape(op, format!("expected 3-D, got {s:?}"))),
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Batched matrix product. `b` may be 2-D, in which case it is shared
    /// by every batch entry of `a`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let sa = self.shape();
        let sb = other.shape();
        let err = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(err());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let (a, b) = (self.id, other.id);
        let value = {
            let av = self.value_ref();
            let bv = other.value_ref();
            let mut c = vec![T::zero(); batch * m * n];
            for bi in 0..batch {
                let boff = if shared_b { 0 } else { bi * k * n };
                gemm(false, false, m, k, n, T::one(), &av.data()[bi * m * k..], &bv.data()[boff..], T::zero(), &mut c[bi * m * n..]);
            }
            Tensor::new(&out_shape, c)?
        };
        self.tape.push_op("matmul", value, &[a, b], move |ctx, g, sink| {
            let av = ctx.value(a).data();
            let bv = ctx.value(b).data();
            if let Some(ga) = sink.get(a) {
                for bi in 0..batch {
                    let boff = if shared_b { 0 } else { bi * k * n };
                    gemm(false, true, m, n, k, T::one(), &g[bi * m * n..], &bv[boff..], T::one(), &mut ga[bi * m * k..]);
                }
            }
            if let Some(gb) = sink.get(b) {
                for bi in 0..batch {
                    let boff = if shared_b { 0 } else { bi * k * n };
                    gemm(true, false, k, m, n, T::one(), &av[bi * m * k..], &g[bi * m * n..], T::one(), &mut gb[boff..]);
                }
            }
        })
    }

    /// `x[.., in] w[in, out] + b[out]`.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    /// `x[cin, t]` convolved with `w[cout, cin, k]`.
    pub fn conv1d(self, w: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        self.conv1d_geom(w, ConvGeom::strided(stride))
    }

    pub fn conv1d_geom(self, w: Var<'t, T>, geom: ConvGeom) -> Result<Var<'t, T>> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[0] {
            return Err(Error::shape("conv1d", format!("input {xs:?}, kernel {ws:?}")));
        }
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(Error::Config("conv1d stride and dilation must be positive".into()));
        }
        let (cin, t) = (xs[0], xs[1]);
        let (cout, k) = (ws[0], ws[2]);
        let l = geom.out_len(t, k).ok_or(Error::InputTooShort {
            op: "conv1d",
            len: t,
            min: geom.dilation * (k - 1) + 1 - (geom.pad_left + geom.pad_right).min(geom.dilation * (k - 1)),
        })?;
        let (x, wid) = (self.id, w.id);
        let value = {
            let cols = im2col(self.value_ref().data(), cin, t, k, geom, l);
            let mut out = vec![T::zero(); cout * l];
            gemm(false, false, cout, cin * k, l, T::one(), w.value_ref().data(), &cols, T::zero(), &mut out);
            Tensor::new(&[cout, l], out)?
        };
        self.tape.push_op("conv1d", value, &[x, wid], move |ctx, g, sink| {
            let xv = ctx.value(x).data();
            let wv = ctx.value(wid).data();
            if sink.wants(wid) {
                let cols = im2col(xv, cin, t, k, geom, l);
                let gw = sink.get(wid).unwrap();
                gemm(false, true, cout, l, cin * k, T::one(), g, &cols, T::one(), gw);
            }
            if let Some(gx) = sink.get(x) {
                let mut gcols = vec![T::zero(); cin * k * l];
                gemm(true, false, cin * k, cout, l, T::one(), wv, g, T::zero(), &mut gcols);
                col2im_add(&gcols, cin, t, k, geom, l, gx);
            }
        })
    }

    /// Adjoint of [`Var::conv1d`]: `y[cin, l]`, `w[cin, cout, k]` to
    /// `[cout, (l-1)*stride + k]`.
    pub fn conv1d_transpose(self, w: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        let ys = self.shape();
        let ws = w.shape();
        if ys.len() != 2 || ws.len() != 3 || ws[0] != ys[0] || ys[1] == 0 || stride == 0 {
            return Err(Error::shape("conv1d_transpose", format!("input {ys:?}, kernel {ws:?}, stride {stride}")));
        }
        let (cin, l) = (ys[0], ys[1]);
        let (cout, k) = (ws[1], ws[2]);
        let t = (l - 1) * stride + k;
        let geom = ConvGeom::strided(stride);
        let (y, wid) = (self.id, w.id);
        let value = {
            let mut cols = vec![T::zero(); cout * k * l];
            gemm(true, false, cout * k, cin, l, T::one(), w.value_ref().data(), self.value_ref().data(), T::zero(), &mut cols);
            let mut out = vec![T::zero(); cout * t];
            col2im_add(&cols, cout, t, k, geom, l, &mut out);
            Tensor::new(&[cout, t], out)?
        };
        self.tape.push_op("conv1d_transpose", value, &[y, wid], move |ctx, g, sink| {
            let gcols = im2col(g, cout, t, k, geom, l);
            if sink.wants(wid) {
                let yv = ctx.value(y).data();
                let gw = sink.get(wid).unwrap();
                gemm(false, true, cin, l, cout * k, T::one(), yv, &gcols, T::one(), gw);
            }
            if let Some(gy) = sink.get(y) {
                let wv = ctx.value(wid).data();
                gemm(false, false, cin, cout * k, l, T::one(), wv, &gcols, T::one(), gy);
            }
        })
    }

    /// Per-channel convolution of `x[c, t]` with `w[c, kd]`, same padding.
    pub fn depthwise_conv1d(self, w: Var<'t, T>) -> Result<Var<'t, T>> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[0] {
            return Err(Error::shape("depthwise_conv1d", format!("input {xs:?}, kernel {ws:?}")));
        }
        let (c, t) = (xs[0], xs[1]);
        let kd = ws[1];
        if kd % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {kd}")));
        }
        let p = kd / 2;
        let (x, wid) = (self.id, w.id);
        let value = {
            let xv = self.value_ref();
            let wv = w.value_ref();
            let mut out = vec![T::zero(); c * t];
            for ch in 0..c {
                let xr = &xv.data()[ch * t..(ch + 1) * t];
                let wr = &wv.data()[ch * kd..(ch + 1) * kd];
                let or = &mut out[ch * t..(ch + 1) * t];
                for (kk, &wk) in wr.iter().enumerate() {
                    // out[ti] += wk * x[ti + kk - p]
                    let lo = p.saturating_sub(kk);
                    let hi = (t + p).saturating_sub(kk).min(t);
                    for ti in lo..hi {
                        or[ti] += wk * xr[ti + kk - p];
                    }
                }
            }
            Tensor::new(&[c, t], out)?
        };
        self.tape.push_op("depthwise_conv1d", value, &[x, wid], move |ctx, g, sink| {
            let xv = ctx.value(x).data();
            let wv = ctx.value(wid).data();
            if let Some(gw) = sink.get(wid) {
                for ch in 0..c {
                    for kk in 0..kd {
                        let lo = p.saturating_sub(kk);
                        let hi = (t + p).saturating_sub(kk).min(t);
                        let mut acc = T::zero();
                        for ti in lo..hi {
                            acc += g[ch * t + ti] * xv[ch * t + ti + kk - p];
                        }
                        gw[ch * kd + kk] += acc;
                    }
                }
            }
            if let Some(gx) = sink.get(x) {
                for ch in 0..c {
                    for kk in 0..kd {
                        let wk = wv[ch * kd + kk];
                        let lo = p.saturating_sub(kk);
                        let hi = (t + p).saturating_sub(kk).min(t);
                        for ti in lo..hi {
                            gx[ch * t + ti + kk - p] += g[ch * t + ti] * wk;
                        }
                    }
                }
            }
        })
    }

    /// Non-overlapping max pooling along time of `x[c, l]`.
    pub fn max_pool1d(self, window: usize) -> Result<Var<'t, T>> {
        let xs = self.shape();
        if xs.len() != 2 || window == 0 {
            return Err(Error::shape("max_pool1d", format!("input {xs:?}, window {window}")));
        }
        let (c, l) = (xs[0], xs[1]);
        if l < window {
            return Err(Error::InputTooShort { op: "max_pool1d", len: l, min: window });
        }
        let lp = l / window;
        let x = self.id;
        let (value, argmax) = {
            let xv = self.value_ref();
            let mut out = Vec::with_capacity(c * lp);
            let mut arg = Vec::with_capacity(c * lp);
            for ch in 0..c {
                for j in 0..lp {
                    let base = ch * l + j * window;
                    let mut best = base;
                    for i in base + 1..base + window {
                        if xv.data()[i] > xv.data()[best] {
                            best = i;
                        }
                    }
                    out.push(xv.data()[best]);
                    arg.push(best);
                }
            }
            (Tensor::new(&[c, lp], out)?, arg)
        };
        self.tape.push_op("max_pool1d", value, &[x], move |_, g, sink| {
            if let Some(gx) = sink.get(x) {
                for (&i, &v) in argmax.iter().zip(g) {
                    gx[i] += v;
                }
            }
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let s = self.shape();
        let n = *s.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let x = self.id;
        let mut value = self.value();
        softmax_rows(value.data_mut(), n);
        self.tape.push_op("softmax", value, &[x], move |ctx, g, sink| {
            let y = ctx.out_value().data();
            if let Some(gx) = sink.get(x) {
                for ((gr, yr), gxr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for i in 0..n {
                        gxr[i] += yr[i] * (gr[i] - dot);
                    }
                }
            }
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let s = self.shape();
        let n = *s.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(Error::shape("layer_norm", format!("affine {:?}/{:?} for {s:?}", gamma.shape(), beta.shape())));
        }
        let (x, gid, bid) = (self.id, gamma.id, beta.id);
        let nf = T::from_usize_lossy(n);
        let stats = move |row: &[T]| {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            (mean, T::one() / (var + eps).sqrt())
        };
        let value = {
            let xv = self.value_ref();
            let gv = gamma.value_ref();
            let bv = beta.value_ref();
            let mut out = Vec::with_capacity(xv.numel());
            for row in xv.data().chunks(n) {
                let (mean, rstd) = stats(row);
                for i in 0..n {
                    out.push((row[i] - mean) * rstd * gv.data()[i] + bv.data()[i]);
                }
            }
            Tensor::new(&s, out)?
        };
        self.tape.push_op("layer_norm", value, &[x, gid, bid], move |ctx, g, sink| {
            let xv = ctx.value(x).data();
            let gv = ctx.value(gid).data();
            let want_x = sink.wants(x);
            let mut dgamma = vec![T::zero(); n];
            let mut dbeta = vec![T::zero(); n];
            let mut xhat = vec![T::zero(); n];
            let mut dxhat = vec![T::zero(); n];
            for (r, (row, gr)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                let (mean, rstd) = stats(row);
                for i in 0..n {
                    xhat[i] = (row[i] - mean) * rstd;
                    dgamma[i] += gr[i] * xhat[i];
                    dbeta[i] += gr[i];
                    dxhat[i] = gr[i] * gv[i];
                }
                if want_x {
                    let m1 = dxhat.iter().copied().sum::<T>() / nf;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    let gx = sink.get(x).unwrap();
                    for i in 0..n {
                        gx[r * n + i] += rstd * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
            }
            sink.add(gid, &dgamma);
            sink.add(bid, &dbeta);
        })
    }

    /// Fused scaled dot-product attention, `softmax(scale q k^T) v`, for
    /// `q[b,lq,d]`, `k[b,lk,d]`, `v[b,lk,dv]`. Weights are recomputed in
    /// the backward pass, one batch entry at a time.
    pub fn attention(self, k: Var<'t, T>, v: Var<'t, T>, scale: T) -> Result<Var<'t, T>> {
        let (b, lq, d) = dims3("attention", &self.shape())?;
        let (bk, lk, dk) = dims3("attention", &k.shape())?;
        let (bv, lv, dv) = dims3("attention", &v.shape())?;
        if b != bk || b != bv || d != dk || lk != lv || lk == 0 {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", self.shape(), k.shape(), v.shape()),
            ));
        }
        let (qid, kid, vid) = (self.id, k.id, v.id);
        // Weights are kept for backward when they fit the budget, else
        // recomputed one batch entry at a time.
        let keep = self.tape.requires_grad(qid) || self.tape.requires_grad(kid) || self.tape.requires_grad(vid);
        let keep = keep && b * lq * lk <= ATTENTION_KEEP_LIMIT;
        let (value, kept) = {
            let qv = self.value_ref();
            let kv = k.value_ref();
            let vv = v.value_ref();
            let mut out = vec![T::zero(); b * lq * dv];
            let mut p = vec![T::zero(); lq * lk];
            let mut kept = Vec::new();
            for bi in 0..b {
                gemm(false, true, lq, d, lk, scale, &qv.data()[bi * lq * d..], &kv.data()[bi * lk * d..], T::zero(), &mut p);
                softmax_rows(&mut p, lk);
                gemm(false, false, lq, lk, dv, T::one(), &p, &vv.data()[bi * lk * dv..], T::zero(), &mut out[bi * lq * dv..]);
                if keep {
                    kept.extend_from_slice(&p);
                }
            }
            (Tensor::new(&[b, lq, dv], out)?, kept)
        };
        self.tape.push_op("attention", value, &[qid, kid, vid], move |ctx, g, sink| {
            let qv = ctx.value(qid).data();
            let kv = ctx.value(kid).data();
            let vv = ctx.value(vid).data();
            let ov = ctx.out_value().data();
            let mut p = vec![T::zero(); lq * lk];
            let mut dp = vec![T::zero(); lq * lk];
            for bi in 0..b {
                let (q_b, k_b, v_b) = (&qv[bi * lq * d..], &kv[bi * lk * d..], &vv[bi * lk * dv..]);
                let g_b = &g[bi * lq * dv..(bi + 1) * lq * dv];
                let o_b = &ov[bi * lq * dv..(bi + 1) * lq * dv];
                if keep {
                    p.copy_from_slice(&kept[bi * lq * lk..(bi + 1) * lq * lk]);
                } else {
                    gemm(false, true, lq, d, lk, scale, q_b, k_b, T::zero(), &mut p);
                    softmax_rows(&mut p, lk);
                }
                if let Some(gv) = sink.get(vid) {
                    gemm(true, false, lk, lq, dv, T::one(), &p, g_b, T::one(), &mut gv[bi * lk * dv..]);
                }
                if !(sink.wants(qid) || sink.wants(kid)) {
                    continue;
                }
                gemm(false, true, lq, dv, lk, T::one(), g_b, v_b, T::zero(), &mut dp);
                for r in 0..lq {
                    let rowdot: T = g_b[r * dv..(r + 1) * dv].iter().zip(&o_b[r * dv..(r + 1) * dv]).map(|(&a, &c)| a * c).sum();
                    for j in 0..lk {
                        let idx = r * lk + j;
                        dp[idx] = p[idx] * (dp[idx] - rowdot);
                    }
                }
                if let Some(gq) = sink.get(qid) {
                    gemm(false, false, lq, lk, d, scale, &dp, k_b, T::one(), &mut gq[bi * lq * d..]);
                }
                if let Some(gk) = sink.get(kid) {
                    gemm(true, false, lk, lq, d, scale, &dp, q_b, T::one(), &mut gk[bi * lk * d..]);
                }
            }
        })
    }
}
