//! Naive loop implementations used as references by the module tests.
#![allow(dead_code)]

pub mod grad_suite;

use avfsnet::autodiff::gelu_scalar;
use avfsnet::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = (t.dim(0), t.dim(1));
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    let (r, c) = (m.len(), m[0].len());
    Tensor::new(&[r, c], m.iter().flatten().copied().collect()).unwrap()
}

pub fn transpose(m: &Mat) -> Mat {
    (0..m[0].len()).map(|j| m.iter().map(|row| row[j]).collect()).collect()
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).clone()
}

pub fn set_param(store: &mut ParamStore<f64>, name: &str, value: Tensor<f64>) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.set(id, value).unwrap();
}

/// `x[L, in] · w[in, out] + b`.
pub fn linear(x: &Mat, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Mat {
    let (din, dout) = (w.dim(0), w.dim(1));
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| {
                    let mut s = b.map_or(0.0, |b| b.data()[o]);
                    for i in 0..din {
                        s += row[i] * w.at(&[i, o]);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Row-wise layer norm with biased variance.
pub fn layer_norm(x: &Mat, gamma: &Tensor<f64>, beta: &Tensor<f64>, eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) * inv * gamma.data()[j] + beta.data()[j]).collect()
        })
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn gelu(x: f64) -> f64 {
    gelu_scalar(x)
}

pub fn map(m: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    m.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Multi-head attention on time-major `xq[Lq, D]`, `xkv[Lk, D]`, reading
/// `{path}.q/k/v/o` projections from the store.
pub fn mha(store: &ParamStore<f64>, path: &str, xq: &Mat, xkv: &Mat, heads: usize) -> Mat {
    let p = |n: &str| param(store, &format!("{path}.{n}"));
    let q = linear(xq, &p("q.weight"), Some(&p("q.bias")));
    let k = linear(xkv, &p("k.weight"), Some(&p("k.bias")));
    let v = linear(xkv, &p("v.weight"), Some(&p("v.bias")));
    let d = q[0].len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![vec![0.0; d]; xq.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> =
                k.iter().map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() * scale).collect();
            let w = softmax(&scores);
            for c in cols.clone() {
                ctx[i][c] = w.iter().zip(&v).map(|(wj, vj)| wj * vj[c]).sum();
            }
        }
    }
    linear(&ctx, &p("o.weight"), Some(&p("o.bias")))
}

/// Same-padded dilated convolution `x[cin, L]`, `w[cout, cin, k]` plus bias.
pub fn conv_same(x: &Mat, w: &Tensor<f64>, b: &Tensor<f64>, dilation: usize) -> Mat {
    let (cout, cin, k) = (w.dim(0), w.dim(1), w.dim(2));
    let l = x[0].len() as isize;
    let half = ((k - 1) * dilation / 2) as isize;
    (0..cout)
        .map(|o| {
            (0..l)
                .map(|t| {
                    let mut s = b.data()[o];
                    for c in 0..cin {
                        for j in 0..k {
                            let src = t - half + (j * dilation) as isize;
                            if (0..l).contains(&src) {
                                s += w.at(&[o, c, j]) * x[c][src as usize];
                            }
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Same-padded depthwise convolution `x[C, L]`, `w[C, k]` plus bias.
pub fn depthwise_same(x: &Mat, w: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
    let k = w.dim(1);
    let l = x[0].len() as isize;
    let half = (k / 2) as isize;
    x.iter()
        .enumerate()
        .map(|(c, row)| {
            (0..l)
                .map(|t| {
                    let mut s = b.data()[c];
                    for j in 0..k {
                        let src = t - half + j as isize;
                        if (0..l).contains(&src) {
                            s += w.at(&[c, j]) * row[src as usize];
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}
