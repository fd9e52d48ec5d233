use avfsnet::autodiff::{attention_weights, ConvGeom};
use avfsnet::gradcheck;
use avfsnet::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

// ---- oracles -------------------------------------------------------------

fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let mut s = 0.0;
        for p in 0..k {
            s += a.at(&[i, p]) * b.at(&[p, j]);
        }
        s
    })
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let (cin, tl) = (x.dim(0), x.dim(1));
    let (cout, k) = (w.dim(0), w.dim(2));
    let l = (tl - k) / stride + 1;
    Tensor::from_fn(&[cout, l], |idx| {
        let (c, li) = (idx / l, idx % l);
        let mut s = 0.0;
        for i in 0..cin {
            for kk in 0..k {
                s += x.at(&[i, li * stride + kk]) * w.at(&[c, i, kk]);
            }
        }
        s
    })
}

fn depthwise_oracle(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (c, tl) = (x.dim(0), x.dim(1));
    let kd = w.dim(1);
    let p = (kd / 2) as isize;
    Tensor::from_fn(&[c, tl], |idx| {
        let (ch, ti) = (idx / tl, idx % tl);
        let mut s = 0.0;
        for k in 0..kd {
            let pos = ti as isize + k as isize - p;
            if pos >= 0 && (pos as usize) < tl {
                s += w.at(&[ch, k]) * x.at(&[ch, pos as usize]);
            }
        }
        s
    })
}

fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x;
    let mut n = 0.0_f64;
    while term.abs() > 1e-18 {
        sum += term / (2.0 * n + 1.0);
        n += 1.0;
        term *= -x * x / n;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

// ---- matmul --------------------------------------------------------------

#[test]
fn matmul_identity_and_hand_case() {
    let tape = Tape::new();
    let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]));
    assert_eq!(i2.matmul(a).unwrap().value(), a.value());

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    assert_eq!(a.matmul(ones).unwrap().value().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[4, 2], 2);
    let tape = Tape::new();
    let out = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
    assert!(out.max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);
}

#[test]
fn matmul_batched_and_shared_rhs() {
    let a = randn(&[2, 3, 4], 3);
    let b = randn(&[4, 5], 4);
    let tape = Tape::new();
    let out = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
    assert_eq!(out.shape(), &[2, 3, 5]);
    for bi in 0..2 {
        let ab = Tensor::new(&[3, 4], a.data()[bi * 12..(bi + 1) * 12].to_vec()).unwrap();
        let ob = Tensor::new(&[3, 5], out.data()[bi * 15..(bi + 1) * 15].to_vec()).unwrap();
        assert!(ob.max_abs_diff(&matmul_oracle(&ab, &b)) < 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch_reports_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
    let b = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(err.to_string().contains("[2, 3]"));
}

// ---- conv1d --------------------------------------------------------------

#[test]
fn conv1d_shape_delta_and_oracle() {
    let tape = Tape::new();
    let x = tape.constant(randn(&[1, 32], 5));
    let w = tape.constant(randn(&[4, 1, 16], 6));
    assert_eq!(x.conv1d(w, 8).unwrap().shape(), vec![4, 3]);

    let xs = randn(&[2, 20], 7);
    let mut delta = Tensor::zeros(&[1, 2, 5]);
    delta.data_mut()[0] = 1.0;
    let out = tape.constant(xs.clone()).conv1d(tape.constant(delta), 1).unwrap().value();
    assert_eq!(out.data(), &xs.data()[..16]);

    let xs = randn(&[3, 23], 8);
    let ws = randn(&[4, 3, 5], 9);
    for stride in [1, 2, 3] {
        let out = tape.constant(xs.clone()).conv1d(tape.constant(ws.clone()), stride).unwrap().value();
        assert!(out.max_abs_diff(&conv_oracle(&xs, &ws, stride)) < 1e-12);
    }
}

#[test]
fn conv1d_rejects_short_input() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[1, 8]));
    let w = tape.constant(Tensor::<f64>::zeros(&[2, 1, 16]));
    assert!(matches!(x.conv1d(w, 8), Err(Error::InputTooShort { .. })));
}

#[test]
fn conv1d_transpose_shape_and_single_frame() {
    let tape = Tape::new();
    let y = tape.constant(randn(&[4, 3], 10));
    let w = tape.constant(randn(&[4, 1, 16], 11));
    assert_eq!(y.conv1d_transpose(w, 8).unwrap().shape(), vec![1, 32]);

    let ws = randn(&[1, 2, 6], 12);
    let y = tape.constant(t(&[1, 1], &[2.5]));
    let out = y.conv1d_transpose(tape.constant(ws.clone()), 3).unwrap().value();
    assert!(out.max_abs_diff(&ws.scale(2.5).reshape(&[2, 6]).unwrap()) < 1e-15);
}

#[test]
fn conv1d_transpose_is_adjoint_of_conv1d() {
    for (seed, stride) in [(20u64, 1usize), (21, 2), (22, 8)] {
        let (cin, cout, k) = (3, 4, 16);
        let l = 5;
        let tl = (l - 1) * stride + k;
        let x = randn(&[cin, tl], seed);
        let w = randn(&[cout, cin, k], seed + 100);
        let y = randn(&[cout, l], seed + 200);
        // conv weight [cout, cin, k] read as the transpose kernel [cout(in), cin(out), k]
        let tape = Tape::new();
        let lhs = tape.constant(x.clone()).conv1d(tape.constant(w.clone()), stride).unwrap().value().dot(&y);
        let back = tape.constant(y).conv1d_transpose(tape.constant(w), stride).unwrap().value();
        let rhs = x.dot(&back);
        assert!((lhs - rhs).abs() < 1e-10, "stride {stride}: {lhs} vs {rhs}");
    }
}

// ---- depthwise -----------------------------------------------------------

#[test]
fn depthwise_identity_constant_and_oracle() {
    let tape = Tape::new();
    let x = randn(&[3, 11], 30);
    let mut delta = Tensor::zeros(&[3, 5]);
    for c in 0..3 {
        delta.data_mut()[c * 5 + 2] = 1.0;
    }
    let out = tape.constant(x.clone()).depthwise_conv1d(tape.constant(delta)).unwrap().value();
    assert_eq!(out, x);

    let w = t(&[1, 3], &[0.5, 1.0, 1.5]);
    let c = Tensor::full(&[1, 9], 2.0);
    let out = tape.constant(c).depthwise_conv1d(tape.constant(w)).unwrap().value();
    for i in 1..8 {
        assert!((out.data()[i] - 6.0).abs() < 1e-15);
    }

    let x = randn(&[4, 13], 31);
    let w = randn(&[4, 7], 32);
    let out = tape.constant(x.clone()).depthwise_conv1d(tape.constant(w.clone())).unwrap().value();
    assert!(out.max_abs_diff(&depthwise_oracle(&x, &w)) < 1e-12);
}

#[test]
fn depthwise_rejects_even_kernel() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[2, 8]));
    let w = tape.constant(Tensor::<f64>::zeros(&[2, 4]));
    assert!(matches!(x.depthwise_conv1d(w), Err(Error::Config(_))));
}

// ---- softmax, layer norm, activations --------------------------------------

#[test]
fn softmax_closed_forms_and_shift() {
    let tape = Tape::new();
    let s = tape.constant(t(&[2], &[0.0, 0.0])).softmax().unwrap().value();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = tape.constant(t(&[2], &[0.0, 2f64.ln()])).softmax().unwrap().value();
    assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15 && (s.data()[1] - 2.0 / 3.0).abs() < 1e-15);

    let x = randn(&[3, 6], 40);
    let a = tape.constant(x.clone()).softmax().unwrap().value();
    let b = tape.constant(x.map(|v| v + 123.4)).softmax().unwrap().value();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn layer_norm_cases() {
    let tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let out = tape.constant(Tensor::full(&[4], 3.0)).layer_norm(g, b, 1e-5).unwrap().value();
    assert!(out.max_abs() < 1e-12);

    let g2 = tape.constant(Tensor::ones(&[2]));
    let b2 = tape.constant(Tensor::zeros(&[2]));
    let out = tape.constant(t(&[2], &[1.0, -1.0])).layer_norm(g2, b2, 1e-5).unwrap().value();
    assert!((out.data()[0] - 1.0).abs() < 1e-5 && (out.data()[1] + 1.0).abs() < 1e-5);

    let x = randn(&[7], 41);
    let gamma = randn(&[7], 42);
    let beta = randn(&[7], 43);
    let out = tape
        .constant(x.clone())
        .layer_norm(tape.constant(gamma.clone()), tape.constant(beta.clone()), 1e-5)
        .unwrap()
        .value();
    let mean = x.data().iter().sum::<f64>() / 7.0;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
    let oracle = Tensor::from_fn(&[7], |i| (x.data()[i] - mean) / (var + 1e-5).sqrt() * gamma.data()[i] + beta.data()[i]);
    assert!(out.max_abs_diff(&oracle) < 1e-10);
}

#[test]
fn activation_reference_points() {
    let tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 10.0, 1.0]));
    let g = x.gelu().unwrap().value();
    assert_eq!(g.data()[0], 0.0);
    assert!((g.data()[1] - 10.0).abs() < 1e-6);
    let oracle = 0.5 * (1.0 + erf_series(std::f64::consts::FRAC_1_SQRT_2));
    assert!((g.data()[2] - oracle).abs() < 1e-9);
    assert_eq!(x.sigmoid().unwrap().value().data()[0], 0.5);
}

// ---- attention -----------------------------------------------------------

#[test]
fn fused_attention_matches_composed_primitives() {
    let q = randn(&[2, 3, 4], 50);
    let k = randn(&[2, 5, 4], 51);
    let v = randn(&[2, 5, 3], 52);
    let scale = 0.5;
    let tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let fused = qv.attention(kv, vv, scale).unwrap().value();
    let composed = qv
        .matmul(kv.permute(&[0, 2, 1]).unwrap())
        .unwrap()
        .mul_scalar(scale)
        .unwrap()
        .softmax()
        .unwrap()
        .matmul(vv)
        .unwrap()
        .value();
    assert!(fused.max_abs_diff(&composed) < 1e-12);
    let w = attention_weights(&q, &k, scale).unwrap();
    for row in w.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

// ---- backward ------------------------------------------------------------

#[test]
fn backward_closed_forms() {
    let tape = Tape::new();
    let w = tape.leaf(Tensor::scalar(3.0), true);
    let loss = w.square().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(w).unwrap().data(), &[6.0]);

    let tape = Tape::new();
    let w = tape.leaf(randn(&[5], 60), true);
    let loss = w.softmax().unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(w).unwrap().max_abs() < 1e-15);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let w = tape.leaf(randn(&[3], 61), true);
    let y = w.mul_scalar(2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn nan_inputs_are_an_error_state() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2], &[-1.0, 4.0]));
    assert!(matches!(x.sqrt(), Err(Error::NonFinite { .. })));
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn assert_grad<F>(inputs: &[Tensor<f64>], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[avfsnet::Var<'t, f64>]) -> avfsnet::Result<avfsnet::Var<'t, f64>>,
{
    let report = gradcheck::check(inputs, STEP, f).unwrap();
    assert!(report.max_rel_error() < TOL, "{report:?}");
}

#[test]
fn primitive_gradients_match_finite_differences() {
    // Loss = <f(x), r> with a fixed random r so every output element matters.
    fn probe<'t>(tp: &'t Tape<f64>, y: avfsnet::Var<'t, f64>, seed: u64) -> avfsnet::Result<avfsnet::Var<'t, f64>> {
        y.dot(tp.constant(randn(&y.shape(), seed)))
    }
    assert_grad(&[randn(&[2, 3], 70), randn(&[3, 2], 71)], |tp, v| probe(tp, v[0].matmul(v[1])?, 72));
    assert_grad(&[randn(&[2, 2, 3], 170), randn(&[2, 3, 2], 171)], |tp, v| probe(tp, v[0].matmul(v[1])?, 172));
    assert_grad(&[randn(&[2, 8], 73), randn(&[3, 2, 3], 74)], |tp, v| probe(tp, v[0].conv1d(v[1], 2)?, 75));
    assert_grad(&[randn(&[2, 6], 76), randn(&[3, 2, 3], 77)], |tp, v| {
        let geom = ConvGeom { stride: 1, dilation: 2, pad_left: 2, pad_right: 2 };
        probe(tp, v[0].conv1d_geom(v[1], geom)?, 78)
    });
    assert_grad(&[randn(&[2, 3], 79), randn(&[2, 2, 4], 80)], |tp, v| probe(tp, v[0].conv1d_transpose(v[1], 2)?, 81));
    assert_grad(&[randn(&[2, 6], 82), randn(&[2, 3], 83)], |tp, v| probe(tp, v[0].depthwise_conv1d(v[1])?, 84));
    assert_grad(&[randn(&[2, 4], 85), randn(&[4], 86), randn(&[4], 87)], |tp, v| {
        probe(tp, v[0].layer_norm(v[1], v[2], 1e-5)?, 88)
    });
    assert_grad(&[randn(&[2, 4], 89)], |tp, v| probe(tp, v[0].softmax()?, 90));
    assert_grad(&[randn(&[6], 91)], |tp, v| probe(tp, v[0].gelu()?, 92));
    assert_grad(&[randn(&[6], 93)], |tp, v| probe(tp, v[0].sigmoid()?, 94));
    assert_grad(&[randn(&[2, 3, 2], 95), randn(&[2, 4, 2], 96), randn(&[2, 4, 3], 97)], |tp, v| {
        probe(tp, v[0].attention(v[1], v[2], 0.7)?, 98)
    });
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let pos = randn(&[5], 100).map(|v| v.abs() + 0.5);
    assert_grad(&[randn(&[5], 101), randn(&[5], 102)], |_, v| v[0].mul(v[1])?.add(v[0])?.sub(v[1])?.square()?.sum());
    assert_grad(&[randn(&[5], 103), pos.clone()], |_, v| v[0].div(v[1])?.sum());
    assert_grad(&[pos.clone()], |_, v| v[0].ln()?.add(v[0].sqrt()?)?.add(v[0].exp()?)?.sum());
    assert_grad(&[randn(&[2, 3], 104), randn(&[3], 105)], |_, v| v[0].add_bias(v[1])?.square()?.mean());
    assert_grad(&[randn(&[3, 4], 106), randn(&[3], 107)], |_, v| v[0].add_channel_bias(v[1])?.square()?.mean());
    assert_grad(&[randn(&[4], 108), t(&[1], &[0.7])], |_, v| v[0].scale_by(v[1])?.square()?.sum());
    assert_grad(&[randn(&[2, 3, 4], 109)], |tp, v| {
        let p = v[0].permute(&[2, 0, 1])?;
        p.dot(tp.constant(randn(&p.shape(), 110)))
    });
    assert_grad(&[randn(&[3, 4], 111)], |tp, v| {
        let p = v[0].narrow(1, 1, 2)?.fit_last(5)?.mean_rows()?;
        p.dot(tp.constant(randn(&p.shape(), 112)))
    });
    assert_grad(&[randn(&[2, 8], 113)], |tp, v| {
        let p = v[0].max_pool1d(3)?;
        p.dot(tp.constant(randn(&p.shape(), 114)))
    });
    assert_grad(&[randn(&[2, 3], 115), randn(&[1, 3], 116)], |tp, v| {
        let c = avfsnet::Var::concat0(&[v[0], v[1]])?;
        c.dot(tp.constant(randn(&[3, 3], 117)))
    });
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let tape = Tape::new();
        let x = tape.constant(randn(&[3, 40], 120));
        let w = tape.constant(randn(&[5, 3, 4], 121));
        x.conv1d(w, 2).unwrap().gelu().unwrap().softmax().unwrap().value()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let tape = Tape::new();
        let s = tape.constant(t(&[3, 4], &data)).softmax().unwrap().value();
        for row in s.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn conv_adjoint_identity_holds(seed in 0u64..1000, stride in 1usize..5, k in 1usize..7, l in 1usize..6) {
        let tl = (l - 1) * stride + k;
        let x = randn(&[2, tl], seed);
        let w = randn(&[3, 2, k], seed + 1);
        let y = randn(&[3, l], seed + 2);
        let tape = Tape::new();
        let lhs = tape.constant(x.clone()).conv1d(tape.constant(w.clone()), stride).unwrap().value().dot(&y);
        let rhs = x.dot(&tape.constant(y).conv1d_transpose(tape.constant(w), stride).unwrap().value());
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }
}
