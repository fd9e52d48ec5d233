//! Finite-difference checks of every learnable primitive and composite block.

use avfsnet::autodiff::ConvGeom;
use avfsnet::branchformer::{BranchformerEncoder, Csgu};
use avfsnet::config::ModelConfig;
use avfsnet::counting::CountingHead;
use avfsnet::gradcheck::{check, check_params};
use avfsnet::layers::{Ctx, LayerNorm, Linear, TransformerStack};
use avfsnet::losses::{bce_var, joint_loss, si_snr_loss};
use avfsnet::separator::Separator;
use avfsnet::visual::VisualFrontend;
use avfsnet::{ParamStore, Result, Tape, Tensor, Var};

use super::{randn, rng};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

/// One named check with its worst relative error and largest input size.
#[derive(Debug)]
pub struct GradResult {
    pub name: &'static str,
    pub rel_error: f64,
    pub max_elements: usize,
}

fn probe<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    y.dot(tape.constant(randn(&y.shape(), seed)))
}

fn on_inputs<F>(out: &mut Vec<GradResult>, name: &'static str, inputs: &[Tensor<f64>], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let report = check(inputs, STEP, f).unwrap();
    let max_elements = inputs.iter().map(|t| t.numel()).max().unwrap_or(0);
    out.push(GradResult { name, rel_error: report.max_rel_error(), max_elements });
}

fn on_params<F>(out: &mut Vec<GradResult>, name: &'static str, store: &ParamStore<f64>, f: F)
where
    F: for<'t, 's> Fn(&Ctx<'t, 's, f64>) -> Result<Var<'t, f64>>,
{
    let report = check_params(store, STEP, f).unwrap();
    let max_elements = store.ids().map(|id| store.get(id).numel()).max().unwrap_or(0);
    out.push(GradResult { name, rel_error: report.max_rel_error(), max_elements });
}

/// Small configuration whose every parameter tensor has at most 64 elements.
pub fn micro_config() -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.dim = 4;
    cfg.branchformer.heads = 2;
    cfg.branchformer.hidden = 8;
    cfg.branchformer.csgu_kernel = 3;
    cfg.visual.feature_dim = 3;
    cfg.visual.embed_dim = 4;
    cfg.visual.tcn_blocks = 2;
    cfg.separator.chunk = 4;
    cfg.separator.heads = 2;
    cfg.separator.ffn_mult = 2;
    cfg.counting.dim = 4;
    cfg.counting.heads = 2;
    cfg.counting.mlp_hidden = 4;
    cfg
}

/// Randomise every parameter (including zero-initialised biases and unit
/// gains) so no gradient path is trivially inactive.
pub fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).shape().to_vec();
        let noise = Tensor::randn(&shape, 0.3, &mut rng(seed.wrapping_mul(131) + i as u64));
        let v = store.get(id).zip_map(&noise, |a, b| a + b).unwrap();
        store.set(id, v).unwrap();
    }
}

pub fn run() -> Vec<GradResult> {
    let mut out = Vec::new();
    let cfg = micro_config();

    // primitives, with respect to their inputs
    on_inputs(&mut out, "matmul", &[randn(&[3, 4], 1), randn(&[4, 2], 2)], |tp, v| probe(tp, v[0].matmul(v[1])?, 3));
    on_inputs(&mut out, "linear", &[randn(&[3, 4], 4), randn(&[4, 3], 5), randn(&[3], 6)], |tp, v| {
        probe(tp, v[0].linear(v[1], Some(v[2]))?, 7)
    });
    on_inputs(&mut out, "conv1d", &[randn(&[2, 12], 8), randn(&[3, 2, 4], 9)], |tp, v| probe(tp, v[0].conv1d(v[1], 2)?, 10));
    on_inputs(&mut out, "conv1d_dilated", &[randn(&[2, 9], 11), randn(&[2, 2, 3], 12)], |tp, v| {
        probe(tp, v[0].conv1d_geom(v[1], ConvGeom::same(3, 2))?, 13)
    });
    on_inputs(&mut out, "conv1d_transpose", &[randn(&[3, 4], 14), randn(&[3, 1, 4], 15)], |tp, v| {
        probe(tp, v[0].conv1d_transpose(v[1], 2)?, 16)
    });
    on_inputs(&mut out, "depthwise_conv1d", &[randn(&[3, 7], 17), randn(&[3, 3], 18)], |tp, v| {
        probe(tp, v[0].depthwise_conv1d(v[1])?, 19)
    });
    on_inputs(&mut out, "layer_norm", &[randn(&[3, 5], 20), randn(&[5], 21), randn(&[5], 22)], |tp, v| {
        probe(tp, v[0].layer_norm(v[1], v[2], 1e-5)?, 23)
    });
    on_inputs(&mut out, "softmax", &[randn(&[3, 5], 24)], |tp, v| probe(tp, v[0].softmax()?, 25));
    on_inputs(&mut out, "gelu", &[randn(&[12], 26)], |tp, v| probe(tp, v[0].gelu()?, 27));
    on_inputs(&mut out, "sigmoid", &[randn(&[12], 28)], |tp, v| probe(tp, v[0].sigmoid()?, 29));
    on_inputs(&mut out, "attention", &[randn(&[2, 3, 4], 30), randn(&[2, 5, 4], 31), randn(&[2, 5, 3], 32)], |tp, v| {
        probe(tp, v[0].attention(v[1], v[2], 0.5)?, 33)
    });

    // layers, with respect to their parameters
    {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 4, 3, true, &mut rng(34));
        let norm = LayerNorm::new(&mut store, "norm", 3, 1e-5);
        jitter(&mut store, 35);
        let x = randn(&[2, 4], 36);
        on_params(&mut out, "linear+layer_norm params", &store, |cx| {
            let y = norm.forward(cx, lin.forward(cx, cx.constant(x.clone()))?)?;
            probe(cx.tape, y, 37)
        });
    }
    {
        let mut store = ParamStore::new();
        let stack = TransformerStack::new(&mut store, "tf", 1, 4, 2, 2, 1e-5, &mut rng(38)).unwrap();
        jitter(&mut store, 39);
        let x = randn(&[2, 3, 4], 40);
        on_params(&mut out, "transformer layer", &store, |cx| probe(cx.tape, stack.forward(cx, cx.constant(x.clone()))?, 41));
        on_inputs(&mut out, "transformer layer input", &[x.clone()], |tp, v| {
            let cx = Ctx::new(tp, &store);
            probe(tp, stack.forward(&cx, v[0])?, 42)
        });
    }

    // composite blocks
    {
        let mut store = ParamStore::new();
        let csgu = Csgu::new(&mut store, "csgu", 8, 3, 1e-5, &mut rng(43)).unwrap();
        jitter(&mut store, 44);
        let z = randn(&[5, 8], 45);
        on_params(&mut out, "csgu", &store, |cx| probe(cx.tape, csgu.forward_tm(cx, cx.constant(z.clone()))?, 46));
        on_inputs(&mut out, "csgu input", &[z.clone()], |tp, v| {
            probe(tp, csgu.forward_tm(&Ctx::new(tp, &store), v[0])?, 47)
        });
    }
    {
        let mut store = ParamStore::new();
        let enc = BranchformerEncoder::new(&mut store, "encoder", &cfg, &mut rng(48)).unwrap();
        jitter(&mut store, 49);
        let x = randn(&[4, 5], 50);
        on_params(&mut out, "branchformer block", &store, |cx| probe(cx.tape, enc.forward(cx, cx.constant(x.clone()))?, 51));
        on_inputs(&mut out, "branchformer block input", &[x.clone()], |tp, v| {
            probe(tp, enc.forward(&Ctx::new(tp, &store), v[0])?, 52)
        });
    }
    {
        let mut store = ParamStore::new();
        let vf = VisualFrontend::new(&mut store, "visual", &cfg, &mut rng(53));
        jitter(&mut store, 54);
        let v = randn(&[3, 6], 55);
        on_params(&mut out, "visual encoder", &store, |cx| probe(cx.tape, vf.forward(cx, cx.constant(v.clone()))?, 56));
    }
    {
        let mut store = ParamStore::new();
        let sep = Separator::new(&mut store, "separator", &cfg, &mut rng(57)).unwrap();
        jitter(&mut store, 58);
        let cross = sep.stages[0].cross.clone();
        let (hv, ha) = (randn(&[3, 4], 59), randn(&[3, 4, 4], 60));
        on_params(&mut out, "cross-modal fusion", &store, |cx| {
            probe(cx.tape, cross.forward_tm(cx, cx.constant(hv.clone()), cx.constant(ha.clone()))?, 61)
        });
        on_inputs(&mut out, "cross-modal fusion input", &[hv.clone(), ha.clone()], |tp, v| {
            probe(tp, cross.forward_tm(&Ctx::new(tp, &store), v[0], v[1])?, 62)
        });
        let (h, cue) = (randn(&[4, 9], 63), randn(&[4, 4], 64));
        on_params(&mut out, "separation branch", &store, |cx| {
            let m = sep.separate_all(cx, cx.constant(h.clone()), &[cx.constant(cue.clone())])?;
            probe(cx.tape, m[0], 65)
        });
    }
    {
        let mut store = ParamStore::new();
        let head = CountingHead::new(&mut store, "counting", &cfg, &mut rng(66)).unwrap();
        jitter(&mut store, 67);
        let m = randn(&[4, 12], 68).map(f64::abs);
        on_params(&mut out, "counting head", &store, |cx| head.forward(cx, cx.constant(m.clone())));
        on_inputs(&mut out, "counting head input", &[m.clone()], |tp, v| head.forward(&Ctx::new(tp, &store), v[0]));
    }

    // losses
    let reference = randn(&[8], 69);
    let est = reference.zip_map(&randn(&[8], 70), |s, n| s + 0.7 * n).unwrap();
    on_inputs(&mut out, "si_snr_loss", &[est], |_, v| si_snr_loss(v[0], &reference));
    on_inputs(&mut out, "bce", &[Tensor::from_f64(&[1], &[0.3]).unwrap()], |_, v| bce_var(v[0], true));
    let scalars = |x: f64| Tensor::from_f64(&[1], &[x]).unwrap();
    on_inputs(&mut out, "joint_loss", &[scalars(7.5), scalars(0.4), scalars(0.3), scalars(-0.2)], |_, v| {
        joint_loss(v[0], v[1], v[2], v[3])
    });
    out
}
