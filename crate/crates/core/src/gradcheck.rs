//! Central finite-difference checks of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::layers::Ctx;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` per input, norm-wise;
    /// the plain difference when both norms are below `1e-6`.
    pub rel_errors: Vec<f64>,
    pub max_abs_error: f64,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare gradients of the scalar built by `f` against central differences
/// with the given step.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck { rel_errors: Vec::with_capacity(inputs.len()), max_abs_error: 0.0 };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut acc = Accum::default();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            acc.push(a, (up - down) / (2.0 * step));
        }
        acc.finish(&mut report);
    }
    Ok(report)
}

/// As [`check`], but differentiating with respect to every unfrozen
/// parameter of `store`; one relative error per parameter tensor.
pub fn check_params<F>(store: &ParamStore<f64>, step: f64, f: F) -> Result<GradCheck>
where
    F: for<'t, 's> Fn(&Ctx<'t, 's, f64>) -> Result<Var<'t, f64>>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&Ctx::new(&tape, s))?.item())
    };
    let tape = Tape::new();
    let loss = f(&Ctx::new(&tape, store))?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck { rel_errors: Vec::new(), max_abs_error: 0.0 };
    let mut probe = store.clone();
    for id in store.ids().filter(|&id| !store.is_frozen(id)) {
        let n = store.get(id).numel();
        let analytic = grads.param(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut acc = Accum::default();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            acc.push(a, (up - down) / (2.0 * step));
        }
        acc.finish(&mut report);
    }
    Ok(report)
}

const ABS_FLOOR: f64 = 1e-6;

#[derive(Default)]
struct Accum {
    num_sq: f64,
    ana_sq: f64,
    diff_sq: f64,
    max_abs: f64,
}

impl Accum {
    fn push(&mut self, analytic: f64, numeric: f64) {
        self.num_sq += numeric * numeric;
        self.ana_sq += analytic * analytic;
        self.diff_sq += (analytic - numeric).powi(2);
        self.max_abs = self.max_abs.max((analytic - numeric).abs());
    }

    fn finish(self, report: &mut GradCheck) {
        let denom = self.num_sq.sqrt().max(self.ana_sq.sqrt());
        let diff = self.diff_sq.sqrt();
        // Exactly-zero gradients (e.g. attention key biases, which softmax
        // cancels) leave only rounding noise; compare those absolutely.
        report.rel_errors.push(if denom < ABS_FLOOR { diff } else { diff / denom });
        report.max_abs_error = report.max_abs_error.max(self.max_abs);
    }
}
