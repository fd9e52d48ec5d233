//! Training losses (SI-SNR, binary cross-entropy, uncertainty-weighted joint
//! loss) and evaluation metrics with the zero-penalty rule.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::audio_codec::Waveform;
use crate::autodiff::Var;
use crate::counting::PresenceEstimate;
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Added to ratio denominators.
pub const EPS: f64 = 1e-8;
/// Decibel metrics are clamped to `[-DB_CLAMP, DB_CLAMP]`.
pub const DB_CLAMP: f64 = 60.0;
/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub const BCE_EPS: f64 = 1e-7;

// Keeps sqrt/ln finite at exactly-zero energies inside the graph; far below
// anything that moves an unclamped value.
const TINY: f64 = 1e-30;

fn check_pair(op: &'static str, est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::shape(op, format!("estimate has {} samples, reference {}", est.len(), reference.len())));
    }
    if reference.iter().all(|&v| v == 0.0) {
        return Err(Error::UndefinedReference);
    }
    Ok(())
}

fn clamp_db(v: f64) -> f64 {
    if v.is_nan() {
        -DB_CLAMP
    } else {
        v.clamp(-DB_CLAMP, DB_CLAMP)
    }
}

/// Scale-invariant SNR in dB.
pub fn si_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair("si_snr", est, reference)?;
    let ss: f64 = reference.iter().map(|v| v * v).sum();
    let alpha = est.iter().zip(reference).map(|(a, b)| a * b).sum::<f64>() / ss;
    let target = alpha.abs() * ss.sqrt();
    let resid = est.iter().zip(reference).map(|(e, s)| (e - alpha * s).powi(2)).sum::<f64>().sqrt();
    if target == 0.0 {
        return Ok(-DB_CLAMP);
    }
    Ok(clamp_db(20.0 * (target / (resid + EPS)).log10()))
}

/// Plain SNR of the estimate against the reference, in dB.
pub fn sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair("sdr", est, reference)?;
    let ss: f64 = reference.iter().map(|v| v * v).sum();
    let err: f64 = est.iter().zip(reference).map(|(e, s)| (e - s).powi(2)).sum();
    Ok(clamp_db(10.0 * (ss / (err + EPS)).log10()))
}

/// SI-SDR improvement over using the mixture itself as the estimate.
pub fn si_sdri(est: &[f64], mixture: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(si_snr(est, reference)? - si_snr(mixture, reference)?)
}

pub fn sdri(est: &[f64], mixture: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(sdr(est, reference)? - sdr(mixture, reference)?)
}

/// Differentiable SI-SNR of `est` (any shape, flattened) against a constant
/// reference; a one-element variable in dB.
pub fn si_snr_var<'t, T: Scalar>(est: Var<'t, T>, reference: &Tensor<T>) -> Result<Var<'t, T>> {
    if est.numel() != reference.numel() {
        return Err(Error::shape(
            "si_snr",
            format!("estimate has {} samples, reference {}", est.numel(), reference.numel()),
        ));
    }
    let ss = reference.dot(reference);
    if ss == T::zero() {
        return Err(Error::UndefinedReference);
    }
    let tape = est.tape();
    let n = est.numel();
    let est = est.reshape(&[n])?;
    let s = tape.constant(reference.clone().reshape(&[n])?);
    let alpha = est.dot(s)?.mul_scalar(T::one() / ss)?;
    let proj = s.scale_by(alpha)?;
    let resid = est.sub(proj)?;
    let tiny = T::from_f64_lossy(TINY);
    let log_target = proj.square()?.sum()?.add_scalar(tiny)?.ln()?;
    let log_resid = resid.square()?.sum()?.add_scalar(tiny)?.sqrt()?.add_scalar(T::from_f64_lossy(EPS))?.ln()?;
    let to_db = T::from_f64_lossy(10.0 / std::f64::consts::LN_10);
    let db = log_target.mul_scalar(to_db)?.sub(log_resid.mul_scalar(to_db + to_db)?)?;
    let c = T::from_f64_lossy(DB_CLAMP);
    db.clamp(-c, c)
}

/// Negative SI-SNR, the separation training objective.
pub fn si_snr_loss<'t, T: Scalar>(est: Var<'t, T>, reference: &Tensor<T>) -> Result<Var<'t, T>> {
    si_snr_var(est, reference)?.neg()
}

/// Binary cross-entropy of a probability against a 0/1 label.
pub fn bce(p: f64, y: bool) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn bce_var<'t, T: Scalar>(p: Var<'t, T>, y: bool) -> Result<Var<'t, T>> {
    let e = T::from_f64_lossy(BCE_EPS);
    let p = p.clamp(e, T::one() - e)?;
    let q = if y { p } else { p.neg()?.add_scalar(T::one())? };
    q.ln()?.neg()?.sum()
}

/// The two learnable log-uncertainties of the joint objective.
#[derive(Debug, Clone, Copy)]
pub struct JointLossState {
    pub log_sigma1: ParamId,
    pub log_sigma2: ParamId,
}

impl JointLossState {
    /// Both log-sigmas start at 0, i.e. `sigma = 1`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str) -> Self {
        Self {
            log_sigma1: store.add(format!("{path}.log_sigma1"), Tensor::zeros(&[1])),
            log_sigma2: store.add(format!("{path}.log_sigma2"), Tensor::zeros(&[1])),
        }
    }

    pub fn sigmas<T: Scalar>(&self, store: &ParamStore<T>) -> (f64, f64) {
        (store.get(self.log_sigma1).item().to_f64_lossy().exp(), store.get(self.log_sigma2).item().to_f64_lossy().exp())
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, '_, T>, l_sep: Var<'t, T>, l_ce: Var<'t, T>) -> Result<Var<'t, T>> {
        joint_loss(l_sep, l_ce, cx.p(self.log_sigma1), cx.p(self.log_sigma2))
    }
}

/// `l1 / (2 s1^2) + l2 / (2 s2^2) + log s1 + log s2` with `s_k = exp(log_sigma_k)`.
pub fn joint_loss<'t, T: Scalar>(
    l1: Var<'t, T>,
    l2: Var<'t, T>,
    log_sigma1: Var<'t, T>,
    log_sigma2: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let half = T::from_f64_lossy(0.5);
    let term = |l: Var<'t, T>, ls: Var<'t, T>| -> Result<Var<'t, T>> {
        let w = ls.mul_scalar(-(T::one() + T::one()))?.exp()?.mul_scalar(half)?;
        l.reshape(&[1])?.mul(w.reshape(&[1])?)?.add(ls.reshape(&[1])?)
    };
    term(l1, log_sigma1)?.add(term(l2, log_sigma2)?)
}

/// Plain-number counterpart of [`joint_loss`].
pub fn joint_loss_value(l1: f64, l2: f64, log_sigma1: f64, log_sigma2: f64) -> f64 {
    l1 * 0.5 * (-2.0 * log_sigma1).exp() + l2 * 0.5 * (-2.0 * log_sigma2).exp() + log_sigma1 + log_sigma2
}

/// One CSV row: a (sample, branch) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRecord {
    pub sample_id: String,
    pub speaker_id: usize,
    pub active: bool,
    pub selected: bool,
    pub si_sdr: f64,
    pub sdr: f64,
    pub si_sdri: f64,
    pub sdri: f64,
}

impl SpeakerRecord {
    /// Rows that enter the metric means: true speakers, hit or missed, and
    /// false alarms. Correct rejections do not.
    pub fn is_scored(&self) -> bool {
        self.active || self.selected
    }
}

/// Per-sample evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub speakers: Vec<SpeakerRecord>,
    pub true_count: usize,
    pub estimated_count: usize,
}

impl EvalRecord {
    pub fn count_correct(&self) -> bool {
        self.true_count == self.estimated_count
    }
}

/// Scores one sample. Branch `i` is paired with the speaker whose visual cue
/// drove it. A missed active speaker and a selected phantom branch score 0.
pub fn evaluate_with_penalty(
    sample_id: &str,
    estimate: &PresenceEstimate,
    estimates: &[Waveform],
    mixture: &Waveform,
    references: &[Waveform],
    active: &[bool],
) -> Result<EvalRecord> {
    let m = active.len();
    if estimate.probabilities.len() != m || estimates.len() != m || references.len() != m {
        return Err(Error::Pairing { masks: estimate.probabilities.len(), waveforms: estimates.len() });
    }
    let mut speakers = Vec::with_capacity(m);
    for i in 0..m {
        let selected = estimate.is_selected(i);
        let mut rec = SpeakerRecord {
            sample_id: sample_id.to_string(),
            speaker_id: i,
            active: active[i],
            selected,
            si_sdr: 0.0,
            sdr: 0.0,
            si_sdri: 0.0,
            sdri: 0.0,
        };
        if active[i] && selected {
            let (e, x, s) = (&estimates[i].samples, &mixture.samples, &references[i].samples);
            rec.si_sdr = si_snr(e, s)?;
            rec.sdr = sdr(e, s)?;
            rec.si_sdri = rec.si_sdr - si_snr(x, s)?;
            rec.sdri = rec.sdr - sdr(x, s)?;
        }
        speakers.push(rec);
    }
    Ok(EvalRecord {
        sample_id: sample_id.to_string(),
        true_count: active.iter().filter(|&&a| a).count(),
        estimated_count: estimate.estimated_count,
        speakers,
    })
}

/// Dataset-level means and speaker-count accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub samples: usize,
    pub scored_entries: usize,
    pub mean_si_sdr: f64,
    pub mean_sdr: f64,
    pub mean_si_sdri: f64,
    pub mean_sdri: f64,
    pub sca: f64,
    pub sca_correct: usize,
}

pub fn aggregate(records: &[EvalRecord]) -> AggregateReport {
    let scored: Vec<&SpeakerRecord> = records.iter().flat_map(|r| &r.speakers).filter(|s| s.is_scored()).collect();
    let mean = |f: fn(&SpeakerRecord) -> f64| {
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|s| f(s)).sum::<f64>() / scored.len() as f64
        }
    };
    let correct = records.iter().filter(|r| r.count_correct()).count();
    AggregateReport {
        samples: records.len(),
        scored_entries: scored.len(),
        mean_si_sdr: mean(|s| s.si_sdr),
        mean_sdr: mean(|s| s.sdr),
        mean_si_sdri: mean(|s| s.si_sdri),
        mean_sdri: mean(|s| s.sdri),
        sca: if records.is_empty() { 0.0 } else { correct as f64 / records.len() as f64 },
        sca_correct: correct,
    }
}

pub const CSV_HEADER: &str = "sample_id,speaker_id,active,selected,si_sdr,sdr,si_sdri,sdri";

/// Per-speaker table. Floats use shortest round-trip formatting, so parsing
/// the file back recovers every value exactly.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in records.iter().flat_map(|r| &r.speakers) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.sample_id, s.speaker_id, s.active as u8, s.selected as u8, s.si_sdr, s.sdr, s.si_sdri, s.sdri
        );
    }
    out
}

/// Inverse of [`records_to_csv`]; rows are regrouped by sample id in order
/// of first appearance.
pub fn records_from_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(Error::Format { field: "csv header", detail: format!("{other:?}") }),
    }
    let mut records: Vec<EvalRecord> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Format { field: "csv row", detail: format!("line {}: {} fields", n + 2, f.len()) });
        }
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::Format { field: "csv flag", detail: s.to_string() }),
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format { field: "csv number", detail: e.to_string() });
        let rec = SpeakerRecord {
            sample_id: f[0].to_string(),
            speaker_id: f[1].parse().map_err(|_| Error::Format { field: "speaker_id", detail: f[1].to_string() })?,
            active: flag(f[2])?,
            selected: flag(f[3])?,
            si_sdr: num(f[4])?,
            sdr: num(f[5])?,
            si_sdri: num(f[6])?,
            sdri: num(f[7])?,
        };
        let idx = match records.iter().position(|r| r.sample_id == rec.sample_id) {
            Some(i) => i,
            None => {
                records.push(EvalRecord { sample_id: rec.sample_id.clone(), speakers: Vec::new(), true_count: 0, estimated_count: 0 });
                records.len() - 1
            }
        };
        let r = &mut records[idx];
        r.true_count += rec.active as usize;
        r.estimated_count += rec.selected as usize;
        r.speakers.push(rec);
    }
    Ok(records)
}
