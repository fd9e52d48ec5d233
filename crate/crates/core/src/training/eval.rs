//! Full inference over a manifest split with penalized scoring.

use std::fs;
use std::path::{Path, PathBuf};

use crate::audio_codec::Waveform;
use crate::counting::PresenceEstimate;
use crate::data_synth::{load_sample, Manifest, Split};
use crate::error::{Error, Result};
use crate::losses::{aggregate, evaluate_with_penalty, records_to_csv, AggregateReport, EvalRecord};
use crate::model::{AvfsNet, MaskMode};
use crate::scalar::Scalar;

/// Where per-branch estimates come from.
pub enum Estimator<'a, T: Scalar> {
    Model(&'a AvfsNet<T>),
    /// Every branch outputs the mixture unchanged.
    Passthrough,
}

/// Where presence probabilities come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbabilitySource {
    /// The counting head (all ones for the passthrough estimator).
    Model,
    /// 1 for active cues, 0 for phantoms.
    Oracle,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub tau: f64,
    pub split: Split,
    pub probabilities: ProbabilitySource,
    pub max_samples: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { tau: 0.5, split: Split::Test, probabilities: ProbabilitySource::Model, max_samples: None }
    }
}

/// Scores every sample of the chosen split.
pub fn evaluate<T: Scalar>(
    estimator: &Estimator<'_, T>,
    manifest: &Manifest,
    root: &Path,
    opts: &EvalOptions,
) -> Result<(Vec<EvalRecord>, AggregateReport)> {
    let mut entries = manifest.split(opts.split);
    if let Some(n) = opts.max_samples {
        entries.truncate(n);
    }
    if entries.is_empty() {
        return Err(Error::EmptyInput("evaluation split has no samples"));
    }
    let frozen = match estimator {
        Estimator::Model(net) => Some(net.frozen_view()),
        Estimator::Passthrough => None,
    };
    let mut records = Vec::with_capacity(entries.len());
    for entry in entries {
        let sample = load_sample(root, entry)?;
        let (waves, probs): (Vec<Waveform>, Vec<f64>) = match (estimator, &frozen) {
            (Estimator::Model(net), Some(f)) => net.infer_with(f, &sample.mixture, &sample.visuals, MaskMode::Learned)?,
            _ => (vec![sample.mixture.clone(); sample.m()], vec![1.0; sample.m()]),
        };
        let probs = match opts.probabilities {
            ProbabilitySource::Model => probs,
            ProbabilitySource::Oracle => sample.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
        };
        let est = PresenceEstimate::from_probabilities(probs, opts.tau)?;
        records.push(evaluate_with_penalty(&sample.id, &est, &waves, &sample.mixture, &sample.sources, &sample.active)?);
    }
    let agg = aggregate(&records);
    Ok((records, agg))
}

/// Writes `per_sample.csv` and `aggregate.json` into `dir`.
pub fn write_reports(dir: &Path, records: &[EvalRecord], agg: &AggregateReport) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("per_sample.csv");
    fs::write(&csv, records_to_csv(records)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("aggregate.json");
    fs::write(&json, serde_json::to_string_pretty(agg)? + "\n").map_err(|e| Error::io(&json, e))?;
    Ok((csv, json))
}
