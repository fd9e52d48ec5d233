use std::fs;
use std::path::{Path, PathBuf};

use avfsnet::counting::PresenceEstimate;
use avfsnet::data_synth::{build_dataset, read_visual, read_wav, write_wav, DatasetConfig, Manifest, Split};
use avfsnet::losses::si_snr;
use avfsnet::model::MaskMode;
use avfsnet::spectrogram::{log_spectrogram, write_png, SpecConfig, Spectrogram};
use avfsnet::training::{self, Checkpoint, EvalOptions, Estimator, ProbabilitySource, TrainConfig};
use avfsnet::{Error, Result, Scalar};
use serde::Serialize;

use crate::config::{echo, model_preset, to_value, EvalSection, FileConfig, Precision};
use crate::{EvaluateArgs, GenDataArgs, PlotFormat, SeparateArgs, SpectrogramArgs, TrainArgs};

fn under(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| io_err(path, e))
}

pub fn gen_data(run_dir: &Path, a: GenDataArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref().map(|p| under(run_dir, p)).as_deref())?;
    let base = DatasetConfig::preset(&a.preset).ok_or_else(|| Error::Config(format!("unknown preset `{}`", a.preset)))?;
    let mut cfg = file.section("data", &base)?;
    cfg.seed = a.seed.or(file.seed).unwrap_or(cfg.seed);
    cfg.validate()?;
    let out = a.out.unwrap_or_else(|| PathBuf::from("data").join(&a.preset));
    let (manifest, _) = build_dataset(&cfg, &under(run_dir, &out))?;
    echo(&under(run_dir, &out), cfg.seed, None, &[("data", to_value(&cfg)?)])?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn train(run_dir: &Path, a: TrainArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref().map(|p| under(run_dir, p)).as_deref())?;
    let model = file.section("model", &model_preset(&a.model)?)?;
    let mut base = TrainConfig::desk(a.stage);
    base.model = model;
    base.out_dir = PathBuf::from("runs").join(format!("stage{}", a.stage));
    let mut cfg = file.section("train", &base)?;
    cfg.stage = a.stage;
    cfg.seed = a.seed.or(file.seed).unwrap_or(cfg.seed);
    let set = |slot: &mut PathBuf, v: Option<PathBuf>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.manifest, a.manifest);
    set(&mut cfg.out_dir, a.out);
    cfg.transfer_from = a.transfer_from.or(cfg.transfer_from);
    cfg.stage1_checkpoint = a.stage1_ckpt.or(cfg.stage1_checkpoint);
    cfg.stage2_checkpoint = a.stage2_ckpt.or(cfg.stage2_checkpoint);
    cfg.max_epochs = a.max_epochs.unwrap_or(cfg.max_epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.max_train_samples = a.max_train_samples.or(cfg.max_train_samples);
    cfg.max_valid_samples = a.max_valid_samples.or(cfg.max_valid_samples);
    let precision = a.precision.or(file.precision).unwrap_or_default();

    // the echo keeps run-dir-relative paths so it can be replayed as a config
    let mut model_only = cfg.clone();
    let model = std::mem::replace(&mut model_only.model, avfsnet::config::ModelConfig::tiny());
    let mut train_table = to_value(&model_only)?;
    if let Some(t) = train_table.as_table_mut() {
        t.remove("model");
    }
    let out_dir = under(run_dir, &cfg.out_dir);
    echo(&out_dir, cfg.seed, Some(precision), &[("model", to_value(&model)?), ("train", train_table)])?;

    let resolve = |p: &Option<PathBuf>| p.as_ref().map(|p| under(run_dir, p));
    let mut abs = cfg.clone();
    abs.manifest = under(run_dir, &cfg.manifest);
    abs.out_dir = out_dir;
    abs.transfer_from = resolve(&cfg.transfer_from);
    abs.stage1_checkpoint = resolve(&cfg.stage1_checkpoint);
    abs.stage2_checkpoint = resolve(&cfg.stage2_checkpoint);
    let outcome = match precision {
        Precision::F32 => training::train::<f32>(&abs)?,
        Precision::F64 => training::train::<f64>(&abs)?,
    };
    eprintln!(
        "stage {}: {} epochs, best validation loss {:.4} (initial {:.4})",
        cfg.stage,
        outcome.history.len(),
        outcome.best_valid_loss,
        outcome.initial_valid_loss
    );
    println!("{}", outcome.best_checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct BranchReport {
    branch: usize,
    visual: String,
    p_i: f64,
    selected: bool,
    wav: Option<String>,
}

#[derive(Serialize)]
struct SeparationReport {
    mixture: String,
    tau: f64,
    estimated_count: usize,
    branches: Vec<BranchReport>,
}

fn separate_with<T: Scalar>(run_dir: &Path, a: &SeparateArgs) -> Result<()> {
    let net = Checkpoint::<T>::load(&under(run_dir, &a.ckpt))?.build_model()?;
    let mixture = read_wav(&under(run_dir, &a.mixture))?;
    let visuals = a.visuals.iter().map(|p| read_visual(&under(run_dir, p))).collect::<Result<Vec<_>>>()?;
    let (waves, probs) = net.infer(&mixture, &visuals, MaskMode::Learned)?;
    let est = PresenceEstimate::from_probabilities(probs.clone(), a.tau)?;
    let out = under(run_dir, &a.out);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let mut branches = Vec::with_capacity(waves.len());
    for (i, w) in waves.iter().enumerate() {
        let selected = est.is_selected(i);
        let wav = if selected {
            let name = format!("branch{i}.wav");
            write_wav(&out.join(&name), w)?;
            Some(name)
        } else {
            None
        };
        branches.push(BranchReport { branch: i, visual: a.visuals[i].display().to_string(), p_i: probs[i], selected, wav });
    }
    let report = SeparationReport {
        mixture: a.mixture.display().to_string(),
        tau: a.tau,
        estimated_count: est.estimated_count,
        branches,
    };
    write_json(&out.join("report.json"), &report)?;
    println!("{}", out.join("report.json").display());
    Ok(())
}

pub fn separate(run_dir: &Path, a: SeparateArgs) -> Result<()> {
    match a.precision.unwrap_or_default() {
        Precision::F32 => separate_with::<f32>(run_dir, &a),
        Precision::F64 => separate_with::<f64>(run_dir, &a),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL.into_iter().find(|x| x.as_str() == s).ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
}

fn evaluate_with<T: Scalar>(
    ckpt: Option<&Path>,
    manifest: &Manifest,
    root: &Path,
    opts: &EvalOptions,
) -> Result<(Vec<avfsnet::losses::EvalRecord>, avfsnet::losses::AggregateReport)> {
    match ckpt {
        Some(p) => {
            let net = Checkpoint::<T>::load(p)?.build_model()?;
            training::evaluate(&Estimator::Model(&net), manifest, root, opts)
        }
        None => training::evaluate::<T>(&Estimator::Passthrough, manifest, root, opts),
    }
}

pub fn evaluate(run_dir: &Path, a: EvaluateArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref().map(|p| under(run_dir, p)).as_deref())?;
    let mut sec = file.section("eval", &EvalSection::default())?;
    sec.tau = a.tau.unwrap_or(sec.tau);
    if let Some(s) = &a.split {
        sec.split = parse_split(s)?;
    }
    sec.oracle_probabilities |= a.oracle_probabilities;
    sec.max_samples = a.max_samples.or(sec.max_samples);
    let precision = a.precision.or(file.precision).unwrap_or_default();

    let manifest_path = under(run_dir, &a.manifest);
    if !manifest_path.exists() {
        return Err(Error::Io {
            path: manifest_path,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        });
    }
    let manifest = Manifest::load(&manifest_path)?;
    if manifest.entries.is_empty() {
        return Err(Error::Config(format!("manifest {} lists no samples", manifest_path.display())));
    }
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let opts = EvalOptions {
        tau: sec.tau,
        split: sec.split,
        probabilities: if sec.oracle_probabilities { ProbabilitySource::Oracle } else { ProbabilitySource::Model },
        max_samples: sec.max_samples,
    };
    let ckpt = a.ckpt.as_ref().map(|p| under(run_dir, p));
    let (records, agg) = match precision {
        Precision::F32 => evaluate_with::<f32>(ckpt.as_deref(), &manifest, &root, &opts)?,
        Precision::F64 => evaluate_with::<f64>(ckpt.as_deref(), &manifest, &root, &opts)?,
    };
    let out = under(run_dir, &a.out);
    let seed = file.seed.unwrap_or(0);
    echo(&out, seed, Some(precision), &[("eval", to_value(&sec)?)])?;
    let (_, json) = training::write_reports(&out, &records, &agg)?;
    println!("{}", serde_json::to_string(&agg)?);
    eprintln!("reports in {}", json.parent().unwrap_or(&out).display());
    Ok(())
}

#[derive(Serialize)]
struct Panel {
    file: String,
    frames: usize,
    bins: usize,
    si_sdr_db: Option<f64>,
    csv: Option<String>,
}

pub fn spectrogram(run_dir: &Path, a: SpectrogramArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref().map(|p| under(run_dir, p)).as_deref())?;
    let base = if a.linear { SpecConfig::linear() } else { SpecConfig::default() };
    let mut cfg = file.section("spectrogram", &base)?;
    if a.linear {
        cfg.mel_bands = None;
    }
    cfg.validate()?;
    let reference = a.reference.as_ref().map(|p| read_wav(&under(run_dir, p))).transpose()?;
    let out = under(run_dir, &a.out);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;

    let mut specs: Vec<Spectrogram> = Vec::new();
    let mut panels = Vec::new();
    for p in &a.wavs {
        let w = read_wav(&under(run_dir, p))?;
        let si_sdr_db = match &reference {
            Some(r) if r.len() != w.len() || r.sample_rate != w.sample_rate => {
                return Err(Error::DataMismatch(format!("{} differs from the reference in length or rate", p.display())))
            }
            Some(r) => Some(si_snr(&w.samples, &r.samples)?),
            None => None,
        };
        let s = log_spectrogram(&w, &cfg)?;
        panels.push(Panel { file: p.display().to_string(), frames: s.frames, bins: s.bins, si_sdr_db, csv: None });
        specs.push(s);
    }

    let png = out.join("spectrogram.png");
    let wrote_png = a.format == PlotFormat::Png && match write_png(&png, &specs, cfg.floor_db) {
        Ok(()) => true,
        Err(Error::Unsupported(m)) => {
            eprintln!("PNG encoding failed ({m}); writing CSV instead");
            false
        }
        Err(e) => return Err(e),
    };
    if !wrote_png {
        for (i, (s, panel)) in specs.iter().zip(&mut panels).enumerate() {
            let name = format!("panel{i}.csv");
            let path = out.join(&name);
            fs::write(&path, s.to_csv()).map_err(|e| io_err(&path, e))?;
            panel.csv = Some(name);
        }
    }
    write_json(&out.join("panels.json"), &panels)?;
    echo(&out, file.seed.unwrap_or(0), None, &[("spectrogram", to_value(&cfg)?)])?;
    println!("{}", if wrote_png { png.display().to_string() } else { out.join("panels.json").display().to_string() });
    Ok(())
}
