//! The three training stages and their shared epoch loop.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::TrainConfig;
use super::optim::{accumulate, clip_grad_norm, global_norm, scale_grads, Adam, EarlyStopping, GradMap, Plateau};
use crate::autodiff::Tape;
use crate::counting::PresenceEstimate;
use crate::data_synth::{load_sample, Manifest, ManifestEntry, MixtureSample, Split};
use crate::error::{Error, Result};
use crate::losses::{aggregate, bce, bce_var, evaluate_with_penalty, si_snr, si_snr_loss, si_snr_var, DB_CLAMP};
use crate::model::{groups, AvfsNet, MaskMode};
use crate::scalar::Scalar;


/// One epoch's summary, also written to the JSON-lines log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub best_valid_loss: f64,
    pub metrics: BTreeMap<String, f64>,
    pub lr: f64,
    /// Largest global gradient norm applied in the epoch, after clipping.
    pub max_applied_grad_norm: f64,
    pub wallclock: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
    /// Validation before the first update.
    pub initial_valid_loss: f64,
    pub initial_metrics: BTreeMap<String, f64>,
    pub history: Vec<EpochRecord>,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
}

#[derive(Serialize)]
struct LogLine<'a> {
    epoch: usize,
    split: &'a str,
    loss: f64,
    metrics: &'a BTreeMap<String, f64>,
    lr: f64,
    wallclock: f64,
}

struct JsonLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonLog {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { out: BufWriter::new(f), path })
    }

    fn write(&mut self, line: &LogLine<'_>) -> Result<()> {
        let s = serde_json::to_string(line)?;
        writeln!(self.out, "{s}").and_then(|_| self.out.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Validation result: a lower-is-better loss plus named metrics.
pub type Validation = (f64, BTreeMap<String, f64>);

struct Loop<'c> {
    cfg: &'c TrainConfig,
    stage: u8,
    stage1_backbone_hash: Option<String>,
}

impl Loop<'_> {
    fn meta(&self, epoch: usize, best: f64) -> CheckpointMeta {
        CheckpointMeta {
            stage: self.stage,
            epoch,
            best_metric: best,
            config_hash: String::new(),
            model: self.cfg.model.clone(),
            adam_step: 0,
            lr: self.cfg.lr,
            stage1_backbone_hash: self.stage1_backbone_hash.clone(),
            seed: self.cfg.seed,
        }
    }

    fn run<T: Scalar, I>(
        &self,
        net: &mut AvfsNet<T>,
        mut epoch_items: impl FnMut(usize) -> Result<(Vec<I>, BTreeMap<String, f64>)>,
        step: impl Fn(&AvfsNet<T>, &I) -> Result<(f64, GradMap<T>)>,
        validate: impl Fn(&AvfsNet<T>) -> Result<Validation>,
    ) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        let mut log = JsonLog::create(cfg.out_dir.join("train_log.jsonl"))?;
        let best_path = cfg.out_dir.join("best.ckpt");
        let last_path = cfg.out_dir.join("last.ckpt");
        let start = Instant::now();
        let mut opt = Adam::new(cfg.lr);
        let mut plateau = Plateau::new(cfg.plateau_factor, cfg.plateau_patience);
        let mut early = EarlyStopping::new(cfg.early_stop_patience);

        let (initial_valid_loss, initial_metrics) = validate(net)?;
        log.write(&LogLine {
            epoch: 0,
            split: "valid",
            loss: initial_valid_loss,
            metrics: &initial_metrics,
            lr: opt.lr,
            wallclock: start.elapsed().as_secs_f64(),
        })?;
        early.observe(0, initial_valid_loss);
        Checkpoint::capture(net, Some(&opt), self.meta(0, initial_valid_loss)).save(&best_path)?;

        let mut history = Vec::new();
        let mut stopped_early = false;
        for epoch in 1..=cfg.max_epochs {
            let (items, mut train_metrics) = epoch_items(epoch)?;
            if items.is_empty() {
                return Err(Error::EmptyInput("training split yields no items"));
            }
            let mut loss_sum = 0.0;
            let mut max_norm: f64 = 0.0;
            for batch in items.chunks(cfg.batch_size) {
                let mut acc: GradMap<T> = GradMap::new();
                for item in batch {
                    let (loss, g) = step(net, item)?;
                    loss_sum += loss;
                    accumulate(&mut acc, g);
                }
                scale_grads(&mut acc, 1.0 / batch.len() as f64);
                clip_grad_norm(&mut acc, cfg.clip_norm);
                max_norm = max_norm.max(global_norm(&acc));
                opt.update(&mut net.store, &acc);
            }
            let train_loss = loss_sum / items.len() as f64;
            let (valid_loss, metrics) = validate(net)?;
            let lr_used = opt.lr;
            opt.lr = plateau.observe(valid_loss, opt.lr);
            let verdict = early.observe(epoch, valid_loss);
            let wallclock = start.elapsed().as_secs_f64();
            train_metrics.insert("max_applied_grad_norm".into(), max_norm);
            log.write(&LogLine { epoch, split: "train", loss: train_loss, metrics: &train_metrics, lr: lr_used, wallclock })?;
            log.write(&LogLine { epoch, split: "valid", loss: valid_loss, metrics: &metrics, lr: lr_used, wallclock })?;
            history.push(EpochRecord {
                epoch,
                train_loss,
                valid_loss,
                best_valid_loss: early.best,
                metrics,
                lr: lr_used,
                max_applied_grad_norm: max_norm,
                wallclock,
            });
            let ckpt = Checkpoint::capture(net, Some(&opt), self.meta(epoch, early.best));
            ckpt.save(&last_path)?;
            if verdict.improved {
                ckpt.save(&best_path)?;
            }
            if verdict.stop {
                stopped_early = true;
                break;
            }
        }
        Ok(TrainOutcome {
            best_checkpoint: best_path,
            last_checkpoint: last_path,
            log: log.path.clone(),
            initial_valid_loss,
            initial_metrics,
            history,
            best_valid_loss: early.best,
            stopped_early,
        })
    }
}

struct Data {
    root: PathBuf,
    train: Vec<ManifestEntry>,
    valid: Vec<MixtureSample>,
}

fn load_data(cfg: &TrainConfig) -> Result<Data> {
    if !cfg.manifest.exists() {
        return Err(Error::MissingDependency(format!("manifest {} does not exist", cfg.manifest.display())));
    }
    let manifest = Manifest::load(&cfg.manifest)?;
    let root = cfg.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let take = |split: Split, cap: Option<usize>| {
        let mut v: Vec<ManifestEntry> = manifest.split(split).into_iter().cloned().collect();
        if let Some(n) = cap {
            v.truncate(n);
        }
        v
    };
    let train = take(Split::Train, cfg.max_train_samples);
    let valid = take(Split::Valid, cfg.max_valid_samples)
        .iter()
        .map(|e| load_sample(&root, e))
        .collect::<Result<Vec<_>>>()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyInput("manifest needs non-empty train and valid splits"));
    }
    Ok(Data { root, train, valid })
}

fn epoch_rng(seed: u64, stage: u8, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((stage as u64) << 48) ^ (epoch as u64).wrapping_mul(0x9E37_79B9))
}

fn check_compatible<T: Scalar>(net: &AvfsNet<T>, sample: &MixtureSample) -> Result<()> {
    if sample.mixture.sample_rate != net.config.sample_rate {
        return Err(Error::DataMismatch(format!(
            "dataset at {} Hz, model at {} Hz",
            sample.mixture.sample_rate, net.config.sample_rate
        )));
    }
    Ok(())
}

fn only_trainable<T: Scalar>(net: &mut AvfsNet<T>, prefixes: &[&str]) {
    net.store.set_all_frozen(true);
    for p in prefixes {
        net.store.set_frozen_prefix(p, false);
    }
}

/// Mean negative SI-SNR and SI-SDRi over every active speaker.
fn separation_validation<T: Scalar>(net: &AvfsNet<T>, valid: &[MixtureSample]) -> Result<Validation> {
    let frozen = net.frozen_view();
    let (mut loss, mut sisdri, mut n) = (0.0, 0.0, 0usize);
    for s in valid {
        let cues: Vec<usize> = (0..s.m()).filter(|&i| s.active[i]).collect();
        let vis: Vec<_> = cues.iter().map(|&i| s.visuals[i].clone()).collect();
        let tape = Tape::new();
        let cx = crate::layers::Ctx::new(&tape, &frozen);
        let out = net.forward(&cx, &s.mixture, &vis, false, MaskMode::Learned)?;
        for (k, &i) in cues.iter().enumerate() {
            let est = out.waveforms[k].value().to_f64_vec();
            let v = si_snr(&est, &s.sources[i].samples)?;
            loss -= v;
            sisdri += v - si_snr(&s.mixture.samples, &s.sources[i].samples)?;
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    Ok((loss / n, BTreeMap::from([("si_sdri".to_string(), sisdri / n)])))
}

/// Backbone training with one cued branch per sample. With
/// `transfer_from`, starts from that stage-1 checkpoint.
pub fn train_stage1<T: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::Config(format!("train_stage1 called with stage {}", cfg.stage)));
    }
    let mut net = match &cfg.transfer_from {
        Some(p) => {
            let ck = Checkpoint::<T>::load(p)?;
            if ck.meta.stage != 1 {
                return Err(Error::DataMismatch(format!("{} is a stage-{} checkpoint, need stage 1", p.display(), ck.meta.stage)));
            }
            if ck.meta.model != cfg.model {
                return Err(Error::DataMismatch("transfer checkpoint architecture differs from the configured model".into()));
            }
            ck.build_model()?
        }
        None => AvfsNet::new(cfg.model.clone(), cfg.seed)?,
    };
    let data = load_data(cfg)?;
    check_compatible(&net, &data.valid[0])?;
    only_trainable(&mut net, &groups::BACKBONE);
    let lp = Loop { cfg, stage: 1, stage1_backbone_hash: None };
    let root = data.root.clone();
    let train = data.train.clone();
    lp.run(
        &mut net,
        |epoch| {
            let mut rng = epoch_rng(cfg.seed, 1, epoch);
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut rng);
            let items = idx
                .into_iter()
                .map(|i| {
                    let cues: Vec<usize> = (0..train[i].m).filter(|&c| train[i].active[c]).collect();
                    (i, *cues.choose(&mut rng).expect("every sample has an active speaker"))
                })
                .collect();
            Ok((items, BTreeMap::new()))
        },
        |net, &(i, cue)| {
            let s = load_sample(&root, &train[i])?;
            let tape = Tape::new();
            let cx = net.ctx(&tape);
            let out = net.forward(&cx, &s.mixture, std::slice::from_ref(&s.visuals[cue]), false, MaskMode::Learned)?;
            let loss = si_snr_loss(out.waveforms[0], &s.sources[cue].to_tensor::<T>())?;
            let g = tape.backward(loss)?;
            Ok((loss.item().to_f64_lossy(), g.into_params()))
        },
        |net| separation_validation(net, &data.valid),
    )
}

/// Balanced positive/negative (sample, cue) pairs.
fn balanced_pairs<R: Rng>(active: &[Vec<bool>], rng: &mut R) -> Result<Vec<(usize, usize, bool)>> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, a) in active.iter().enumerate() {
        for (c, &on) in a.iter().enumerate() {
            if on {
                pos.push((i, c, true));
            } else {
                neg.push((i, c, false));
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::DataMismatch("counting needs both active and phantom cues in the split".into()));
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let k = pos.len().min(neg.len());
    let mut pairs: Vec<_> = pos[..k].iter().chain(&neg[..k]).copied().collect();
    pairs.shuffle(rng);
    Ok(pairs)
}

pub fn backbone_hash_of<T: Scalar>(path: &Path) -> Result<String> {
    Ok(Checkpoint::<T>::load(path)?.build_model()?.backbone_hash())
}

/// Counting-head training on frozen stage-1 masks.
pub fn train_stage2<T: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let s1 = cfg.stage1_checkpoint.as_ref().expect("validated");
    let ck = Checkpoint::<T>::load(s1)?;
    if ck.meta.stage != 1 {
        return Err(Error::DataMismatch(format!("{} is a stage-{} checkpoint, need stage 1", s1.display(), ck.meta.stage)));
    }
    let mut net = ck.build_model()?;
    let mut cfg = cfg.clone();
    cfg.model = net.config.clone();
    let cfg = &cfg;
    let data = load_data(cfg)?;
    check_compatible(&net, &data.valid[0])?;
    only_trainable(&mut net, &[groups::COUNTING]);
    let before = net.backbone_hash();

    let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0C0F_FEE5);
    let valid_active: Vec<Vec<bool>> = data.valid.iter().map(|s| s.active.clone()).collect();
    let valid_pairs = balanced_pairs(&valid_active, &mut vrng)?;
    let train_active: Vec<Vec<bool>> = data.train.iter().map(|e| e.active.clone()).collect();
    let root = data.root.clone();
    let train = data.train.clone();
    let lp = Loop { cfg, stage: 2, stage1_backbone_hash: Some(before.clone()) };
    let out = lp.run(
        &mut net,
        |epoch| {
            let pairs = balanced_pairs(&train_active, &mut epoch_rng(cfg.seed, 2, epoch))?;
            let frac = pairs.iter().filter(|p| p.2).count() as f64 / pairs.len() as f64;
            Ok((pairs, BTreeMap::from([("positive_fraction".to_string(), frac)])))
        },
        |net, &(i, cue, label)| {
            let s = load_sample(&root, &train[i])?;
            let tape = Tape::new();
            let cx = net.ctx(&tape);
            let out = net.forward(&cx, &s.mixture, std::slice::from_ref(&s.visuals[cue]), true, MaskMode::Learned)?;
            let loss = bce_var(out.probabilities[0], label)?;
            let g = tape.backward(loss)?;
            Ok((loss.item().to_f64_lossy(), g.into_params()))
        },
        |net| {
            let frozen = net.frozen_view();
            let probs: Vec<Vec<f64>> = data
                .valid
                .iter()
                .map(|s| net.infer_with(&frozen, &s.mixture, &s.visuals, MaskMode::Learned).map(|r| r.1))
                .collect::<Result<_>>()?;
            let (mut loss, mut correct) = (0.0, 0usize);
            for &(i, c, label) in &valid_pairs {
                let p = probs[i][c];
                loss += bce(p, label);
                correct += ((p >= 0.5) == label) as usize;
            }
            let n = valid_pairs.len() as f64;
            Ok((loss / n, BTreeMap::from([("pair_accuracy".to_string(), correct as f64 / n)])))
        },
    )?;
    for path in [&out.best_checkpoint, &out.last_checkpoint] {
        let after = backbone_hash_of::<T>(path)?;
        if after != before {
            return Err(Error::Contract(format!("backbone parameters changed during stage 2 ({})", path.display())));
        }
    }
    Ok(out)
}

/// Per-sample joint-loss terms: separation term `60 - SI-SNR` averaged
/// over active cues, BCE averaged over all cues.
fn stage3_terms(sisnr: &[f64], probs: &[f64], active: &[bool]) -> (f64, f64) {
    let act: Vec<f64> = sisnr.iter().zip(active).filter(|(_, &a)| a).map(|(v, _)| DB_CLAMP - v).collect();
    let sep = act.iter().sum::<f64>() / act.len().max(1) as f64;
    let ce = probs.iter().zip(active).map(|(&p, &a)| bce(p, a)).sum::<f64>() / probs.len().max(1) as f64;
    (sep, ce)
}

/// Joint fine-tuning of every parameter with the uncertainty-weighted loss.
pub fn train_stage3<T: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let s1 = cfg.stage1_checkpoint.as_ref().expect("validated");
    let s2 = cfg.stage2_checkpoint.as_ref().expect("validated");
    let ck2 = Checkpoint::<T>::load(s2)?;
    if ck2.meta.stage != 2 {
        return Err(Error::DataMismatch(format!("{} is a stage-{} checkpoint, need stage 2", s2.display(), ck2.meta.stage)));
    }
    let s1_hash = backbone_hash_of::<T>(s1)?;
    if ck2.meta.stage1_backbone_hash.as_deref() != Some(s1_hash.as_str()) {
        return Err(Error::DataMismatch("stage-2 checkpoint was not trained from this stage-1 checkpoint".into()));
    }
    let mut net = ck2.build_model()?;
    let mut cfg = cfg.clone();
    cfg.model = net.config.clone();
    let cfg = &cfg;
    let data = load_data(cfg)?;
    check_compatible(&net, &data.valid[0])?;
    net.store.set_all_frozen(false);
    let root = data.root.clone();
    let train = data.train.clone();
    let joint = net.joint;
    let lp = Loop { cfg, stage: 3, stage1_backbone_hash: Some(s1_hash) };
    lp.run(
        &mut net,
        |epoch| {
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut epoch_rng(cfg.seed, 3, epoch));
            Ok((idx, BTreeMap::new()))
        },
        |net, &i| {
            let s = load_sample(&root, &train[i])?;
            let tape = Tape::new();
            let cx = net.ctx(&tape);
            let out = net.forward(&cx, &s.mixture, &s.visuals, true, MaskMode::Learned)?;
            let mut sep = Vec::new();
            let mut ce = Vec::new();
            for c in 0..s.m() {
                if s.active[c] {
                    let v = si_snr_var(out.waveforms[c], &s.sources[c].to_tensor::<T>())?;
                    sep.push(v.neg()?.add_scalar(T::from_f64_lossy(DB_CLAMP))?);
                }
                ce.push(bce_var(out.probabilities[c], s.active[c])?);
            }
            let l_sep = crate::autodiff::Var::concat0(&sep)?.mean()?;
            let l_ce = crate::autodiff::Var::concat0(&ce)?.mean()?;
            let loss = joint.forward(&cx, l_sep, l_ce)?;
            let g = tape.backward(loss)?;
            Ok((loss.item().to_f64_lossy(), g.into_params()))
        },
        |net| {
            let frozen = net.frozen_view();
            let (mut loss, mut records) = (0.0, Vec::new());
            for s in &data.valid {
                let (waves, probs) = net.infer_with(&frozen, &s.mixture, &s.visuals, MaskMode::Learned)?;
                let sisnr: Vec<f64> = (0..s.m())
                    .map(|c| if s.active[c] { si_snr(&waves[c].samples, &s.sources[c].samples) } else { Ok(0.0) })
                    .collect::<Result<_>>()?;
                let (a, b) = stage3_terms(&sisnr, &probs, &s.active);
                loss += a + b;
                let est = PresenceEstimate::from_probabilities(probs, 0.5)?;
                records.push(evaluate_with_penalty(&s.id, &est, &waves, &s.mixture, &s.sources, &s.active)?);
            }
            let agg = aggregate(&records);
            let (s1, s2) = joint.sigmas(&net.store);
            let metrics = BTreeMap::from([
                ("si_sdri_penalized".to_string(), agg.mean_si_sdri),
                ("sdri_penalized".to_string(), agg.mean_sdri),
                ("sca".to_string(), agg.sca),
                ("sigma1".to_string(), s1),
                ("sigma2".to_string(), s2),
            ]);
            Ok((loss / data.valid.len() as f64, metrics))
        },
    )
}

/// Dispatches on `cfg.stage`.
pub fn train<T: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome> {
    match cfg.stage {
        1 => train_stage1::<T>(cfg),
        2 => train_stage2::<T>(cfg),
        3 => train_stage3::<T>(cfg),
        s => Err(Error::Config(format!("stage must be 1, 2 or 3, got {s}"))),
    }
}

