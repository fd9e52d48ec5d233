//! Split construction, on-disk layout and the JSON manifest.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{read_visual, read_wav, write_visual, write_wav};
use super::synth::{band_of, gen_utterance, mix, F0_BANDS};
use crate::audio_codec::Waveform;
use crate::error::{Error, Result};
use crate::visual::VisualStream;

/// How many speakers are active per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixKind {
    #[serde(rename = "2mix")]
    Two,
    #[serde(rename = "3mix")]
    Three,
    /// Half the samples have two active speakers, half three.
    #[serde(rename = "2and3mix")]
    TwoAndThree,
}

impl MixKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MixKind::Two => "2mix",
            MixKind::Three => "3mix",
            MixKind::TwoAndThree => "2and3mix",
        }
    }

    fn active_count<R: Rng>(self, rng: &mut R) -> usize {
        match self {
            MixKind::Two => 2,
            MixKind::Three => 3,
            MixKind::TwoAndThree => {
                if rng.gen_bool(0.5) {
                    2
                } else {
                    3
                }
            }
        }
    }

    fn max_active(self) -> usize {
        match self {
            MixKind::Two => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub kind: MixKind,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Visual cues per sample; cues beyond the active count are phantoms.
    pub visuals_per_sample: usize,
    pub snr_range_db: (f64, f64),
    pub noise_snr_db: Option<f64>,
    /// Distinct speakers per split pool.
    pub speakers_train: usize,
    pub speakers_eval: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn desk(kind: MixKind) -> Self {
        let name = match kind {
            MixKind::Two => "desk-2mix",
            MixKind::Three => "desk-3mix",
            MixKind::TwoAndThree => "desk-2and3mix",
        };
        Self {
            name: name.into(),
            kind,
            sample_rate: 8000,
            duration_s: 2.0,
            train: 2000,
            valid: 200,
            test: 200,
            visuals_per_sample: 3,
            snr_range_db: (-10.0, 10.0),
            noise_snr_db: None,
            speakers_train: 300,
            speakers_eval: 60,
            seed: 1,
        }
    }

    /// Named presets accepted on the command line.
    pub fn preset(name: &str) -> Option<Self> {
        let (scale, kind) = name.split_once('-')?;
        let kind = match kind {
            "2mix" => MixKind::Two,
            "3mix" => MixKind::Three,
            "2and3mix" | "23mix" => MixKind::TwoAndThree,
            _ => return None,
        };
        let mut c = Self::desk(kind);
        match scale {
            "desk" => {}
            "small" => {
                c.train = 200;
                c.valid = 40;
                c.test = 40;
                c.speakers_train = 60;
                c.speakers_eval = 24;
            }
            "tiny" => {
                c.duration_s = 0.5;
                c.train = 8;
                c.valid = 4;
                c.test = 4;
                c.speakers_train = 12;
                c.speakers_eval = 6;
            }
            _ => return None,
        }
        c.name = name.to_string();
        Some(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.visuals_per_sample < self.kind.max_active() {
            return Err(Error::Config(format!(
                "visuals_per_sample {} is below the active count {}",
                self.visuals_per_sample,
                self.kind.max_active()
            )));
        }
        let pool_ok = |n: usize| (0..F0_BANDS.len()).all(|b| (0..n).filter(|i| i % F0_BANDS.len() == b).count() >= 2);
        if !pool_ok(self.speakers_train) || !pool_ok(self.speakers_eval) {
            return Err(Error::Config("each speaker pool needs at least two speakers per pitch band".into()));
        }
        if self.visuals_per_sample > self.speakers_eval.min(self.speakers_train) {
            return Err(Error::Config("speaker pools smaller than the cues per sample".into()));
        }
        if !(self.snr_range_db.0 <= self.snr_range_db.1) {
            return Err(Error::Config(format!("bad SNR range {:?}", self.snr_range_db)));
        }
        if !(self.duration_s >= 0.5) {
            return Err(Error::Config(format!("duration {} s is below 0.5 s", self.duration_s)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// Speaker seeds of a split. Pools of different splits never intersect.
pub fn speaker_pool(cfg: &DatasetConfig, split: Split) -> Vec<u64> {
    let n = if split == Split::Train { cfg.speakers_train } else { cfg.speakers_eval };
    let base = cfg.seed.wrapping_mul(10_000_019).wrapping_add((split.index() + 1) << 40);
    // base is a multiple-of-three offset so `band_of` cycles with the index
    let base = base - base % F0_BANDS.len() as u64;
    (0..n as u64).map(|i| base + i).collect()
}

/// One row of the manifest; paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub mixture: String,
    /// Clean source per cue; `None` for phantom cues.
    pub sources: Vec<Option<String>>,
    pub visuals: Vec<String>,
    pub active: Vec<bool>,
    pub n: usize,
    pub m: usize,
    pub speaker_seeds: Vec<u64>,
    /// SNR of each active interferer relative to the first active speaker.
    pub snr_db: Vec<f64>,
    pub noise_snr_db: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A fully materialized sample.
#[derive(Debug, Clone)]
pub struct MixtureSample {
    pub id: String,
    pub mixture: Waveform,
    /// Per cue; zeros for phantom cues.
    pub sources: Vec<Waveform>,
    pub visuals: Vec<VisualStream>,
    pub active: Vec<bool>,
    pub snr_db: Vec<f64>,
    pub noise_snr_db: Option<f64>,
    pub seed: u64,
}

impl MixtureSample {
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn m(&self) -> usize {
        self.active.len()
    }
}

fn sample_seed(cfg: &DatasetConfig, split: Split, index: usize) -> u64 {
    cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (split.index() << 56) ^ index as u64
}

/// Builds one sample in memory, plus its manifest row (paths unset).
pub fn synth_sample(cfg: &DatasetConfig, split: Split, index: usize) -> Result<(MixtureSample, ManifestEntry)> {
    let seed = sample_seed(cfg, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = speaker_pool(cfg, split);
    let n = cfg.kind.active_count(&mut rng);
    let m = cfg.visuals_per_sample;

    // active speakers come from distinct pitch bands
    let mut bands: Vec<usize> = (0..F0_BANDS.len()).collect();
    bands.shuffle(&mut rng);
    let mut chosen: Vec<u64> = Vec::with_capacity(m);
    for &b in bands.iter().take(n) {
        let candidates: Vec<u64> = pool.iter().copied().filter(|&s| band_of(s) == b).collect();
        chosen.push(*candidates.choose(&mut rng).expect("validated pool covers every band"));
    }
    let taken: BTreeSet<u64> = chosen.iter().copied().collect();
    let rest: Vec<u64> = pool.iter().copied().filter(|s| !taken.contains(s)).collect();
    chosen.extend(rest.choose_multiple(&mut rng, m - n));

    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let speakers: Vec<u64> = order.iter().map(|&k| chosen[k]).collect();
    let active: Vec<bool> = order.iter().map(|&k| k < n).collect();

    let (lo, hi) = cfg.snr_range_db;
    let mut waves = Vec::with_capacity(m);
    let mut visuals = Vec::with_capacity(m);
    for (slot, &spk) in speakers.iter().enumerate() {
        let (w, v) = gen_utterance(spk, seed.wrapping_add(slot as u64 + 1), cfg.duration_s, cfg.sample_rate)?;
        waves.push(w);
        visuals.push(v);
    }
    let active_slots: Vec<usize> = (0..m).filter(|&i| active[i]).collect();
    let snr_db: Vec<f64> = (1..n).map(|_| if lo == hi { lo } else { rng.gen_range(lo..hi) }).collect();
    let to_mix: Vec<Waveform> = active_slots.iter().map(|&i| waves[i].clone()).collect();
    let noise = cfg.noise_snr_db.map(|db| (db, seed ^ 0x5EED));
    let mixed = mix(&to_mix, &snr_db, noise)?;
    let mut sources: Vec<Waveform> = (0..m).map(|_| Waveform::zeros(mixed.mixture.len(), cfg.sample_rate)).collect();
    for (k, &i) in active_slots.iter().enumerate() {
        sources[i] = mixed.sources[k].clone();
    }
    let id = format!("{}-{:05}", split.as_str(), index);
    let entry = ManifestEntry {
        id: id.clone(),
        split,
        mixture: String::new(),
        sources: vec![None; m],
        visuals: Vec::new(),
        active: active.clone(),
        n,
        m,
        speaker_seeds: speakers,
        snr_db: snr_db.clone(),
        noise_snr_db: cfg.noise_snr_db,
        seed,
    };
    let sample = MixtureSample {
        id,
        mixture: mixed.mixture,
        sources,
        visuals,
        active,
        snr_db,
        noise_snr_db: cfg.noise_snr_db,
        seed,
    };
    Ok((sample, entry))
}

/// Writes every split under `out_dir` and `out_dir/manifest.json`.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<(PathBuf, Manifest)> {
    cfg.validate()?;
    let mut entries = Vec::new();
    for split in Split::ALL {
        let count = match split {
            Split::Train => cfg.train,
            Split::Valid => cfg.valid,
            Split::Test => cfg.test,
        };
        for index in 0..count {
            let (sample, mut entry) = synth_sample(cfg, split, index)?;
            let rel = PathBuf::from(split.as_str()).join(&entry.id);
            let dir = out_dir.join(&rel);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let rel_str = |name: &str| rel.join(name).to_string_lossy().replace('\\', "/");
            write_wav(&dir.join("mix.wav"), &sample.mixture)?;
            entry.mixture = rel_str("mix.wav");
            for i in 0..sample.m() {
                if sample.active[i] {
                    let name = format!("s{i}.wav");
                    write_wav(&dir.join(&name), &sample.sources[i])?;
                    entry.sources[i] = Some(rel_str(&name));
                }
                let name = format!("v{i}.avfs");
                write_visual(&dir.join(&name), &sample.visuals[i])?;
                entry.visuals.push(rel_str(&name));
            }
            entries.push(entry);
        }
    }
    let manifest = Manifest { name: cfg.name.clone(), config: cfg.clone(), entries };
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok((path, manifest))
}

/// Reads the files of one manifest row.
pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<MixtureSample> {
    let mixture = read_wav(&root.join(&entry.mixture))?;
    let mut sources = Vec::with_capacity(entry.m);
    for s in &entry.sources {
        sources.push(match s {
            Some(p) => {
                let w = read_wav(&root.join(p))?;
                if w.len() != mixture.len() {
                    return Err(Error::DataMismatch(format!("{p}: length {} vs mixture {}", w.len(), mixture.len())));
                }
                w
            }
            None => Waveform::zeros(mixture.len(), mixture.sample_rate),
        });
    }
    let visuals = entry.visuals.iter().map(|p| read_visual(&root.join(p))).collect::<Result<Vec<_>>>()?;
    if visuals.len() != entry.m || sources.len() != entry.m || entry.active.len() != entry.m {
        return Err(Error::DataMismatch(format!("{}: inconsistent cue counts", entry.id)));
    }
    Ok(MixtureSample {
        id: entry.id.clone(),
        mixture,
        sources,
        visuals,
        active: entry.active.clone(),
        snr_db: entry.snr_db.clone(),
        noise_snr_db: entry.noise_snr_db,
        seed: entry.seed,
    })
}
