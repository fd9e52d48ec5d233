//! Procedural speakers and SNR-controlled mixing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio_codec::Waveform;
use crate::error::{Error, Result};
use crate::visual::{frames_for, VisualStream};

/// Fundamental-frequency bands in Hz; speaker `seed` uses band `seed % 3`.
pub const F0_BANDS: [(f64, f64); 3] = [(100.0, 150.0), (160.0, 220.0), (240.0, 320.0)];
pub const HARMONICS: usize = 4;
pub const VISUAL_RATE: u32 = 25;
/// Envelope, 4-dim identity code, 3 noise dims.
pub const VISUAL_DIM: usize = 8;
/// Envelope control points per visual frame.
const CTRL_PER_FRAME: usize = 4;
const SOURCE_PEAK: f64 = 0.5;
pub const MIX_PEAK: f64 = 0.9;

pub fn band_of(speaker_seed: u64) -> usize {
    (speaker_seed % F0_BANDS.len() as u64) as usize
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Speaker-fixed voice parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub f0: f64,
    pub harmonic_gains: [f64; HARMONICS],
    pub identity: [f32; 4],
}

impl Voice {
    pub fn from_seed(speaker_seed: u64) -> Self {
        let mut rng = rng_for(speaker_seed, 1);
        let (lo, hi) = F0_BANDS[band_of(speaker_seed)];
        let f0 = rng.gen_range(lo..hi);
        let mut harmonic_gains = [0.0; HARMONICS];
        for (h, g) in harmonic_gains.iter_mut().enumerate() {
            *g = rng.gen_range(0.6..1.0) / (h + 1) as f64;
        }
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let mut identity = [0f32; 4];
        let mut norm = 0.0;
        for v in identity.iter_mut() {
            let x: f64 = n.sample(&mut rng);
            *v = x as f32;
            norm += x * x;
        }
        let norm = norm.sqrt().max(1e-6) as f32;
        identity.iter_mut().for_each(|v| *v /= norm);
        Self { f0, harmonic_gains, identity }
    }
}

/// Smooth envelope sampled at `CTRL_PER_FRAME * VISUAL_RATE` Hz, with whole
/// visual frames silenced. Returns control points and the silent-frame flags.
fn envelope(rng: &mut ChaCha8Rng, frames: usize) -> (Vec<f64>, Vec<bool>) {
    let n = frames * CTRL_PER_FRAME + 1;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut z: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    for _ in 0..2 {
        let mut acc = z[0];
        for v in z.iter_mut() {
            acc = 0.75 * acc + 0.25 * *v;
            *v = acc;
        }
    }
    let mean = z.iter().sum::<f64>() / n as f64;
    let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-9);
    let mut ctrl: Vec<f64> = z.iter().map(|v| 1.0 / (1.0 + (-(2.0 * (v - mean) / sd + 0.5)).exp())).collect();

    let target = (rng.gen_range(0.10..0.30) * frames as f64).round() as usize;
    let mut silent = vec![false; frames];
    let mut count = 0;
    while count < target {
        let len = rng.gen_range(3..=8).min(target - count).max(1);
        let start = rng.gen_range(0..frames.saturating_sub(len).max(1));
        for f in start..(start + len).min(frames) {
            if !silent[f] {
                silent[f] = true;
                count += 1;
            }
        }
    }
    for (f, _) in silent.iter().enumerate().filter(|(_, &s)| s) {
        for c in &mut ctrl[f * CTRL_PER_FRAME..=(f + 1) * CTRL_PER_FRAME] {
            *c = 0.0;
        }
    }
    (ctrl, silent)
}

/// One utterance of speaker `speaker_seed`; `utterance_seed` varies the
/// envelope and phases.
pub fn gen_utterance(speaker_seed: u64, utterance_seed: u64, duration_s: f64, sample_rate: u32) -> Result<(Waveform, VisualStream)> {
    if !(duration_s >= 0.5) {
        return Err(Error::Config(format!("utterance duration must be at least 0.5 s, got {duration_s}")));
    }
    if sample_rate < 2 * 4 * 320 {
        return Err(Error::Config(format!("sample rate {sample_rate} Hz cannot carry the harmonic stack")));
    }
    let voice = Voice::from_seed(speaker_seed);
    let mut rng = rng_for(speaker_seed ^ utterance_seed.rotate_left(32), 2 + utterance_seed);
    let frames = frames_for(duration_s, VISUAL_RATE);
    let (ctrl, _) = envelope(&mut rng, frames);
    let ctrl_rate = (CTRL_PER_FRAME as u32 * VISUAL_RATE) as f64;

    let len = (duration_s * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let vib_rate = rng.gen_range(3.0..6.0);
    let vib_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let phases: Vec<f64> = (0..HARMONICS).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let mut phase = 0.0;
    let mut samples = Vec::with_capacity(len);
    for t in 0..len {
        let time = t as f64 / sr;
        let pos = time * ctrl_rate;
        let k = (pos.floor() as usize).min(ctrl.len() - 2);
        let frac = pos - k as f64;
        let env = ctrl[k] * (1.0 - frac) + ctrl[k + 1] * frac;
        let f = voice.f0 * (1.0 + 0.02 * (std::f64::consts::TAU * vib_rate * time + vib_phase).sin());
        let mut v = 0.0;
        for (h, (&g, &p)) in voice.harmonic_gains.iter().zip(&phases).enumerate() {
            v += g * ((h + 1) as f64 * phase + p).sin();
        }
        samples.push(env * v);
        phase += std::f64::consts::TAU * f / sr;
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v *= SOURCE_PEAK / peak);
    }

    let noise = Normal::new(0.0, 0.1).expect("noise normal");
    let mut data = vec![0f32; VISUAL_DIM * frames];
    for f in 0..frames {
        data[f] = ctrl[f * CTRL_PER_FRAME + CTRL_PER_FRAME / 2] as f32;
        for (d, &c) in voice.identity.iter().enumerate() {
            data[(1 + d) * frames + f] = c;
        }
        for d in 5..VISUAL_DIM {
            data[d * frames + f] = noise.sample(&mut rng) as f32;
        }
    }
    Ok((Waveform::new(samples, sample_rate), VisualStream::new(VISUAL_DIM, VISUAL_RATE, data)?))
}

pub fn gen_speaker(seed: u64, duration_s: f64, sample_rate: u32) -> Result<(Waveform, VisualStream)> {
    gen_utterance(seed, seed, duration_s, sample_rate)
}

/// A mixture together with its gain-adjusted components.
#[derive(Debug, Clone)]
pub struct Mix {
    pub mixture: Waveform,
    /// Sources after SNR scaling and the final peak gain.
    pub sources: Vec<Waveform>,
    pub noise: Option<Waveform>,
    pub gain: f64,
}

/// Source 0 is the 0 dB reference; `snr_dbs[i]` sets source `i + 1` so that
/// `10 log10(E_0 / E_{i+1}) = snr_dbs[i]`. Optional white noise at
/// `noise.0` dB below the reference, seeded by `noise.1`. The sum is
/// peak-normalized and the same gain is applied to every component.
pub fn mix(sources: &[Waveform], snr_dbs: &[f64], noise: Option<(f64, u64)>) -> Result<Mix> {
    let first = sources.first().ok_or(Error::EmptyInput("mix sources"))?;
    if snr_dbs.len() + 1 != sources.len() {
        return Err(Error::Config(format!("{} sources need {} SNR values, got {}", sources.len(), sources.len() - 1, snr_dbs.len())));
    }
    let len = first.len();
    for s in sources {
        if s.len() != len || s.sample_rate != first.sample_rate {
            return Err(Error::DataMismatch("mix sources differ in length or sample rate".into()));
        }
    }
    for (i, s) in sources.iter().enumerate() {
        if s.energy() == 0.0 {
            return Err(Error::DegenerateSource(i));
        }
    }
    let e0 = first.energy();
    let mut scaled = vec![first.clone()];
    for (s, &db) in sources[1..].iter().zip(snr_dbs) {
        let g = (e0 / (s.energy() * 10f64.powf(db / 10.0))).sqrt();
        scaled.push(s.scaled(g));
    }
    let noise = noise.map(|(db, seed)| {
        let sd = (e0 / len as f64 / 10f64.powf(db / 10.0)).sqrt();
        let n = Normal::new(0.0, sd).expect("noise sd is finite");
        let mut rng = rng_for(seed, 7);
        Waveform::new((0..len).map(|_| n.sample(&mut rng)).collect(), first.sample_rate)
    });
    let mut x = vec![0.0; len];
    for s in scaled.iter().chain(noise.iter()) {
        for (a, b) in x.iter_mut().zip(&s.samples) {
            *a += b;
        }
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { MIX_PEAK / peak } else { 1.0 };
    Ok(Mix {
        mixture: Waveform::new(x.iter().map(|v| v * gain).collect(), first.sample_rate),
        sources: scaled.iter().map(|s| s.scaled(gain)).collect(),
        noise: noise.map(|n| n.scaled(gain)),
        gain,
    })
}
