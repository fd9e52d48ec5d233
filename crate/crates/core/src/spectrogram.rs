//! Log-magnitude STFT and mel spectrograms, rendered as a PNG grid or CSV.

use std::path::Path;

use image::{Rgb, RgbImage};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio_codec::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConfig {
    pub n_fft: usize,
    pub hop: usize,
    /// Triangular mel bands; `None` keeps the linear STFT bins.
    pub mel_bands: Option<usize>,
    /// Power floor in dB applied before the log.
    pub floor_db: f64,
}

impl Default for SpecConfig {
    fn default() -> Self {
        Self { n_fft: 512, hop: 128, mel_bands: Some(40), floor_db: -100.0 }
    }
}

impl SpecConfig {
    pub fn linear() -> Self {
        Self { mel_bands: None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!("bad STFT geometry n_fft={} hop={}", self.n_fft, self.hop)));
        }
        if self.mel_bands == Some(0) {
            return Err(Error::Config("mel_bands must be positive".into()));
        }
        if !self.floor_db.is_finite() {
            return Err(Error::Config("floor_db must be finite".into()));
        }
        Ok(())
    }
}

/// A time-frequency image in dB, stored frame-major: `data[frame * bins + bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.data[frame * self.bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.bins..(frame + 1) * self.bins]
    }

    /// Bin with the largest summed power across frames.
    pub fn peak_bin(&self) -> usize {
        (0..self.bins)
            .map(|b| (b, (0..self.frames).map(|f| 10f64.powf(self.at(f, b) / 10.0)).sum::<f64>()))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for f in 0..self.frames {
            let row: Vec<String> = self.frame(f).iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos()).collect()
}

/// Power spectrum per frame, `n_fft / 2 + 1` bins. Inputs shorter than one
/// window are zero-padded to a single frame.
pub fn stft_power(samples: &[f64], n_fft: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("spectrogram input"));
    }
    let frames = if samples.len() <= n_fft { 1 } else { 1 + (samples.len() - n_fft).div_ceil(hop) };
    let window = hann(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let start = f * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            let x = samples.get(start + i).copied().unwrap_or(0.0);
            *c = Complex::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok(out)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with HTK mel spacing from 0 Hz to Nyquist, one row
/// per band over the `n_fft / 2 + 1` linear bins.
pub fn mel_filterbank(bands: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..bands + 2).map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64)).collect();
    let bin_hz = |b: usize| b as f64 * sample_rate as f64 / n_fft as f64;
    (0..bands)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|b| {
                    let f = bin_hz(b);
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn log_spectrogram(wave: &Waveform, cfg: &SpecConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let power = stft_power(&wave.samples, cfg.n_fft, cfg.hop)?;
    let rows: Vec<Vec<f64>> = match cfg.mel_bands {
        None => power,
        Some(bands) => {
            let fb = mel_filterbank(bands, cfg.n_fft, wave.sample_rate);
            power.iter().map(|p| fb.iter().map(|w| w.iter().zip(p).map(|(a, b)| a * b).sum()).collect()).collect()
        }
    };
    let floor = 10f64.powf(cfg.floor_db / 10.0);
    let bins = rows[0].len();
    let data = rows.iter().flatten().map(|&p| 10.0 * p.max(floor).log10()).collect();
    Ok(Spectrogram { frames: rows.len(), bins, data })
}

/// Dark blue through yellow.
fn colormap(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let stops = [(0.0, [20.0, 12.0, 60.0]), (0.5, [190.0, 55.0, 90.0]), (1.0, [250.0, 240.0, 110.0])];
    let (a, b) = if t <= 0.5 { (stops[0], stops[1]) } else { (stops[1], stops[2]) };
    let u = (t - a.0) / (b.0 - a.0);
    let c = |i: usize| (a.1[i] + u * (b.1[i] - a.1[i])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

const PANEL_GAP: u32 = 4;

/// Stacks one panel per spectrogram vertically, low frequencies at the
/// bottom of each panel. Colours span `[floor_db, max]` over all panels.
pub fn render_grid(panels: &[Spectrogram], floor_db: f64) -> Result<RgbImage> {
    if panels.is_empty() {
        return Err(Error::EmptyInput("spectrogram panels"));
    }
    let width = panels.iter().map(|p| p.frames).max().unwrap_or(1) as u32;
    let height = panels.iter().map(|p| p.bins as u32).sum::<u32>() + PANEL_GAP * (panels.len() as u32 - 1);
    let top = panels.iter().flat_map(|p| p.data.iter().copied()).fold(floor_db, f64::max);
    let span = (top - floor_db).max(1e-9);
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut y0 = 0u32;
    for p in panels {
        for f in 0..p.frames {
            for b in 0..p.bins {
                let y = y0 + (p.bins - 1 - b) as u32;
                img.put_pixel(f as u32, y, colormap((p.at(f, b) - floor_db) / span));
            }
        }
        y0 += p.bins as u32 + PANEL_GAP;
    }
    Ok(img)
}

pub fn write_png(path: &Path, panels: &[Spectrogram], floor_db: f64) -> Result<()> {
    render_grid(panels, floor_db)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Unsupported(format!("{}: {other}", path.display())),
        })
}
