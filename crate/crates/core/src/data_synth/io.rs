//! WAV (PCM16 mono) and visual-stream binary I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::audio_codec::Waveform;
use crate::error::{Error, Result};
use crate::visual::VisualStream;

const PCM_SCALE: f64 = 32768.0;
pub const VISUAL_MAGIC: &[u8; 4] = b"AVFS";

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(m) => Error::Format { field: "wav header", detail: format!("{}: {m}", path.display()) },
        hound::Error::Unsupported => Error::Unsupported(format!("{}: unsupported wav encoding", path.display())),
        other => Error::Format { field: "wav data", detail: format!("{}: {other}", path.display()) },
    }
}

/// Quantize to 16-bit PCM; out-of-range samples saturate.
pub fn to_pcm16(v: f64) -> i16 {
    (v * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &wave.samples {
        w.write_sample(to_pcm16(s)).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let r = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::Unsupported(format!("{}: {} channels, expected mono", path.display(), spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Unsupported(format!(
            "{}: {}-bit {:?}, expected 16-bit PCM",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = r
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Header `"AVFS", u32 F_v, u32 frame_rate, u32 frames`, then `F_v * frames`
/// little-endian f32 values, feature-major.
pub fn write_visual(path: &Path, v: &VisualStream) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut buf = Vec::with_capacity(16 + 4 * v.data.len());
    buf.extend_from_slice(VISUAL_MAGIC);
    buf.extend_from_slice(&(v.feature_dim as u32).to_le_bytes());
    buf.extend_from_slice(&v.frame_rate.to_le_bytes());
    buf.extend_from_slice(&(v.frames() as u32).to_le_bytes());
    for x in &v.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_visual(path: &Path) -> Result<VisualStream> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode_visual(&bytes).map_err(|e| match e {
        Error::Format { field, detail } => Error::Format { field, detail: format!("{}: {detail}", path.display()) },
        other => other,
    })
}

pub fn decode_visual(bytes: &[u8]) -> Result<VisualStream> {
    if bytes.len() < 16 {
        return Err(Error::Format { field: "visual header", detail: format!("{} bytes", bytes.len()) });
    }
    if &bytes[0..4] != VISUAL_MAGIC {
        return Err(Error::Format { field: "visual magic", detail: format!("{:?}", &bytes[0..4]) });
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let (fv, rate, frames) = (word(4) as usize, word(8), word(12) as usize);
    if fv == 0 {
        return Err(Error::Format { field: "visual feature_dim", detail: "0".into() });
    }
    let want = fv.checked_mul(frames).and_then(|n| n.checked_mul(4)).unwrap_or(usize::MAX);
    if bytes.len() - 16 != want {
        return Err(Error::Format {
            field: "visual payload",
            detail: format!("{} bytes for {fv} x {frames} values", bytes.len() - 16),
        });
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    VisualStream::new(fv, rate, data)
}
