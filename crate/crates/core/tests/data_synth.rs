use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use avfsnet::audio_codec::Waveform;
use avfsnet::data_synth::io::{decode_visual, to_pcm16, VISUAL_MAGIC};
use avfsnet::data_synth::synth::{band_of, Voice, F0_BANDS, MIX_PEAK, VISUAL_DIM, VISUAL_RATE};
use avfsnet::data_synth::{
    build_dataset, gen_speaker, gen_utterance, load_sample, mix, read_visual, read_wav, synth_sample, write_visual,
    write_wav, DatasetConfig, Manifest, MixKind, Split,
};
use avfsnet::data_synth::dataset::speaker_pool;
use avfsnet::visual::VisualStream;
use avfsnet::Error;
use proptest::prelude::*;

fn snr_db(a: &Waveform, b: &Waveform) -> f64 {
    10.0 * (a.energy() / b.energy()).log10()
}

#[test]
fn speakers_are_deterministic() {
    let (w1, v1) = gen_speaker(42, 1.0, 8000).unwrap();
    let (w2, v2) = gen_speaker(42, 1.0, 8000).unwrap();
    assert_eq!(w1, w2);
    assert_eq!(v1, v2);
    let (w3, _) = gen_speaker(43, 1.0, 8000).unwrap();
    assert_ne!(w1, w3);
    assert_eq!(w1.len(), 8000);
    assert_eq!(v1.frames(), 25);
    assert!((w1.peak() - 0.5).abs() < 1e-12);
}

#[test]
fn pitch_follows_the_band_of_the_seed() {
    for seed in 0..30u64 {
        let (lo, hi) = F0_BANDS[band_of(seed)];
        let f0 = Voice::from_seed(seed).f0;
        assert!(f0 >= lo && f0 <= hi, "seed {seed}: {f0} outside {lo}..{hi}");
    }
}

#[test]
fn silent_frames_are_silent_in_both_modalities() {
    for seed in 0..8u64 {
        let (w, v) = gen_utterance(seed, 100 + seed, 2.0, 8000).unwrap();
        let frames = v.frames();
        let per_frame = 8000 / VISUAL_RATE as usize;
        let silent: Vec<usize> = (0..frames).filter(|&f| v.at(0, f) == 0.0).collect();
        let frac = silent.len() as f64 / frames as f64;
        assert!((0.09..=0.31).contains(&frac), "seed {seed}: silent fraction {frac}");
        for &f in &silent {
            let span = &w.samples[f * per_frame..((f + 1) * per_frame).min(w.len())];
            assert!(span.iter().all(|&s| s == 0.0), "seed {seed} frame {f} not silent");
        }
        // voiced frames carry a strictly positive envelope
        assert!((0..frames).filter(|f| !silent.contains(f)).all(|f| v.at(0, f) > 0.0));
    }
}

#[test]
fn visual_identity_rows_are_constant() {
    let (_, v) = gen_speaker(7, 1.0, 8000).unwrap();
    assert_eq!(v.feature_dim, VISUAL_DIM);
    let id = Voice::from_seed(7).identity;
    for (d, &c) in id.iter().enumerate() {
        assert!((0..v.frames()).all(|f| v.at(1 + d, f) == c));
    }
    let norm: f32 = id.iter().map(|c| c * c).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
}

#[test]
fn utterance_rejects_bad_settings() {
    assert!(matches!(gen_utterance(1, 1, 0.2, 8000), Err(Error::Config(_))));
    assert!(matches!(gen_utterance(1, 1, 1.0, 1000), Err(Error::Config(_))));
}

#[test]
fn mixing_hits_the_requested_snr() {
    let (a, _) = gen_speaker(1, 1.0, 8000).unwrap();
    let (b, _) = gen_speaker(2, 1.0, 8000).unwrap();
    let (c, _) = gen_speaker(3, 1.0, 8000).unwrap();
    for db in [0.0, 10.0, -7.5] {
        let m = mix(&[a.clone(), b.clone()], &[db], None).unwrap();
        assert!((snr_db(&m.sources[0], &m.sources[1]) - db).abs() < 0.01);
        assert!((m.mixture.peak() - MIX_PEAK).abs() < 1e-12);
    }
    let m = mix(&[a.clone(), b, c], &[3.0, -2.0], Some((20.0, 9))).unwrap();
    assert!((snr_db(&m.sources[0], &m.sources[1]) - 3.0).abs() < 0.01);
    assert!((snr_db(&m.sources[0], &m.sources[2]) + 2.0).abs() < 0.01);
    let noise = m.noise.as_ref().unwrap();
    assert!((snr_db(&m.sources[0], noise) - 20.0).abs() < 0.5);
    for t in 0..m.mixture.len() {
        let sum: f64 = m.sources.iter().map(|s| s.samples[t]).sum::<f64>() + noise.samples[t];
        assert!((sum - m.mixture.samples[t]).abs() < 1e-12);
    }
}

#[test]
fn single_source_mix_is_the_source() {
    let (a, _) = gen_speaker(5, 1.0, 8000).unwrap();
    let m = mix(&[a.clone()], &[], None).unwrap();
    assert_eq!(m.mixture, m.sources[0]);
    assert!((m.gain - MIX_PEAK / a.peak()).abs() < 1e-12);
}

#[test]
fn mixing_rejects_bad_inputs() {
    let (a, _) = gen_speaker(1, 1.0, 8000).unwrap();
    let silent = Waveform::zeros(a.len(), 8000);
    assert!(matches!(mix(&[a.clone(), silent], &[0.0], None), Err(Error::DegenerateSource(1))));
    assert!(matches!(mix(&[a.clone()], &[0.0], None), Err(Error::Config(_))));
    assert!(matches!(mix(&[], &[], None), Err(Error::EmptyInput(_))));
    let short = Waveform::new(a.samples[..100].to_vec(), 8000);
    assert!(matches!(mix(&[a, short], &[0.0], None), Err(Error::DataMismatch(_))));
}

#[test]
fn wav_round_trip_within_one_quantum() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let (w, _) = gen_speaker(11, 0.5, 8000).unwrap();
    write_wav(&path, &w).unwrap();
    let back = read_wav(&path).unwrap();
    assert_eq!(back.sample_rate, 8000);
    assert_eq!(back.len(), w.len());
    let err = w.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1.0 / 32768.0);
    assert_eq!(to_pcm16(2.0), i16::MAX);
    assert_eq!(to_pcm16(-2.0), i16::MIN);
}

fn write_raw_wav(path: &Path, channels: u16, bits: u16) {
    let spec = hound::WavSpec { channels, sample_rate: 8000, bits_per_sample: bits, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for _ in 0..16 * channels {
        w.write_sample(0i32).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn wav_reader_rejects_unsupported_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let stereo = dir.path().join("stereo.wav");
    write_raw_wav(&stereo, 2, 16);
    assert!(matches!(read_wav(&stereo), Err(Error::Unsupported(_))));
    let wide = dir.path().join("wide.wav");
    write_raw_wav(&wide, 1, 24);
    assert!(matches!(read_wav(&wide), Err(Error::Unsupported(_))));
    let junk = dir.path().join("junk.wav");
    fs::write(&junk, b"not a wav file at all").unwrap();
    assert!(matches!(read_wav(&junk), Err(Error::Format { .. })));
    assert!(matches!(read_wav(&dir.path().join("missing.wav")), Err(Error::Io { .. })));
}

#[test]
fn visual_file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.avfs");
    let (_, v) = gen_speaker(12, 1.0, 8000).unwrap();
    write_visual(&path, &v).unwrap();
    assert_eq!(read_visual(&path).unwrap(), v);
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], VISUAL_MAGIC);
    assert_eq!(bytes.len(), 16 + 4 * VISUAL_DIM * v.frames());
}

#[test]
fn visual_decoder_rejects_malformed_bytes() {
    let v = VisualStream::new(2, 25, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.avfs");
    write_visual(&path, &v).unwrap();
    let good = fs::read(&path).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(decode_visual(&bad_magic), Err(Error::Format { field: "visual magic", .. })));
    assert!(matches!(decode_visual(&good[..10]), Err(Error::Format { field: "visual header", .. })));
    assert!(matches!(decode_visual(&good[..good.len() - 1]), Err(Error::Format { field: "visual payload", .. })));
    let mut zero_dim = good.clone();
    zero_dim[4..8].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(decode_visual(&zero_dim), Err(Error::Format { field: "visual feature_dim", .. })));
}

proptest! {
    #[test]
    fn visual_decoding_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_visual(&bytes);
    }
}

#[test]
fn speaker_pools_are_disjoint_and_cover_every_band() {
    let cfg = DatasetConfig::desk(MixKind::TwoAndThree);
    let pools: Vec<BTreeSet<u64>> = Split::ALL.iter().map(|&s| speaker_pool(&cfg, s).into_iter().collect()).collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(pools[i].is_disjoint(&pools[j]));
        }
        for b in 0..F0_BANDS.len() {
            assert!(pools[i].iter().any(|&s| band_of(s) == b));
        }
    }
    assert_eq!(pools[0].len(), cfg.speakers_train);
}

#[test]
fn presets_and_validation() {
    let tiny = DatasetConfig::preset("tiny-2and3mix").unwrap();
    assert_eq!(tiny.kind, MixKind::TwoAndThree);
    assert_eq!(tiny.name, "tiny-2and3mix");
    tiny.validate().unwrap();
    DatasetConfig::preset("desk-3mix").unwrap().validate().unwrap();
    assert!(DatasetConfig::preset("huge-2mix").is_none());
    assert!(DatasetConfig::preset("desk-4mix").is_none());

    let mut bad = tiny.clone();
    bad.visuals_per_sample = 2;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = tiny.clone();
    bad.speakers_eval = 3;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = tiny.clone();
    bad.snr_range_db = (5.0, -5.0);
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = tiny;
    bad.duration_s = 0.25;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn samples_have_distinct_pitch_bands_and_phantom_cues() {
    let cfg = DatasetConfig::preset("small-2and3mix").unwrap();
    let mut counts = BTreeSet::new();
    for i in 0..20 {
        let (s, e) = synth_sample(&cfg, Split::Train, i).unwrap();
        counts.insert(s.active_count());
        assert_eq!(s.m(), 3);
        assert_eq!(e.n, s.active_count());
        assert_eq!(s.snr_db.len(), s.active_count() - 1);
        let bands: BTreeSet<usize> =
            e.speaker_seeds.iter().zip(&e.active).filter(|(_, &a)| a).map(|(&sp, _)| band_of(sp)).collect();
        assert_eq!(bands.len(), s.active_count());
        for (k, src) in s.sources.iter().enumerate() {
            assert_eq!(src.energy() == 0.0, !s.active[k]);
        }
        let again = synth_sample(&cfg, Split::Train, i).unwrap().0;
        assert_eq!(again.mixture, s.mixture);
    }
    assert_eq!(counts, BTreeSet::from([2, 3]));
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_build_is_byte_identical_and_reloads() {
    let cfg = DatasetConfig::preset("tiny-2and3mix").unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (manifest_path, manifest) = build_dataset(&cfg, a.path()).unwrap();
    build_dataset(&cfg, b.path()).unwrap();
    let (root_a, root_b) = (a.path(), b.path());
    let (ta, tb) = (tree_bytes(root_a), tree_bytes(root_b));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);

    assert_eq!(manifest.entries.len(), cfg.train + cfg.valid + cfg.test);
    assert_eq!(manifest.split(Split::Valid).len(), cfg.valid);
    let loaded = Manifest::load(&manifest_path).unwrap();
    assert_eq!(loaded, manifest);

    for entry in manifest.split(Split::Test) {
        let idx: usize = manifest.split(Split::Test).iter().position(|e| e.id == entry.id).unwrap();
        let (mem, _) = synth_sample(&cfg, Split::Test, idx).unwrap();
        let disk = load_sample(root_a, entry).unwrap();
        assert_eq!(disk.active, mem.active);
        assert_eq!(disk.visuals, mem.visuals);
        let err = mem.mixture.samples.iter().zip(&disk.mixture.samples).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 1.0 / 32768.0);
        for (k, src) in disk.sources.iter().enumerate() {
            assert_eq!(src.len(), disk.mixture.len());
            assert_eq!(entry.sources[k].is_some(), entry.active[k]);
        }
    }
}
