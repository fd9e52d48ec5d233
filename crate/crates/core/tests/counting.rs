mod common;

use avfsnet::audio_codec::Waveform;
use avfsnet::config::ModelConfig;
use avfsnet::counting::{count_and_select, CountingHead, PresenceEstimate};
use avfsnet::layers::Ctx;
use avfsnet::model::{AvfsNet, AvfsNet32, AvfsNet64, MaskMode};
use avfsnet::visual::VisualStream;
use avfsnet::{Error, ParamStore, Tape, Tensor};
use common::*;
use proptest::prelude::*;

fn head(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, CountingHead) {
    let mut store = ParamStore::new();
    let h = CountingHead::new(&mut store, "counting", cfg, &mut rng(seed)).unwrap();
    (store, h)
}

#[test]
fn mask_to_frames_shapes_and_short_input() {
    let cfg = ModelConfig::desk();
    let (store, h) = head(&cfg, 1);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let f = h.mask_to_frames(&cx, tape.constant(randn(&[64, 1999], 2).map(f64::abs))).unwrap();
    assert_eq!(f.shape(), vec![64, 499]);
    let short = h.mask_to_frames(&cx, tape.constant(Tensor::ones(&[64, 3])));
    assert!(matches!(short, Err(Error::InputTooShort { len: 3, min: 4, .. })));
}

#[test]
fn mask_to_frames_matches_oracle() {
    let cfg = ModelConfig::tiny();
    let (store, h) = head(&cfg, 3);
    let m = randn(&[cfg.dim, 13], 4);
    let conv = map(
        &conv_same(&to_mat(&m), &param(&store, "counting.conv.weight"), &param(&store, "counting.conv.bias"), 1),
        gelu,
    );
    let expect: Mat = conv.iter().map(|r| r.chunks_exact(4).map(|w| w.iter().copied().fold(f64::MIN, f64::max)).collect()).collect();
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let got = h.mask_to_frames(&cx, tape.constant(m)).unwrap().value();
    assert!(max_diff(&to_mat(&got), &expect) < 1e-12);
}

#[test]
fn constant_masks_give_constant_frames() {
    let cfg = ModelConfig::tiny();
    let (mut store, h) = head(&cfg, 5);
    // frames at the edges see zero padding, so only the interior is constant
    set_param(&mut store, "counting.conv.bias", randn(&[cfg.counting.dim], 6));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let f = to_mat(&h.mask_to_frames(&cx, tape.constant(Tensor::full(&[cfg.dim, 40], 0.7))).unwrap().value());
    for row in &f {
        assert!(row[1..row.len() - 1].iter().all(|&v| (v - row[1]).abs() < 1e-12));
    }
}

#[test]
fn attend_pool_single_frame_and_constant_sequence() {
    let cfg = ModelConfig::tiny();
    let (store, h) = head(&cfg, 7);
    let dc = cfg.counting.dim;
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let x = randn(&[dc, 1], 8);
    let one = h.attend_pool(&cx, tape.constant(x.clone())).unwrap().value();
    let expect = mha(&store, "counting.attn", &transpose(&to_mat(&x)), &transpose(&to_mat(&x)), cfg.counting.heads);
    assert!(max_diff(&vec![one.data().to_vec()], &expect) < 1e-12);

    let col = randn(&[dc], 9);
    let tiled = Tensor::from_fn(&[dc, 6], |i| col.data()[i / 6]);
    let pooled = h.attend_pool(&cx, tape.constant(tiled)).unwrap().value();
    let single = h.attend_pool(&cx, tape.constant(col.reshape(&[dc, 1]).unwrap())).unwrap().value();
    assert!(pooled.max_abs_diff(&single) < 1e-12);
}

#[test]
fn presence_probability_reference_points() {
    let cfg = ModelConfig::tiny();
    let (mut store, h) = head(&cfg, 10);
    let dc = cfg.counting.dim;
    let hidden = cfg.counting.mlp_hidden;
    for name in ["counting.mlp1.weight", "counting.mlp2.weight"] {
        let shape = param(&store, name).shape().to_vec();
        set_param(&mut store, name, Tensor::zeros(&shape));
    }
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let p = h.presence_probability(&cx, tape.constant(Tensor::zeros(&[dc]))).unwrap();
    assert_eq!(p.shape(), vec![1]);
    assert_eq!(p.item(), 0.5);

    set_param(&mut store, "counting.mlp2.bias", Tensor::full(&[1], 10.0));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let p = h.presence_probability(&cx, tape.constant(randn(&[dc], 11))).unwrap().item();
    assert!(p > 0.9999);
    assert_eq!(hidden, param(&store, "counting.mlp1.bias").numel());
}

#[test]
fn selection_reference_cases() {
    let e = PresenceEstimate::from_probabilities(vec![0.9, 0.3], 0.5).unwrap();
    assert_eq!((e.selected_indices.clone(), e.estimated_count), (vec![0], 1));
    assert!(e.is_selected(0) && !e.is_selected(1));

    let e = PresenceEstimate::from_probabilities(vec![0.5], 0.5).unwrap();
    assert_eq!(e.estimated_count, 1);

    let waves = vec![Waveform::zeros(4, 8000), Waveform::new(vec![1.0; 4], 8000)];
    let (e, sel) = count_and_select(&[0.2, 0.1], &waves, 0.5).unwrap();
    assert_eq!(e.estimated_count, 0);
    assert!(sel.is_empty());
    let (_, sel) = count_and_select(&[0.2, 0.8], &waves, 0.5).unwrap();
    assert_eq!(sel, vec![waves[1].clone()]);

    assert!(matches!(count_and_select(&[0.2], &waves, 0.5), Err(Error::Pairing { masks: 1, waveforms: 2 })));
    for bad in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(PresenceEstimate::from_probabilities(vec![0.5], bad), Err(Error::Config(_))));
    }
}

proptest! {
    #[test]
    fn selection_is_monotone_in_threshold(
        probs in proptest::collection::vec(0.0f64..=1.0, 1..8),
        t1 in 0.001f64..=1.0,
        t2 in 0.001f64..=1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = PresenceEstimate::from_probabilities(probs.clone(), lo).unwrap();
        let b = PresenceEstimate::from_probabilities(probs, hi).unwrap();
        prop_assert!(b.estimated_count <= a.estimated_count);
        prop_assert!(b.selected_indices.iter().all(|i| a.selected_indices.contains(i)));
    }
}

// ---- assembled model -------------------------------------------------------

fn streams(n: usize, frames: usize, seed: u64) -> Vec<VisualStream> {
    (0..n)
        .map(|i| {
            let data = randn(&[8, frames], seed + i as u64).data().iter().map(|&v| v as f32).collect();
            VisualStream::new(8, 25, data).unwrap()
        })
        .collect()
}

fn mixture(len: usize, seed: u64) -> Waveform {
    Waveform::new(randn(&[len], seed).data().iter().map(|v| 0.3 * v).collect(), 8000)
}

#[test]
fn model_forward_shapes_and_ranges() {
    let net = AvfsNet64::new(ModelConfig::tiny(), 20).unwrap();
    let (waves, probs) = net.infer(&mixture(4000, 21), &streams(3, 13, 22), MaskMode::Learned).unwrap();
    assert_eq!(waves.len(), 3);
    assert!(waves.iter().all(|w| w.len() == 4000 && w.sample_rate == 8000));
    assert_eq!(probs.len(), 3);
    assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn model_rejects_mismatched_inputs() {
    let net = AvfsNet64::new(ModelConfig::tiny(), 23).unwrap();
    let mut wrong_rate = mixture(4000, 24);
    wrong_rate.sample_rate = 16000;
    let cues = streams(2, 13, 25);
    assert!(matches!(net.infer(&wrong_rate, &cues, MaskMode::Learned), Err(Error::DataMismatch(_))));
    let narrow = vec![VisualStream::new(4, 25, vec![0.0; 4 * 13]).unwrap()];
    assert!(matches!(net.infer(&mixture(4000, 26), &narrow, MaskMode::Learned), Err(Error::DataMismatch(_))));
    assert!(matches!(net.infer(&mixture(4000, 27), &[], MaskMode::Learned), Err(Error::NoBranches)));
}

#[test]
fn model_cue_permutation_is_bit_exact() {
    let net = AvfsNet64::new(ModelConfig::tiny(), 28).unwrap();
    let x = mixture(4000, 29);
    let cues = streams(3, 13, 30);
    let (w, p) = net.infer(&x, &cues, MaskMode::Learned).unwrap();
    let rev: Vec<_> = cues.iter().rev().cloned().collect();
    let (wr, pr) = net.infer(&x, &rev, MaskMode::Learned).unwrap();
    for i in 0..3 {
        assert_eq!(w[i], wr[2 - i]);
        assert_eq!(p[i].to_bits(), pr[2 - i].to_bits());
    }
}

#[test]
fn identity_masks_reconstruct_through_the_decoder() {
    let net = AvfsNet64::new(ModelConfig::tiny(), 31).unwrap();
    let x = mixture(800, 32);
    let tape = Tape::new();
    let cx = net.ctx(&tape);
    let out = net.forward(&cx, &x, &streams(2, 3, 33), false, MaskMode::Identity).unwrap();
    assert!(out.probabilities.is_empty());
    let direct = net.decoder.forward(&cx, cx.constant(Tensor::ones(&out.encoded.features.shape())), &out.encoded).unwrap();
    assert_eq!(out.waveforms[0].value(), direct.value());
    assert_eq!(out.waveforms[1].value(), direct.value());
}

#[test]
fn backbone_hash_tracks_only_backbone_parameters() {
    let mut net = AvfsNet64::new(ModelConfig::tiny(), 34).unwrap();
    let before = net.backbone_hash();
    let id = net.store.find("counting.mlp2.bias").unwrap();
    net.store.set(id, Tensor::full(&[1], 3.0)).unwrap();
    assert_eq!(net.backbone_hash(), before);
    let id = net.store.find("separator.mask.bias").unwrap();
    let v = net.store.get(id).map(|x| x + 1.0);
    net.store.set(id, v).unwrap();
    assert_ne!(net.backbone_hash(), before);

    net.set_backbone_frozen(true);
    assert!(net.store.is_frozen(id));
    assert!(!net.store.is_frozen(net.store.find("counting.mlp2.bias").unwrap()));
}

#[test]
fn single_and_double_precision_models_agree() {
    let cfg = ModelConfig::tiny();
    let n64 = AvfsNet64::new(cfg.clone(), 35).unwrap();
    let n32: AvfsNet32 = AvfsNet::new(cfg, 35).unwrap();
    let x = mixture(2000, 36);
    let cues = streams(2, 7, 37);
    let (w64, p64) = n64.infer(&x, &cues, MaskMode::Learned).unwrap();
    let (w32, p32) = n32.infer(&x, &cues, MaskMode::Learned).unwrap();
    for (a, b) in w64.iter().zip(&w32) {
        let scale = a.peak().max(1e-3);
        let diff = a.samples.iter().zip(&b.samples).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(diff / scale < 1e-3, "{diff} vs peak {scale}");
    }
    for (a, b) in p64.iter().zip(&p32) {
        assert!((a - b).abs() < 1e-4);
    }
}
