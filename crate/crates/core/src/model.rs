//! The assembled network: audio front-end, Branchformer encoder, visual
//! frontend, separator, decoder and counting head over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio_codec::{AudioDecoder, AudioEncoder, EncodedAudio, Waveform};
use crate::autodiff::{Tape, Var};
use crate::branchformer::BranchformerEncoder;
use crate::config::ModelConfig;
use crate::counting::CountingHead;
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::losses::JointLossState;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::separator::Separator;
use crate::tensor::Tensor;
use crate::visual::{VisualFrontend, VisualStream};

/// Parameter-path prefixes of the trainable groups.
pub mod groups {
    pub const FRONTEND: &str = "frontend.";
    pub const ENCODER: &str = "encoder.";
    pub const VISUAL: &str = "visual.";
    pub const SEPARATOR: &str = "separator.";
    pub const DECODER: &str = "decoder.";
    pub const COUNTING: &str = "counting.";
    pub const LOSS: &str = "loss.";
    pub const BACKBONE: [&str; 5] = [FRONTEND, ENCODER, VISUAL, SEPARATOR, DECODER];
}

/// How masks are produced; `Identity` bypasses the separator with all-ones masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    #[default]
    Learned,
    Identity,
}

pub struct AvfsNet<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub frontend: AudioEncoder,
    pub encoder: BranchformerEncoder,
    pub visual: VisualFrontend,
    pub separator: Separator,
    pub decoder: AudioDecoder,
    pub counting: CountingHead,
    pub joint: JointLossState,
}

/// Per-branch outputs of one forward pass.
pub struct BranchOutputs<'t, T: Scalar> {
    pub encoded: EncodedAudio<'t, T>,
    pub masks: Vec<Var<'t, T>>,
    pub waveforms: Vec<Var<'t, T>>,
    /// Presence probabilities, shape `[1]` each, when requested.
    pub probabilities: Vec<Var<'t, T>>,
}

impl<T: Scalar> AvfsNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let frontend = AudioEncoder::new(&mut store, "frontend", config.dim, config.kernel, &mut rng);
        let encoder = BranchformerEncoder::new(&mut store, "encoder", &config, &mut rng)?;
        let visual = VisualFrontend::new(&mut store, "visual", &config, &mut rng);
        let separator = Separator::new(&mut store, "separator", &config, &mut rng)?;
        let decoder = AudioDecoder::new(&mut store, "decoder", config.dim, config.kernel, &mut rng);
        let counting = CountingHead::new(&mut store, "counting", &config, &mut rng)?;
        let joint = JointLossState::new(&mut store, "loss");
        Ok(Self { config, store, frontend, encoder, visual, separator, decoder, counting, joint })
    }

    pub fn ctx<'t, 's>(&'s self, tape: &'t Tape<T>) -> Ctx<'t, 's, T> {
        Ctx::new(tape, &self.store)
    }

    /// Front-end conv + ReLU followed by the Branchformer blocks.
    pub fn encode<'t>(&self, cx: &Ctx<'t, '_, T>, mixture: &Waveform) -> Result<EncodedAudio<'t, T>> {
        if mixture.sample_rate != self.config.sample_rate {
            return Err(Error::DataMismatch(format!(
                "mixture at {} Hz, model expects {} Hz",
                mixture.sample_rate, self.config.sample_rate
            )));
        }
        let x = cx.constant(mixture.to_tensor());
        let mut enc = self.frontend.forward(cx, x)?;
        enc.features = self.encoder.forward(cx, enc.features)?;
        Ok(enc)
    }

    pub fn visual_features<'t>(&self, cx: &Ctx<'t, '_, T>, stream: &VisualStream) -> Result<Var<'t, T>> {
        if stream.feature_dim != self.config.visual.feature_dim {
            return Err(Error::DataMismatch(format!(
                "visual stream has {} features per frame, model expects {}",
                stream.feature_dim, self.config.visual.feature_dim
            )));
        }
        self.visual.forward(cx, cx.constant(stream.to_tensor()))
    }

    /// Masks, waveforms and optionally presence probabilities for every cue.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t, '_, T>,
        mixture: &Waveform,
        visuals: &[VisualStream],
        with_counting: bool,
        mode: MaskMode,
    ) -> Result<BranchOutputs<'t, T>> {
        if visuals.is_empty() {
            return Err(Error::NoBranches);
        }
        let encoded = self.encode(cx, mixture)?;
        let masks = match mode {
            MaskMode::Learned => {
                let hv = visuals.iter().map(|v| self.visual_features(cx, v)).collect::<Result<Vec<_>>>()?;
                self.separator.separate_all(cx, encoded.features, &hv)?
            }
            MaskMode::Identity => {
                let ones = cx.constant(Tensor::ones(&encoded.features.shape()));
                vec![ones; visuals.len()]
            }
        };
        let waveforms = masks.iter().map(|&m| self.decoder.forward(cx, m, &encoded)).collect::<Result<Vec<_>>>()?;
        let probabilities = if with_counting {
            masks.iter().map(|&m| self.counting.forward(cx, m)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(BranchOutputs { encoded, masks, waveforms, probabilities })
    }

    /// Inference without gradient bookkeeping: waveforms and probabilities.
    pub fn infer(&self, mixture: &Waveform, visuals: &[VisualStream], mode: MaskMode) -> Result<(Vec<Waveform>, Vec<f64>)> {
        self.infer_with(&self.frozen_view(), mixture, visuals, mode)
    }

    /// As [`AvfsNet::infer`], reading parameters from `frozen`, normally the
    /// result of [`AvfsNet::frozen_view`] reused across calls.
    pub fn infer_with(
        &self,
        frozen: &ParamStore<T>,
        mixture: &Waveform,
        visuals: &[VisualStream],
        mode: MaskMode,
    ) -> Result<(Vec<Waveform>, Vec<f64>)> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, frozen);
        let out = self.forward(&cx, mixture, visuals, true, mode)?;
        let sr = self.config.sample_rate;
        let waves = out.waveforms.iter().map(|w| Waveform::from_tensor(&w.value(), sr)).collect();
        let probs = out.probabilities.iter().map(|p| p.item().to_f64_lossy()).collect();
        Ok((waves, probs))
    }

    /// Copy of the store with every parameter frozen, so forward passes
    /// record no backward closures.
    pub fn frozen_view(&self) -> ParamStore<T> {
        let mut s = self.store.clone();
        s.set_all_frozen(true);
        s
    }

    pub fn backbone_hash(&self) -> String {
        let mut all = String::new();
        for g in groups::BACKBONE {
            all.push_str(&self.store.hash_prefix(g));
        }
        all
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        for g in groups::BACKBONE {
            self.store.set_frozen_prefix(g, frozen);
        }
    }
}

pub type AvfsNet32 = AvfsNet<f32>;
pub type AvfsNet64 = AvfsNet<f64>;
