//! Synthetic audio-visual corpus: procedural speakers with correlated lip
//! streams, SNR-controlled mixtures, file formats and manifests.

pub mod dataset;
pub mod io;
pub mod synth;

pub use dataset::{build_dataset, load_sample, synth_sample, DatasetConfig, Manifest, ManifestEntry, MixKind, MixtureSample, Split};
pub use io::{read_visual, read_wav, write_visual, write_wav};
pub use synth::{gen_speaker, gen_utterance, mix, Mix};
