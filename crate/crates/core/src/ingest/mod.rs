//! Dataset manifests, WAV loading and synthetic dataset generation.

mod manifest;
mod synth;
mod wav;

use std::path::PathBuf;

use thiserror::Error;

pub use manifest::{parse_manifest, write_manifest, Label, Partition, PatientRecord, Sex, SoundType, MANIFEST_HEADER, NUM_FOLDS};
pub use synth::{discriminative_band, generate_synthetic_dataset, generate_with, stream_seed, SynthConfig};
pub use wav::{load_wav, write_wav_pcm16, AudioClip, ClipSource};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("manifest is missing column {0:?}")]
    MissingColumn(String),
    #[error("manifest line {line}: fold {value:?} is not in 0..=4")]
    BadFoldIndex { line: usize, value: String },
    #[error("duplicate patient id {0:?}")]
    DuplicatePatient(String),
    #[error("manifest line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("{0}: unsupported WAV encoding")]
    UnsupportedEncoding(PathBuf),
    #[error("{path}: corrupt WAV header ({reason})")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("{0}: no audio samples")]
    EmptyAudio(PathBuf),
    #[error("{0}: non-finite sample value")]
    NonFiniteSample(PathBuf),
    #[error("invalid synthetic dataset configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
