//! The screening network: per-sound-type CNN extractors, optional
//! contextual attention, outer-product fusion and a small classifier.

mod attention;
mod checkpoint;
mod classifier;
mod extractor;
mod fusion;
mod network;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::SoundType;
use crate::nncore::NnError;

pub use attention::Attention;
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use classifier::{Classifier, DROPOUT_P, HIDDEN_UNITS};
pub use extractor::Extractor;
pub use fusion::{fused_len, outer_fuse, outer_fuse_backward, FusedRepresentation};
pub use network::{stack_frames, Network};

/// Length of every per-sound-type embedding.
pub const FEATURE_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input frame is not standardized")]
    UnstandardizedInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("fusion needs 2 or 3 inputs of equal length, got {0}")]
    WrongArity(usize),
    #[error("model uses sex but none was given")]
    SexMissing,
    #[error("sex given to a model that does not use it")]
    SexUnexpected,
    #[error("misaligned frames: {0}")]
    MisalignedFrames(String),
    #[error("checkpoint does not match: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modalities: Vec<SoundType>,
    pub use_attention: bool,
    pub use_sex: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Sorts modalities into the canonical cough, breath, speech order.
    pub fn new(modalities: &[SoundType], use_attention: bool, use_sex: bool, seed: u64) -> Result<Self, ModelError> {
        let mut m = modalities.to_vec();
        m.sort();
        m.dedup();
        if m.is_empty() || m.len() != modalities.len() {
            return Err(ModelError::InvalidConfig(format!("modalities {modalities:?}")));
        }
        Ok(Self { modalities: m, use_attention, use_sex, seed })
    }

    pub fn arity(&self) -> usize {
        self.modalities.len()
    }

    /// Fused representation length fed to the classifier.
    pub fn classifier_input_len(&self) -> usize {
        fused_len(FEATURE_DIM, self.arity())
    }

    /// Row label such as `B⊗S`.
    pub fn modality_label(&self) -> String {
        self.modalities.iter().map(|m| m.letter().to_string()).collect::<Vec<_>>().join("⊗")
    }

    pub fn variant_label(&self) -> &'static str {
        match (self.use_sex, self.use_attention) {
            (false, false) => "Baseline",
            (true, false) => "Sex",
            (false, true) => "C.Att.",
            (true, true) => "Sex & C.Att.",
        }
    }

    pub fn is_valid(&self) -> bool {
        let mut sorted = self.modalities.clone();
        sorted.sort();
        sorted.dedup();
        !self.modalities.is_empty() && sorted == self.modalities
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use SoundType::*;

    #[test]
    fn canonical_order() {
        let c = ModelConfig::new(&[Speech, Cough, Breath], false, false, 0).unwrap();
        assert_eq!(c.modalities, vec![Cough, Breath, Speech]);
        assert_eq!(c.modality_label(), "C⊗B⊗S");
    }

    #[test]
    fn rejects_empty_and_duplicates() {
        assert!(ModelConfig::new(&[], false, false, 0).is_err());
        assert!(ModelConfig::new(&[Breath, Breath], false, false, 0).is_err());
    }

    #[test]
    fn input_length_table() {
        let lens: Vec<usize> = [vec![Cough], vec![Breath, Speech], vec![Cough, Breath, Speech]]
            .iter()
            .map(|m| ModelConfig::new(m, false, false, 0).unwrap().classifier_input_len())
            .collect();
        assert_eq!(lens, vec![16, 289, 4913]);
    }
}
