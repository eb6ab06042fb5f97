//! Multimodal respiratory-sound screening.
//!
//! Cough, breath and speech recordings are turned into standardized
//! log-frequency spectrogram images, embedded by small per-sound-type CNNs,
//! optionally re-weighted by contextual attention, fused by an outer product
//! of the augmented embeddings and classified, with a five-fold
//! cross-validation harness that early-stops on validation AUC.

pub mod cache;
pub mod dsp;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod nncore;
pub mod selfcheck;
pub mod train;
