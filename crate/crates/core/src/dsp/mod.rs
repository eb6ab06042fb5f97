//! Audio to standardized 3×224×224 spectrogram images.
//!
//! Clips are resampled to 16 kHz, tiled to the patient's longest recording,
//! cut into 5 s frames with 50 % overlap, transformed with a 4096-sample
//! Hann STFT (hop 128), mapped onto a 224-row log-frequency axis, min-max
//! normalized and rendered through the magma colour map.

mod colormap;
mod logspec;
mod magma_table;
mod resample;
mod segment;
mod standardize;
mod stft;

use thiserror::Error;

use crate::ingest::{AudioClip, SoundType};

pub use colormap::{magma_rgb, render_magma};
pub use logspec::{log_center_hz, log_frequency_spectrogram, SpectrogramGrid, DB_RANGE, MAX_FREQ_HZ, MIN_FREQ_HZ};
pub use resample::{resample_to_16k, PolyphaseResampler, KAISER_BETA, TAPS_PER_PHASE};
pub use segment::{equalize_durations, frame_count, frame_signal, framed_length, tile_to_length};
pub use standardize::{
    compute_standardization, pairwise_sum, standardize, standardize_in_place, StandardizationStats, SIGMA_FLOOR,
};
pub use stft::{hann_window, stft_magnitude, MagnitudeMatrix};

pub const TARGET_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 80_000;
pub const FRAME_HOP: usize = 40_000;
pub const STFT_WINDOW: usize = 4096;
pub const STFT_HOP: usize = 128;
pub const STFT_BINS: usize = STFT_WINDOW / 2 + 1;
pub const STFT_COLUMNS: usize = (FRAME_LEN - STFT_WINDOW) / STFT_HOP + 1;
pub const IMAGE_SIZE: usize = 224;
pub const FRAME_CHANNELS: usize = 3;
pub const FRAME_PIXELS: usize = FRAME_CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("input sample rate {0} Hz is below 16 kHz; refusing to upsample")]
    UpsamplingRequired(u32),
    #[error("expected a 16 kHz clip, got {0} Hz")]
    WrongSampleRate(u32),
    #[error("empty clip")]
    EmptyClip,
    #[error("expected {expected} samples, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("expected shape {expected:?}, got {got:?}")]
    WrongShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("magnitudes must be finite and non-negative")]
    NegativeMagnitude,
    #[error("grid value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("no frames to compute statistics from")]
    EmptySet,
    #[error("frames of different sound types")]
    MixedSoundTypes,
    #[error("frame is {frame} but statistics are for {stats}")]
    SoundTypeMismatch { frame: SoundType, stats: SoundType },
    #[error("frame is already standardized")]
    AlreadyStandardized,
}

/// One channel-major 3×224×224 spectrogram image.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramFrame {
    pub pixels: Vec<f32>,
    pub patient_id: String,
    pub sound_type: SoundType,
    pub frame_index: usize,
    pub standardized: bool,
}

impl SpectrogramFrame {
    pub fn shape(&self) -> [usize; 3] {
        [FRAME_CHANNELS, IMAGE_SIZE, IMAGE_SIZE]
    }

    pub(crate) fn check_shape(&self) -> Result<(), DspError> {
        if self.pixels.len() != FRAME_PIXELS {
            return Err(DspError::WrongShape { expected: self.shape().to_vec(), got: vec![self.pixels.len()] });
        }
        Ok(())
    }
}

/// Frames, transforms and renders one 16 kHz clip.
pub fn clip_to_frames(clip: &AudioClip, patient_id: &str, sound: SoundType) -> Result<Vec<SpectrogramFrame>, DspError> {
    frame_signal(clip)?
        .iter()
        .enumerate()
        .map(|(k, window)| {
            let grid = log_frequency_spectrogram(&stft_magnitude(window)?)?;
            render_magma(&grid, patient_id, sound, k)
        })
        .collect()
}

/// Full per-patient pipeline from raw clips to unstandardized frames,
/// returned in cough, breath, speech order.
pub fn patient_frames(
    patient_id: &str,
    cough: &AudioClip,
    breath: &AudioClip,
    speech: &AudioClip,
) -> Result<[Vec<SpectrogramFrame>; 3], DspError> {
    let (c, b, s) = equalize_durations(&resample_to_16k(cough)?, &resample_to_16k(breath)?, &resample_to_16k(speech)?)?;
    Ok([
        clip_to_frames(&c, patient_id, SoundType::Cough)?,
        clip_to_frames(&b, patient_id, SoundType::Breath)?,
        clip_to_frames(&s, patient_id, SoundType::Speech)?,
    ])
}
