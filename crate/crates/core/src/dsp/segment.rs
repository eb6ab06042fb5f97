//! Duration equalization and 5 s / 50 % overlap framing.

use crate::ingest::AudioClip;

use super::{DspError, FRAME_HOP, FRAME_LEN, TARGET_RATE};

/// Extends `samples` to `target` by repeating it from its start.
pub fn tile_to_length(samples: &[f64], target: usize) -> Vec<f64> {
    samples.iter().copied().cycle().take(target).collect()
}

/// Tiles the shorter clips of one patient until all three match the longest.
pub fn equalize_durations(
    cough: &AudioClip,
    breath: &AudioClip,
    speech: &AudioClip,
) -> Result<(AudioClip, AudioClip, AudioClip), DspError> {
    let clips = [cough, breath, speech];
    if clips.iter().any(|c| c.is_empty()) {
        return Err(DspError::EmptyClip);
    }
    if clips.iter().any(|c| c.sample_rate != TARGET_RATE) {
        return Err(DspError::WrongSampleRate(clips.iter().map(|c| c.sample_rate).max().unwrap_or(0)));
    }
    let target = clips.iter().map(|c| c.len()).max().unwrap_or(0);
    let extend = |c: &AudioClip| AudioClip {
        samples: tile_to_length(&c.samples, target),
        sample_rate: c.sample_rate,
        source: c.source.clone(),
    };
    Ok((extend(cough), extend(breath), extend(speech)))
}

/// Length after wrap-around extension: the smallest L >= max(FRAME_LEN, n)
/// with (L - FRAME_LEN) a multiple of FRAME_HOP.
pub fn framed_length(n: usize) -> usize {
    if n <= FRAME_LEN {
        return FRAME_LEN;
    }
    FRAME_LEN + (n - FRAME_LEN).div_ceil(FRAME_HOP) * FRAME_HOP
}

pub fn frame_count(n: usize) -> usize {
    (framed_length(n) - FRAME_LEN) / FRAME_HOP + 1
}

/// Splits a 16 kHz clip into 80 000-sample windows with a 40 000-sample hop.
pub fn frame_signal(clip: &AudioClip) -> Result<Vec<Vec<f64>>, DspError> {
    if clip.is_empty() {
        return Err(DspError::EmptyClip);
    }
    if clip.sample_rate != TARGET_RATE {
        return Err(DspError::WrongSampleRate(clip.sample_rate));
    }
    let extended = tile_to_length(&clip.samples, framed_length(clip.len()));
    Ok((0..frame_count(clip.len())).map(|k| extended[k * FRAME_HOP..k * FRAME_HOP + FRAME_LEN].to_vec()).collect())
}
