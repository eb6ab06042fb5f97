//! Log-frequency, dB-scaled, min-max normalized 224×224 spectrogram grid.

use super::stft::MagnitudeMatrix;
use super::{DspError, IMAGE_SIZE, STFT_BINS, STFT_COLUMNS, STFT_WINDOW, TARGET_RATE};

pub const MIN_FREQ_HZ: f64 = 31.25;
pub const MAX_FREQ_HZ: f64 = 8000.0;
pub const DB_RANGE: f64 = 80.0;

/// Scalar image in [0, 1], row-major, row 0 = highest frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramGrid {
    pub data: Vec<f64>,
}

impl SpectrogramGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * IMAGE_SIZE + col]
    }
}

/// Centre frequency of log-axis index `j` (0 = lowest).
pub fn log_center_hz(j: usize) -> f64 {
    MIN_FREQ_HZ * (MAX_FREQ_HZ / MIN_FREQ_HZ).powf(j as f64 / (IMAGE_SIZE - 1) as f64)
}

fn hz_to_bin(f: f64) -> f64 {
    f * STFT_WINDOW as f64 / TARGET_RATE as f64
}

/// For each log-axis index, the STFT bins it averages, or the fractional
/// bin to interpolate when its band holds no whole bin.
#[derive(Debug, Clone)]
enum RowSource {
    Band { first: usize, last: usize },
    Interp { lo: usize, frac: f64 },
}

fn row_sources() -> Vec<RowSource> {
    let half_step = (MAX_FREQ_HZ / MIN_FREQ_HZ).powf(0.5 / (IMAGE_SIZE - 1) as f64);
    (0..IMAGE_SIZE)
        .map(|j| {
            let center = log_center_hz(j);
            let lo = hz_to_bin(center / half_step);
            let hi = hz_to_bin(center * half_step).min((STFT_BINS - 1) as f64 + 1e-9);
            let first = lo.ceil() as usize;
            let last = hi.floor() as usize;
            if first <= last && hi - lo >= 1.0 {
                RowSource::Band { first, last: last.min(STFT_BINS - 1) }
            } else {
                let pos = hz_to_bin(center).min((STFT_BINS - 1) as f64);
                let lo = (pos.floor() as usize).min(STFT_BINS - 2);
                RowSource::Interp { lo, frac: pos - lo as f64 }
            }
        })
        .collect()
}

/// Builds the normalized grid from an STFT magnitude matrix.
///
/// Each log-frequency row takes the mean power of the bins inside its band
/// (linear interpolation between bins where the band is narrower than one
/// bin), is converted to dB and clamped to 80 dB below the maximum. The time
/// axis is then linearly resampled to 224 columns and the image min-max
/// normalized (a constant image maps to zeros).
pub fn log_frequency_spectrogram(mag: &MagnitudeMatrix) -> Result<SpectrogramGrid, DspError> {
    if mag.bins != STFT_BINS || mag.columns != STFT_COLUMNS || mag.data.len() != STFT_BINS * STFT_COLUMNS {
        return Err(DspError::WrongShape { expected: vec![STFT_BINS, STFT_COLUMNS], got: vec![mag.bins, mag.columns] });
    }
    if mag.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(DspError::NegativeMagnitude);
    }
    let cols = STFT_COLUMNS;
    let power = |bin: usize, col: usize| {
        let m = mag.data[bin * cols + col];
        m * m
    };

    // rows indexed by log-axis j (lowest first) x STFT column
    let mut db = vec![0.0; IMAGE_SIZE * cols];
    for (j, src) in row_sources().iter().enumerate() {
        for col in 0..cols {
            let p = match *src {
                RowSource::Band { first, last } => (first..=last).map(|b| power(b, col)).sum::<f64>() / (last - first + 1) as f64,
                RowSource::Interp { lo, frac } => power(lo, col) * (1.0 - frac) + power(lo + 1, col) * frac,
            };
            db[j * cols + col] = 10.0 * (p + 1e-20).log10();
        }
    }
    let max = db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    db.iter_mut().for_each(|v| *v = v.max(max - DB_RANGE));

    let mut grid = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    let scale = (cols - 1) as f64 / (IMAGE_SIZE - 1) as f64;
    for j in 0..IMAGE_SIZE {
        let row = IMAGE_SIZE - 1 - j;
        let src = &db[j * cols..(j + 1) * cols];
        for c in 0..IMAGE_SIZE {
            let pos = c as f64 * scale;
            let lo = (pos.floor() as usize).min(cols - 2);
            let frac = pos - lo as f64;
            grid[row * IMAGE_SIZE + c] = src[lo] * (1.0 - frac) + src[lo + 1] * frac;
        }
    }

    let (min, max) = grid.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    if range > 0.0 {
        grid.iter_mut().for_each(|v| *v = ((*v - min) / range).clamp(0.0, 1.0));
    } else {
        grid.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(SpectrogramGrid { data: grid })
}
