//! Per-channel standardization statistics from training spectrograms.

use serde::{Deserialize, Serialize};

use super::{DspError, SpectrogramFrame, IMAGE_SIZE};
use crate::ingest::SoundType;

pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub sound_type: SoundType,
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
}

/// Pairwise (cascade) summation; the result depends only on the order of
/// `values`, not on how the work is scheduled.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

fn channel_sum(frame: &SpectrogramFrame, c: usize, f: impl Fn(f64) -> f64) -> f64 {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let vals: Vec<f64> = frame.pixels[c * plane..(c + 1) * plane].iter().map(|&v| f(v as f64)).collect();
    pairwise_sum(&vals)
}

/// Two-pass per-channel mean and population standard deviation.
pub fn compute_standardization(frames: &[SpectrogramFrame]) -> Result<StandardizationStats, DspError> {
    let first = frames.first().ok_or(DspError::EmptySet)?;
    let sound_type = first.sound_type;
    for f in frames {
        if f.sound_type != sound_type {
            return Err(DspError::MixedSoundTypes);
        }
        if f.standardized {
            return Err(DspError::AlreadyStandardized);
        }
        f.check_shape()?;
    }
    let count = (frames.len() * IMAGE_SIZE * IMAGE_SIZE) as f64;
    let mut mu = [0.0; 3];
    let mut sigma = [0.0; 3];
    for c in 0..3 {
        let sums: Vec<f64> = frames.iter().map(|f| channel_sum(f, c, |v| v)).collect();
        mu[c] = pairwise_sum(&sums) / count;
        let m = mu[c];
        let sq: Vec<f64> = frames.iter().map(|f| channel_sum(f, c, |v| (v - m) * (v - m))).collect();
        sigma[c] = (pairwise_sum(&sq) / count).sqrt().max(SIGMA_FLOOR);
    }
    Ok(StandardizationStats { sound_type, mu, sigma })
}

/// Applies `(x - mu) / sigma` per channel.
pub fn standardize(frame: &SpectrogramFrame, stats: &StandardizationStats) -> Result<SpectrogramFrame, DspError> {
    if frame.standardized {
        return Err(DspError::AlreadyStandardized);
    }
    if frame.sound_type != stats.sound_type {
        return Err(DspError::SoundTypeMismatch { frame: frame.sound_type, stats: stats.sound_type });
    }
    frame.check_shape()?;
    let mut out = frame.clone();
    standardize_in_place(&mut out.pixels, stats);
    out.standardized = true;
    Ok(out)
}

/// Standardizes raw channel-major pixels without the frame bookkeeping.
pub fn standardize_in_place(pixels: &mut [f32], stats: &StandardizationStats) {
    let plane = pixels.len() / 3;
    for c in 0..3 {
        let (m, s) = (stats.mu[c], stats.sigma[c]);
        for v in &mut pixels[c * plane..(c + 1) * plane] {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn frame(fill: impl Fn(usize, usize) -> f32) -> SpectrogramFrame {
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        SpectrogramFrame {
            pixels: (0..3 * plane).map(|i| fill(i / plane, i % plane)).collect(),
            patient_id: "p".into(),
            sound_type: SoundType::Breath,
            frame_index: 0,
            standardized: false,
        }
    }

    #[test]
    fn constant_frame_hits_floor() {
        let s = compute_standardization(&[frame(|_, _| 0.5)]).unwrap();
        assert_eq!(s.mu, [0.5; 3]);
        assert_eq!(s.sigma, [SIGMA_FLOOR; 3]);
    }

    #[test]
    fn two_point_population_stats() {
        let s = compute_standardization(&[frame(|_, _| 0.0), frame(|_, _| 1.0)]).unwrap();
        assert_eq!(s.mu, [0.5; 3]);
        assert_eq!(s.sigma, [0.5; 3]);
    }

    #[test]
    fn matches_one_pass_welford() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<_> = (0..4)
            .map(|_| {
                let vals: Vec<f32> = (0..3 * IMAGE_SIZE * IMAGE_SIZE).map(|_| rng.gen::<f32>()).collect();
                frame(|c, i| vals[c * IMAGE_SIZE * IMAGE_SIZE + i])
            })
            .collect();
        let s = compute_standardization(&frames).unwrap();
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        for c in 0..3 {
            let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
            for f in &frames {
                for &v in &f.pixels[c * plane..(c + 1) * plane] {
                    n += 1.0;
                    let d = v as f64 - mean;
                    mean += d / n;
                    m2 += d * (v as f64 - mean);
                }
            }
            assert!((mean - s.mu[c]).abs() < 1e-10);
            assert!(((m2 / n).sqrt() - s.sigma[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn centering_and_identity() {
        let f = frame(|_, _| 0.5);
        let stats = StandardizationStats { sound_type: SoundType::Breath, mu: [0.5; 3], sigma: [0.25; 3] };
        let out = standardize(&f, &stats).unwrap();
        assert!(out.standardized);
        assert!(out.pixels.iter().all(|&v| v == 0.0));

        let g = frame(|c, i| (c * 7 + i % 13) as f32 / 40.0);
        let id = StandardizationStats { sound_type: SoundType::Breath, mu: [0.0; 3], sigma: [1.0; 3] };
        assert_eq!(standardize(&g, &id).unwrap().pixels, g.pixels);
    }

    #[test]
    fn standardized_training_set_has_zero_mean() {
        let frames: Vec<_> = (0..3).map(|k| frame(move |c, i| ((i * (k + 2) + c * 31) % 97) as f32 / 97.0)).collect();
        let stats = compute_standardization(&frames).unwrap();
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let std_frames: Vec<_> = frames.iter().map(|f| standardize(f, &stats).unwrap()).collect();
        for c in 0..3 {
            let total: f64 = std_frames.iter().flat_map(|f| f.pixels[c * plane..(c + 1) * plane].iter()).map(|&v| v as f64).sum();
            assert!((total / (3 * plane) as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn error_paths() {
        assert!(matches!(compute_standardization(&[]), Err(DspError::EmptySet)));
        let mut other = frame(|_, _| 0.1);
        other.sound_type = SoundType::Speech;
        assert!(matches!(compute_standardization(&[frame(|_, _| 0.1), other.clone()]), Err(DspError::MixedSoundTypes)));
        let stats = StandardizationStats { sound_type: SoundType::Breath, mu: [0.0; 3], sigma: [1.0; 3] };
        assert!(matches!(standardize(&other, &stats), Err(DspError::SoundTypeMismatch { .. })));
        let done = standardize(&frame(|_, _| 0.1), &stats).unwrap();
        assert!(matches!(standardize(&done, &stats), Err(DspError::AlreadyStandardized)));
    }
}
