//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc kernel.

use crate::ingest::AudioClip;

use super::{DspError, TARGET_RATE};

pub const TAPS_PER_PHASE: usize = 64;
pub const KAISER_BETA: f64 = 8.6;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Polyphase filter bank for a fixed `up / down` ratio.
#[derive(Debug, Clone)]
pub struct PolyphaseResampler {
    up: u64,
    down: u64,
    /// `up` phases of `TAPS_PER_PHASE` taps, phase-major.
    bank: Vec<f64>,
}

impl PolyphaseResampler {
    pub fn new(from_rate: u32, to_rate: u32) -> Self {
        let g = gcd(from_rate as u64, to_rate as u64);
        let up = to_rate as u64 / g;
        let down = from_rate as u64 / g;
        // cutoff relative to the input Nyquist frequency
        let cutoff = (up as f64 / down as f64).min(1.0);
        let half = (TAPS_PER_PHASE / 2) as f64;
        let i0_beta = bessel_i0(KAISER_BETA);
        let mut bank = Vec::with_capacity(up as usize * TAPS_PER_PHASE);
        for phase in 0..up {
            let frac = phase as f64 / up as f64;
            let start = bank.len();
            for j in 0..TAPS_PER_PHASE {
                // distance (in input samples) between the output instant and tap j
                let tau = (half - 1.0) - j as f64 + frac;
                let r = tau / half;
                let window = if r.abs() >= 1.0 { 0.0 } else { bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta };
                bank.push(cutoff * sinc(cutoff * tau) * window);
            }
            let sum: f64 = bank[start..].iter().sum();
            bank[start..].iter_mut().for_each(|t| *t /= sum);
        }
        Self { up, down, bank }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        ((input_len as f64 * self.up as f64) / self.down as f64).round() as usize
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        let out_len = self.output_len(input.len());
        let n = input.len() as i64;
        let half = (TAPS_PER_PHASE / 2) as i64;
        (0..out_len as u64)
            .map(|k| {
                let pos = k * self.down;
                let center = (pos / self.up) as i64;
                let phase = (pos % self.up) as usize;
                let taps = &self.bank[phase * TAPS_PER_PHASE..(phase + 1) * TAPS_PER_PHASE];
                let first = center - (half - 1);
                let mut acc = 0.0;
                if first >= 0 && first + TAPS_PER_PHASE as i64 <= n {
                    let window = &input[first as usize..first as usize + TAPS_PER_PHASE];
                    for (x, t) in window.iter().zip(taps) {
                        acc += x * t;
                    }
                } else {
                    for (j, t) in taps.iter().enumerate() {
                        let idx = first + j as i64;
                        if (0..n).contains(&idx) {
                            acc += input[idx as usize] * t;
                        }
                    }
                }
                acc
            })
            .collect()
    }
}

/// Resamples a clip to 16 kHz. Clips already at 16 kHz are returned as-is.
pub fn resample_to_16k(clip: &AudioClip) -> Result<AudioClip, DspError> {
    if clip.sample_rate < TARGET_RATE {
        return Err(DspError::UpsamplingRequired(clip.sample_rate));
    }
    if clip.is_empty() {
        return Err(DspError::EmptyClip);
    }
    if clip.sample_rate == TARGET_RATE {
        return Ok(clip.clone());
    }
    let resampler = PolyphaseResampler::new(clip.sample_rate, TARGET_RATE);
    Ok(AudioClip { samples: resampler.process(&clip.samples), sample_rate: TARGET_RATE, source: clip.source.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, n: usize) -> AudioClip {
        let samples = (0..n).map(|i| (std::f64::consts::TAU * freq * i as f64 / rate as f64).sin()).collect();
        AudioClip::new(samples, rate)
    }

    #[test]
    fn length_ratio() {
        let out = resample_to_16k(&sine(440.0, 44100, 44100)).unwrap();
        assert_eq!(out.sample_rate, 16000);
        assert_eq!(out.len(), 16000);
        let out = resample_to_16k(&sine(440.0, 48000, 1001)).unwrap();
        assert_eq!(out.len(), (1001.0f64 / 3.0).round() as usize);
    }

    #[test]
    fn identity_at_16k() {
        let clip = sine(440.0, 16000, 1234);
        assert_eq!(resample_to_16k(&clip).unwrap(), clip);
    }

    #[test]
    fn rejects_upsampling() {
        assert!(matches!(resample_to_16k(&sine(440.0, 8000, 100)), Err(DspError::UpsamplingRequired(8000))));
    }

    #[test]
    fn dc_gain_is_unity() {
        let clip = AudioClip::new(vec![0.25; 44100], 44100);
        let out = resample_to_16k(&clip).unwrap();
        for &v in &out.samples[100..out.len() - 100] {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn bessel_matches_known_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
        // reference: scipy.special.i0(8.6)
        assert!((bessel_i0(8.6) / 750.461_159_563_165_9 - 1.0).abs() < 1e-13);
    }

    #[test]
    fn sine_peak_survives() {
        use rustfft::{num_complex::Complex, FftPlanner};
        let out = resample_to_16k(&sine(1000.0, 44100, 44100)).unwrap();
        let n = out.len();
        let mut buf: Vec<Complex<f64>> = out.samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mags: Vec<f64> = buf[..n / 2 + 1].iter().map(|c| c.norm()).collect();
        let peak = (0..mags.len()).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
        let bin_hz = 16000.0 / n as f64;
        assert!((peak as f64 * bin_hz - 1000.0).abs() <= bin_hz, "peak at bin {peak}");
        assert!(mags[3000] < mags[peak] * 1e-3);
    }
}
