//! Hann-windowed short-time Fourier magnitude of one 5 s frame.

use realfft::RealFftPlanner;

use super::{DspError, FRAME_LEN, STFT_BINS, STFT_COLUMNS, STFT_HOP, STFT_WINDOW};

/// Magnitude spectrogram, row-major `[bin][column]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeMatrix {
    pub bins: usize,
    pub columns: usize,
    pub data: Vec<f64>,
}

impl MagnitudeMatrix {
    pub fn get(&self, bin: usize, column: usize) -> f64 {
        self.data[bin * self.columns + column]
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len).map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / len as f64).cos()).collect()
}

pub fn stft_magnitude(window: &[f64]) -> Result<MagnitudeMatrix, DspError> {
    if window.len() != FRAME_LEN {
        return Err(DspError::WrongLength { expected: FRAME_LEN, got: window.len() });
    }
    let hann = hann_window(STFT_WINDOW);
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(STFT_WINDOW);
    let mut input = fft.make_input_vec();
    let mut spectrum = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();
    let mut data = vec![0.0; STFT_BINS * STFT_COLUMNS];
    for col in 0..STFT_COLUMNS {
        let seg = &window[col * STFT_HOP..col * STFT_HOP + STFT_WINDOW];
        for ((dst, x), w) in input.iter_mut().zip(seg).zip(&hann) {
            *dst = x * w;
        }
        fft.process_with_scratch(&mut input, &mut spectrum, &mut scratch).expect("fft buffer sizes");
        for (bin, c) in spectrum.iter().enumerate() {
            data[bin * STFT_COLUMNS + col] = c.norm();
        }
    }
    Ok(MagnitudeMatrix { bins: STFT_BINS, columns: STFT_COLUMNS, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64) -> Vec<f64> {
        (0..FRAME_LEN).map(|i| (std::f64::consts::TAU * freq * i as f64 / 16000.0).sin()).collect()
    }

    #[test]
    fn shape() {
        let m = stft_magnitude(&sine(440.0)).unwrap();
        assert_eq!((m.bins, m.columns), (2049, 594));
        assert_eq!(m.data.len(), 2049 * 594);
    }

    #[test]
    fn zeros_in_zeros_out() {
        let m = stft_magnitude(&vec![0.0; FRAME_LEN]).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_length() {
        assert!(matches!(stft_magnitude(&[0.0; 100]), Err(DspError::WrongLength { .. })));
    }

    #[test]
    fn sine_peaks_at_bin_256() {
        let x = sine(1000.0);
        let m = stft_magnitude(&x).unwrap();
        for col in 0..m.columns {
            let best = (0..m.bins).max_by(|&a, &b| m.get(a, col).total_cmp(&m.get(b, col))).unwrap();
            assert_eq!(best, 256, "column {col}");
        }
        // direct DFT oracle on one column
        let col = 100;
        let hann = hann_window(STFT_WINDOW);
        let seg = &x[col * STFT_HOP..col * STFT_HOP + STFT_WINDOW];
        for bin in [0usize, 100, 255, 256, 257, 1000, 2048] {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, (v, w)) in seg.iter().zip(&hann).enumerate() {
                let a = std::f64::consts::TAU * (bin * i) as f64 / STFT_WINDOW as f64;
                re += v * w * a.cos();
                im -= v * w * a.sin();
            }
            let direct = (re * re + im * im).sqrt();
            assert!((direct - m.get(bin, col)).abs() < 1e-8 * (1.0 + direct), "bin {bin}");
        }
    }

    #[test]
    fn homogeneous_of_degree_one() {
        let x: Vec<f64> = (0..FRAME_LEN).map(|i| ((i * 7919) % 1013) as f64 / 1013.0 - 0.5).collect();
        let base = stft_magnitude(&x).unwrap();
        for k in [-3.0, 0.5, 2.0] {
            let scaled: Vec<f64> = x.iter().map(|v| v * k).collect();
            let m = stft_magnitude(&scaled).unwrap();
            for (a, b) in m.data.iter().zip(&base.data) {
                assert!((a - k.abs() * b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
    }
}
