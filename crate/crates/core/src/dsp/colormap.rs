use super::logspec::SpectrogramGrid;
use super::magma_table::MAGMA;
use super::{DspError, SpectrogramFrame, IMAGE_SIZE};
use crate::ingest::SoundType;

/// Maps one value in [0, 1] through the magma table, interpolating
/// linearly between adjacent entries.
pub fn magma_rgb(v: f64) -> [f32; 3] {
    let pos = v.clamp(0.0, 1.0) * 255.0;
    let lo = (pos.floor() as usize).min(254);
    let frac = (pos - lo as f64) as f32;
    let (a, b) = (MAGMA[lo], MAGMA[lo + 1]);
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * frac)
}

/// Renders a scalar grid as an unstandardized RGB frame (channels R, G, B).
pub fn render_magma(
    grid: &SpectrogramGrid,
    patient_id: &str,
    sound_type: SoundType,
    frame_index: usize,
) -> Result<SpectrogramFrame, DspError> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    if grid.data.len() != plane {
        return Err(DspError::WrongShape { expected: vec![IMAGE_SIZE, IMAGE_SIZE], got: vec![grid.data.len()] });
    }
    let mut pixels = vec![0.0f32; 3 * plane];
    for (i, &v) in grid.data.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(DspError::OutOfRange(v));
        }
        let rgb = magma_rgb(v);
        for c in 0..3 {
            pixels[c * plane + i] = rgb[c];
        }
    }
    Ok(SpectrogramFrame { pixels, patient_id: patient_id.to_string(), sound_type, frame_index, standardized: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_of(values: impl Fn(usize) -> f64) -> SpectrogramGrid {
        SpectrogramGrid { data: (0..IMAGE_SIZE * IMAGE_SIZE).map(values).collect() }
    }

    #[test]
    fn table_endpoints() {
        assert_eq!(magma_rgb(0.0), [0.001462, 0.000466, 0.013866]);
        assert_eq!(magma_rgb(1.0), [0.987053, 0.991438, 0.749504]);
        assert_eq!(MAGMA.len(), 256);
    }

    #[test]
    fn interpolates_between_entries() {
        let mid = magma_rgb(0.5 / 255.0);
        for c in 0..3 {
            let want = (MAGMA[0][c] + MAGMA[1][c]) / 2.0;
            assert!((mid[c] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn ramp_is_monotone() {
        let n = IMAGE_SIZE * IMAGE_SIZE;
        let frame = render_magma(&grid_of(|i| i as f64 / (n - 1) as f64), "p", SoundType::Cough, 0).unwrap();
        let (r, g, b) = (&frame.pixels[..n], &frame.pixels[n..2 * n], &frame.pixels[2 * n..]);
        // red rises up to table entry 218, then dips slightly
        let knee = n * 218 / 255;
        assert!(r[..knee].windows(2).all(|w| w[0] <= w[1]));
        for i in 1..n {
            assert!(r[i] + g[i] + b[i] >= r[i - 1] + g[i - 1] + b[i - 1] - 1e-6);
        }
        assert!(frame.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_out_of_range() {
        let g = grid_of(|i| if i == 7 { 1.5 } else { 0.5 });
        assert!(matches!(render_magma(&g, "p", SoundType::Cough, 0), Err(DspError::OutOfRange(_))));
        let g = grid_of(|_| f64::NAN);
        assert!(render_magma(&g, "p", SoundType::Cough, 0).is_err());
    }
}
