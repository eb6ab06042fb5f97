//! Deterministic synthetic respiratory-sound datasets.
//!
//! Every clip is white background noise plus a class-independent texture
//! (cough bursts, breathing swell, voiced harmonics). Positive patients
//! additionally carry band-limited noise in a per-modality discriminative
//! band, so each sound type is informative to a configurable degree.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::RealFftPlanner;

use super::manifest::{write_manifest, Label, Partition, PatientRecord, Sex, SoundType, NUM_FOLDS};
use super::wav::write_wav_pcm16;
use super::IngestError;

/// Discriminative band (Hz) carried by positives for each sound type.
pub fn discriminative_band(sound: SoundType) -> (f64, f64) {
    match sound {
        SoundType::Cough => (300.0, 600.0),
        SoundType::Breath => (800.0, 1600.0),
        SoundType::Speech => (2000.0, 4000.0),
    }
}

/// Nominal background noise standard deviation.
const BACKGROUND_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Training-partition patients; must be even and at least 4.
    pub n_patients: usize,
    /// Held-out test patients with known labels; must be even (may be 0).
    pub n_test: usize,
    pub seed: u64,
    pub sample_rate: u32,
    /// In-band power gain of positives over the nominal background, per
    /// sound type (cough, breath, speech). 0 dB makes a modality uninformative.
    pub band_gain_db: [f64; 3],
    /// Per-clip background level jitter, uniform in ±this many dB.
    pub level_jitter_db: f64,
    pub min_duration_secs: f64,
    pub max_duration_secs: f64,
}

impl SynthConfig {
    pub fn new(n_patients: usize, seed: u64) -> Self {
        Self {
            n_patients,
            n_test: 0,
            seed,
            sample_rate: 44_100,
            band_gain_db: [12.0, 12.0, 12.0],
            level_jitter_db: 1.0,
            min_duration_secs: 3.0,
            max_duration_secs: 9.0,
        }
    }

    /// Cough uninformative; breath and speech each carry half of the default
    /// added band power.
    pub fn split_breath_speech(n_patients: usize, seed: u64) -> Self {
        let half = 10.0 * (1.0 + (10f64.powf(1.2) - 1.0) / 2.0).log10();
        Self { band_gain_db: [0.0, half, half], ..Self::new(n_patients, seed) }
    }

    fn validate(&self) -> Result<(), IngestError> {
        if self.n_patients < 4 || !self.n_patients.is_multiple_of(2) {
            return Err(IngestError::InvalidConfig(format!("n_patients must be even and >= 4, got {}", self.n_patients)));
        }
        if !self.n_test.is_multiple_of(2) {
            return Err(IngestError::InvalidConfig(format!("n_test must be even, got {}", self.n_test)));
        }
        if !(self.min_duration_secs > 0.0 && self.min_duration_secs <= self.max_duration_secs) {
            return Err(IngestError::InvalidConfig("bad duration range".into()));
        }
        if self.sample_rate < 16_000 {
            return Err(IngestError::InvalidConfig("sample rate below 16 kHz".into()));
        }
        Ok(())
    }
}

/// Generates `n_patients` training patients with the default configuration.
pub fn generate_synthetic_dataset(n_patients: usize, seed: u64, out_dir: &Path) -> Result<PathBuf, IngestError> {
    generate_with(&SynthConfig::new(n_patients, seed), out_dir)
}

/// Independent 64-bit seed for the stream named by `parts`.
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the key parts
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn balanced_labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<Label> {
    let mut labels: Vec<Label> = (0..n).map(|i| if i < n / 2 { Label::Positive } else { Label::Negative }).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

pub fn generate_with(config: &SynthConfig, out_dir: &Path) -> Result<PathBuf, IngestError> {
    config.validate()?;
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &[0]));
    let train_labels = balanced_labels(config.n_patients, &mut rng);
    let test_labels = balanced_labels(config.n_test, &mut rng);

    let mut records = Vec::with_capacity(config.n_patients + config.n_test);
    let patients = train_labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (format!("p{i:03}"), l, Partition::Train, Some((i % NUM_FOLDS as usize) as u8)))
        .chain(test_labels.iter().enumerate().map(|(i, &l)| (format!("t{i:03}"), l, Partition::Test, None)));

    let mut planner = RealFftPlanner::<f64>::new();
    for (k, (id, label, partition, fold)) in patients.enumerate() {
        let mut prng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &[1, k as u64]));
        let sex = if prng.gen_bool(0.5) { Sex::Male } else { Sex::Female };
        let mut paths = Vec::with_capacity(3);
        for sound in SoundType::ALL {
            let mut crng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &[2, k as u64, sound.index() as u64]));
            let samples = synth_clip(config, sound, label == Label::Positive, &mut crng, &mut planner);
            let path = audio_dir.join(format!("{id}_{}.wav", sound.name()));
            write_wav_pcm16(&path, &samples, config.sample_rate)?;
            paths.push(path);
        }
        records.push(PatientRecord {
            patient_id: id,
            cough_path: paths[0].clone(),
            breath_path: paths[1].clone(),
            speech_path: paths[2].clone(),
            sex,
            label,
            partition,
            fold,
        });
    }

    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Band-limits `signal` to [lo, hi] Hz with an FFT brick-wall mask.
fn band_limit(signal: &mut [f64], sample_rate: u32, lo: f64, hi: f64, planner: &mut RealFftPlanner<f64>) {
    let n = signal.len();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut spectrum = fwd.make_output_vec();
    fwd.process(signal, &mut spectrum).expect("fft length");
    let bin_hz = sample_rate as f64 / n as f64;
    for (i, c) in spectrum.iter_mut().enumerate() {
        let f = i as f64 * bin_hz;
        if f < lo || f > hi {
            *c = Default::default();
        }
    }
    // realfft requires purely real DC and Nyquist terms
    spectrum[0].im = 0.0;
    if n.is_multiple_of(2) {
        spectrum[n / 2].im = 0.0;
    }
    inv.process(&mut spectrum, signal).expect("fft length");
    let scale = 1.0 / n as f64;
    signal.iter_mut().for_each(|s| *s *= scale);
}

fn rescale_to_std(signal: &mut [f64], target: f64) {
    let n = signal.len() as f64;
    let mean = signal.iter().sum::<f64>() / n;
    let std = (signal.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        let k = target / std;
        signal.iter_mut().for_each(|s| *s = (*s - mean) * k);
    }
}

fn synth_clip(
    config: &SynthConfig,
    sound: SoundType,
    positive: bool,
    rng: &mut ChaCha8Rng,
    planner: &mut RealFftPlanner<f64>,
) -> Vec<f64> {
    let sr = config.sample_rate;
    let dur = rng.gen_range(config.min_duration_secs..=config.max_duration_secs);
    let n = (dur * sr as f64).round() as usize;
    let jitter = if config.level_jitter_db > 0.0 { rng.gen_range(-config.level_jitter_db..=config.level_jitter_db) } else { 0.0 };
    let bg_std = BACKGROUND_STD * 10f64.powf(jitter / 20.0);
    let mut out: Vec<f64> = gaussian(n, rng).into_iter().map(|v| v * bg_std).collect();

    let t = |i: usize| i as f64 / sr as f64;
    let texture: Vec<f64> = match sound {
        SoundType::Cough => {
            let mut noise = gaussian(n, rng);
            band_limit(&mut noise, sr, 1000.0, 5000.0, planner);
            rescale_to_std(&mut noise, 1.0);
            let mut env = vec![0.0; n];
            let bursts = rng.gen_range(2..=4);
            for _ in 0..bursts {
                let len = (rng.gen_range(0.15..0.35) * sr as f64) as usize;
                let start = rng.gen_range(0..n.saturating_sub(len).max(1));
                let amp = rng.gen_range(0.08..0.15);
                for j in 0..len.min(n - start) {
                    let w = (std::f64::consts::PI * j as f64 / len as f64).sin().powi(2);
                    env[start + j] += amp * w;
                }
            }
            noise.iter().zip(&env).map(|(a, e)| a * e).collect()
        }
        SoundType::Breath => {
            let mut noise = gaussian(n, rng);
            band_limit(&mut noise, sr, 100.0, 500.0, planner);
            rescale_to_std(&mut noise, rng.gen_range(0.03..0.05));
            let rate = rng.gen_range(0.2..0.4);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            noise.iter().enumerate().map(|(i, v)| v * (0.6 + 0.4 * (std::f64::consts::TAU * rate * t(i) + phase).sin())).collect()
        }
        SoundType::Speech => {
            let f0 = rng.gen_range(100.0..200.0);
            let harmonics = (1500.0 / f0) as usize;
            let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
            let syllable = rng.gen_range(3.0..5.0);
            let amp = rng.gen_range(0.03..0.05);
            (0..n)
                .map(|i| {
                    let ti = t(i);
                    let voiced: f64 = phases
                        .iter()
                        .enumerate()
                        .map(|(h, ph)| (std::f64::consts::TAU * (h + 1) as f64 * f0 * ti + ph).sin() / (h + 1) as f64)
                        .sum();
                    amp * voiced * (0.5 + 0.5 * (std::f64::consts::TAU * syllable * ti).sin())
                })
                .collect()
        }
    };
    out.iter_mut().zip(&texture).for_each(|(o, x)| *o += x);

    let gain_db = config.band_gain_db[sound.index()];
    if positive && gain_db > 0.0 {
        let (lo, hi) = discriminative_band(sound);
        let band_fraction = (hi - lo) / (sr as f64 / 2.0);
        let added_power = BACKGROUND_STD * BACKGROUND_STD * band_fraction * (10f64.powf(gain_db / 10.0) - 1.0);
        let mut band = gaussian(n, rng);
        band_limit(&mut band, sr, lo, hi, planner);
        rescale_to_std(&mut band, added_power.sqrt());
        out.iter_mut().zip(&band).for_each(|(o, b)| *o += b);
    }
    out.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_manifest;

    #[test]
    fn rejects_odd_or_tiny() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic_dataset(7, 1, dir.path()).is_err());
        assert!(generate_synthetic_dataset(2, 1, dir.path()).is_err());
    }

    #[test]
    fn class_balance_and_folds() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SynthConfig::new(12, 5);
        cfg.n_test = 4;
        cfg.max_duration_secs = 3.5;
        let manifest = generate_with(&cfg, dir.path()).unwrap();
        let recs = parse_manifest(&manifest).unwrap();
        let train: Vec<_> = recs.iter().filter(|r| r.partition == Partition::Train).collect();
        let test: Vec<_> = recs.iter().filter(|r| r.partition == Partition::Test).collect();
        assert_eq!(train.len(), 12);
        assert_eq!(test.len(), 4);
        assert_eq!(train.iter().filter(|r| r.label == Label::Positive).count(), 6);
        assert_eq!(test.iter().filter(|r| r.label == Label::Positive).count(), 2);
        let mut hist = [0usize; 5];
        for r in &train {
            hist[r.fold.unwrap() as usize] += 1;
        }
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
    }
}
