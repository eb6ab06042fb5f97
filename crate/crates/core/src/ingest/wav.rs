use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{IngestError, SoundType};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipSource {
    pub patient_id: String,
    pub sound: SoundType,
}

/// Mono audio, amplitude in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source: Option<ClipSource>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate, source: None }
    }

    pub fn with_source(mut self, patient_id: &str, sound: SoundType) -> Self {
        self.source = Some(ClipSource { patient_id: patient_id.to_string(), sound });
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn map_hound(path: &Path, err: hound::Error) -> IngestError {
    match err {
        hound::Error::IoError(e) => IngestError::UnreadableFile { path: path.to_path_buf(), reason: e.to_string() },
        hound::Error::Unsupported => IngestError::UnsupportedEncoding(path.to_path_buf()),
        other => IngestError::CorruptHeader { path: path.to_path_buf(), reason: other.to_string() },
    }
}

/// Loads a PCM WAV file (integer PCM or 32-bit float), mixing multichannel
/// audio down to mono by averaging channels.
pub fn load_wav(path: &Path) -> Result<AudioClip, IngestError> {
    let reader = WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || spec.sample_rate == 0 {
        return Err(IngestError::CorruptHeader { path: path.to_path_buf(), reason: "zero channels or sample rate".into() });
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(|e| map_hound(path, e))?
        }
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| map_hound(path, e))?
        }
        _ => return Err(IngestError::UnsupportedEncoding(path.to_path_buf())),
    };

    if !interleaved.len().is_multiple_of(channels) {
        return Err(IngestError::CorruptHeader {
            path: path.to_path_buf(),
            reason: "sample count not a multiple of the channel count".into(),
        });
    }
    let samples: Vec<f64> = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(channels).map(|frame| frame.iter().sum::<f64>() / channels as f64).collect()
    };
    if samples.is_empty() {
        return Err(IngestError::EmptyAudio(path.to_path_buf()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(IngestError::NonFiniteSample(path.to_path_buf()));
    }
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Writes mono 16-bit PCM, clamping to [-1, 1].
pub fn write_wav_pcm16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), IngestError> {
    let spec = WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut writer = WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))?;
    Ok(())
}
