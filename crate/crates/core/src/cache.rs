//! On-disk spectrogram cache.
//!
//! ```text
//! <cache>/index.json                 pipeline version, per-patient hash and frame count
//! <cache>/stats_<sound>.json         standardization statistics from the training partition
//! <cache>/frames/<patient>/<sound>_<k>.png   8-bit magma image
//! <cache>/frames/<patient>/<sound>_<k>.f32   little-endian float pixels, channel-major
//! ```
//!
//! Entries are keyed by a SHA-256 of the three WAV files and the pipeline
//! version, so rerunning over unchanged audio recomputes nothing. Training
//! reads the float sidecars; the PNGs are for inspection.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsp::{
    compute_standardization, patient_frames, standardize_in_place, DspError, SpectrogramFrame, StandardizationStats,
    FRAME_PIXELS, IMAGE_SIZE,
};
use crate::ingest::{load_wav, IngestError, Partition, PatientRecord, SoundType};

/// Bumped whenever the pipeline's output for a given input changes.
pub const PIPELINE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("patient {patient}: {source}")]
    Dsp { patient: String, source: DspError },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("cache miss: {0}")]
    CacheMiss(String),
    #[error("cache was built by pipeline version {found}, this is version {expected}; rerun preprocess")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("no training-partition frames to compute {0} statistics from")]
    NoTrainingFrames(SoundType),
    #[error("worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CacheError + '_ {
    move |source| CacheError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub hash: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub version: u32,
    pub patients: BTreeMap<String, IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessReport {
    pub computed: usize,
    pub reused: usize,
    /// Frames per sound type over all patients.
    pub frames: usize,
    pub stats: Vec<StandardizationStats>,
}

/// SHA-256 over the pipeline version and the bytes of the three WAV files.
pub fn content_hash(record: &PatientRecord) -> Result<String, CacheError> {
    let mut h = Sha256::new();
    h.update(PIPELINE_VERSION.to_le_bytes());
    for sound in SoundType::ALL {
        let path = record.path(sound);
        let bytes = fs::read(path).map_err(io_err(path))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(format!("{:x}", h.finalize()))
}

pub fn frame_stem(dir: &Path, patient: &str, sound: SoundType, k: usize) -> PathBuf {
    dir.join("frames").join(patient).join(format!("{}_{k}", sound.name()))
}

pub fn stats_path(dir: &Path, sound: SoundType) -> PathBuf {
    dir.join(format!("stats_{}.json", sound.name()))
}

fn index_path(dir: &Path) -> PathBuf {
    dir.join("index.json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CacheError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CacheError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CacheError::Corrupt { path: path.to_path_buf(), reason: e.to_string() })
}

fn write_frame(dir: &Path, frame: &SpectrogramFrame) -> Result<(), CacheError> {
    let stem = frame_stem(dir, &frame.patient_id, frame.sound_type, frame.frame_index);
    let sidecar = stem.with_extension("f32");
    let mut w = BufWriter::new(fs::File::create(&sidecar).map_err(io_err(&sidecar))?);
    for v in &frame.pixels {
        w.write_all(&v.to_le_bytes()).map_err(io_err(&sidecar))?;
    }
    w.flush().map_err(io_err(&sidecar))?;

    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let rgb: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |c| i + c * plane))
        .map(|j| (frame.pixels[j].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let png = stem.with_extension("png");
    image::save_buffer(&png, &rgb, IMAGE_SIZE as u32, IMAGE_SIZE as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| CacheError::Corrupt { path: png.clone(), reason: e.to_string() })
}

fn read_sidecar(path: &Path) -> Result<Vec<f32>, CacheError> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CacheError::CacheMiss(path.display().to_string()),
        _ => CacheError::Io { path: path.to_path_buf(), source: e },
    })?;
    if bytes.len() != FRAME_PIXELS * 4 {
        return Err(CacheError::Corrupt {
            path: path.to_path_buf(),
            reason: format!("{} bytes, expected {}", bytes.len(), FRAME_PIXELS * 4),
        });
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

fn compute_patient(dir: &Path, record: &PatientRecord) -> Result<usize, CacheError> {
    let clips: Vec<_> = SoundType::ALL.iter().map(|&s| load_wav(record.path(s))).collect::<Result<_, _>>()?;
    let id = &record.patient_id;
    let frames =
        patient_frames(id, &clips[0], &clips[1], &clips[2]).map_err(|source| CacheError::Dsp { patient: id.clone(), source })?;
    let pdir = dir.join("frames").join(id);
    fs::create_dir_all(&pdir).map_err(io_err(&pdir))?;
    for f in frames.iter().flatten() {
        write_frame(dir, f)?;
    }
    Ok(frames[0].len())
}

/// Runs the spectrogram pipeline for every record not already cached,
/// then recomputes the per-sound-type statistics from the training
/// partition. The output does not depend on `workers`.
pub fn preprocess(records: &[PatientRecord], dir: &Path, workers: usize) -> Result<PreprocessReport, CacheError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let old = match read_json::<CacheIndex>(&index_path(dir)) {
        Ok(idx) if idx.version == PIPELINE_VERSION => idx.patients,
        _ => BTreeMap::new(),
    };
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| CacheError::Pool(e.to_string()))?;
    let results: Vec<Result<(IndexEntry, bool), CacheError>> = pool.install(|| {
        records
            .par_iter()
            .map(|r| {
                let hash = content_hash(r)?;
                if let Some(e) = old.get(&r.patient_id).filter(|e| e.hash == hash) {
                    let complete = (0..e.frames).all(|k| {
                        SoundType::ALL.iter().all(|&s| frame_stem(dir, &r.patient_id, s, k).with_extension("f32").is_file())
                    });
                    if complete {
                        return Ok((e.clone(), false));
                    }
                }
                let frames = compute_patient(dir, r)?;
                Ok((IndexEntry { hash, frames }, true))
            })
            .collect()
    });

    let mut patients = BTreeMap::new();
    let (mut computed, mut frames) = (0, 0);
    for (r, res) in records.iter().zip(results) {
        let (entry, fresh) = res?;
        computed += usize::from(fresh);
        frames += entry.frames;
        patients.insert(r.patient_id.clone(), entry);
    }
    let index = CacheIndex { version: PIPELINE_VERSION, patients };

    let cache = FrameCache { dir: dir.to_path_buf(), index };
    let mut stats = Vec::new();
    for sound in SoundType::ALL {
        let mut train = Vec::new();
        for r in records.iter().filter(|r| r.partition == Partition::Train) {
            train.extend(cache.raw_frames(&r.patient_id, sound)?);
        }
        if train.is_empty() {
            return Err(CacheError::NoTrainingFrames(sound));
        }
        let s =
            compute_standardization(&train).map_err(|source| CacheError::Dsp { patient: "training partition".into(), source })?;
        write_json(&stats_path(dir, sound), &s)?;
        stats.push(s);
    }
    // written last: an interrupted run leaves the previous index in place
    write_json(&index_path(dir), &cache.index)?;
    Ok(PreprocessReport { computed, reused: records.len() - computed, frames, stats })
}

/// Read access to a preprocessed cache.
#[derive(Debug, Clone)]
pub struct FrameCache {
    dir: PathBuf,
    index: CacheIndex,
}

impl FrameCache {
    pub fn open(dir: &Path) -> Result<Self, CacheError> {
        let path = index_path(dir);
        if !path.is_file() {
            return Err(CacheError::CacheMiss(format!("no index in {}", dir.display())));
        }
        let index: CacheIndex = read_json(&path)?;
        if index.version != PIPELINE_VERSION {
            return Err(CacheError::VersionMismatch { found: index.version, expected: PIPELINE_VERSION });
        }
        Ok(Self { dir: dir.to_path_buf(), index })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn index(&self) -> &CacheIndex {
        &self.index
    }

    pub fn frame_count(&self, patient: &str) -> Result<usize, CacheError> {
        self.index.patients.get(patient).map(|e| e.frames).ok_or_else(|| CacheError::CacheMiss(format!("patient {patient}")))
    }

    pub fn stats(&self, sound: SoundType) -> Result<StandardizationStats, CacheError> {
        let path = stats_path(&self.dir, sound);
        if !path.is_file() {
            return Err(CacheError::CacheMiss(path.display().to_string()));
        }
        read_json(&path)
    }

    /// Unstandardized frames of one patient and sound type.
    pub fn raw_frames(&self, patient: &str, sound: SoundType) -> Result<Vec<SpectrogramFrame>, CacheError> {
        (0..self.frame_count(patient)?)
            .map(|k| {
                Ok(SpectrogramFrame {
                    pixels: read_sidecar(&frame_stem(&self.dir, patient, sound, k).with_extension("f32"))?,
                    patient_id: patient.to_string(),
                    sound_type: sound,
                    frame_index: k,
                    standardized: false,
                })
            })
            .collect()
    }
}

/// Standardized frames held in memory for a set of patients and sound
/// types.
#[derive(Debug, Clone)]
pub struct FrameStore {
    modalities: Vec<SoundType>,
    /// patient → modality (in `modalities` order) → frames
    frames: BTreeMap<String, Vec<Vec<SpectrogramFrame>>>,
}

impl FrameStore {
    pub fn load(cache: &FrameCache, records: &[PatientRecord], modalities: &[SoundType]) -> Result<Self, CacheError> {
        let stats: Vec<StandardizationStats> = modalities.iter().map(|&s| cache.stats(s)).collect::<Result<_, _>>()?;
        let mut frames = BTreeMap::new();
        for r in records {
            let per: Vec<Vec<SpectrogramFrame>> = modalities
                .iter()
                .zip(&stats)
                .map(|(&s, st)| {
                    let mut fs = cache.raw_frames(&r.patient_id, s)?;
                    for f in &mut fs {
                        standardize_in_place(&mut f.pixels, st);
                        f.standardized = true;
                    }
                    Ok(fs)
                })
                .collect::<Result<_, CacheError>>()?;
            frames.insert(r.patient_id.clone(), per);
        }
        Ok(Self { modalities: modalities.to_vec(), frames })
    }

    pub fn modalities(&self) -> &[SoundType] {
        &self.modalities
    }

    pub fn frame_count(&self, patient: &str) -> Result<usize, CacheError> {
        self.frames.get(patient).map(|m| m[0].len()).ok_or_else(|| CacheError::CacheMiss(format!("patient {patient} not loaded")))
    }

    /// The aligned frames of one sample, in modality order.
    pub fn sample(&self, patient: &str, frame: usize) -> Result<Vec<&SpectrogramFrame>, CacheError> {
        let per = self.frames.get(patient).ok_or_else(|| CacheError::CacheMiss(format!("patient {patient} not loaded")))?;
        per.iter().map(|fs| fs.get(frame).ok_or_else(|| CacheError::CacheMiss(format!("{patient} frame {frame}")))).collect()
    }
}
