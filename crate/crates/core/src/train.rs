//! Five-fold cross-validation with replication balancing, AUC-based early
//! stopping and a final model trained for the fold-mean epoch count.
//!
//! Run directory layout:
//!
//! ```text
//! <run>/config.json
//! <run>/fold<k>/checkpoint.rfus     best-validation checkpoint of fold k
//! <run>/fold<k>/history.csv         epoch,train_loss,val_auc
//! <run>/final/checkpoint.rfus
//! ```

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheError, FrameStore};
use crate::eval::{aggregate_patient_scores, roc_auc, EvalError, ScoredPatient};
use crate::ingest::{stream_seed, Label, Partition, PatientRecord, NUM_FOLDS};
use crate::model::{save_checkpoint, stack_frames, Checkpoint, ModelConfig, ModelError};
use crate::nncore::{AdamConfig, NnError, Tensor};

pub const BATCH_SIZE: usize = 64;
pub const MAX_EPOCHS: usize = 100;
pub const PATIENCE: usize = 15;
pub const LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("balancing needs both classes; got {positives} positive and {negatives} negative samples")]
    SingleClass { positives: usize, negatives: usize },
    #[error("epoch averaging needs exactly {expected} runs, got {got}")]
    WrongFoldCount { expected: usize, got: usize },
    #[error("fold {0} has no validation patients")]
    EmptyFold(u8),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(e.into())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Unit the validation AUC is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationLevel {
    /// Mean frame probability per patient.
    Patient,
    /// Every frame scored on its own.
    Frame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub validation: ValidationLevel,
    /// Epochs for the final model; the fold mean when absent.
    pub final_epochs: Option<usize>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            batch_size: BATCH_SIZE,
            max_epochs: MAX_EPOCHS,
            patience: PATIENCE,
            learning_rate: LEARNING_RATE,
            validation: ValidationLevel::Patient,
            final_epochs: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, ..AdamConfig::default() }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(TrainError::InvalidConfig("batch size, epoch cap and patience must be positive".into()));
        }
        if self.final_epochs == Some(0) {
            return Err(TrainError::InvalidConfig("final epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub fold_id: u8,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// One plan per fold over the training partition, split by patient.
pub fn fold_plans(records: &[PatientRecord]) -> Result<Vec<FoldPlan>, TrainError> {
    let mut ids: Vec<(&str, u8)> = records
        .iter()
        .filter(|r| r.partition == Partition::Train)
        .map(|r| (r.patient_id.as_str(), r.fold.expect("training records carry a fold")))
        .collect();
    ids.sort();
    (0..NUM_FOLDS)
        .map(|k| {
            let (validation, train): (Vec<_>, Vec<_>) = ids.iter().partition(|(_, f)| *f == k);
            if validation.is_empty() {
                return Err(TrainError::EmptyFold(k));
            }
            Ok(FoldPlan {
                fold_id: k,
                train: train.into_iter().map(|(id, _)| id.to_string()).collect(),
                validation: validation.into_iter().map(|(id, _)| id.to_string()).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Sample {
    pub patient_id: String,
    pub frame: usize,
}

/// Training samples after replication of the minority class, sorted by
/// (patient, frame) with copies adjacent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedIndex {
    pub samples: Vec<Sample>,
}

/// Replicates every minority-class sample ⌊N/P⌋ times and the first
/// N mod P of them (in patient, frame order) once more, so both classes
/// end with N samples. The majority class is left as is.
pub fn balance_training_set(samples: &[Sample], positive: impl Fn(&Sample) -> bool) -> Result<BalancedIndex, TrainError> {
    let mut sorted = samples.to_vec();
    sorted.sort();
    let positives = sorted.iter().filter(|s| positive(s)).count();
    let negatives = sorted.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(TrainError::SingleClass { positives, negatives });
    }
    let minority_positive = positives <= negatives;
    let (p, n) = (positives.min(negatives), positives.max(negatives));
    let (copies, extra) = (n / p, n % p);
    let mut out = Vec::with_capacity(2 * n);
    let mut seen = 0;
    for s in &sorted {
        let k = if positive(s) == minority_positive {
            seen += 1;
            copies + usize::from(seen <= extra)
        } else {
            1
        };
        out.extend(std::iter::repeat_n(s.clone(), k));
    }
    Ok(BalancedIndex { samples: out })
}

/// Strict-improvement early stopping on a loss to be minimized.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub max_epochs: usize,
    best: Option<(usize, f64)>,
    epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// New best; keep this epoch's model.
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        Self { patience, max_epochs, best: None, epoch: 0 }
    }

    /// Records the loss of the next epoch (epochs count from 1).
    pub fn observe(&mut self, loss: f64) -> Decision {
        self.epoch += 1;
        let improved = match self.best {
            None => true,
            Some((_, b)) => loss < b,
        };
        if improved {
            self.best = Some((self.epoch, loss));
        }
        let best_epoch = self.best.map_or(0, |b| b.0);
        if self.epoch >= self.max_epochs || self.epoch - best_epoch >= self.patience {
            Decision::Stop
        } else if improved {
            Decision::Improved
        } else {
            Decision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best.map_or(0, |b| b.0)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

/// Feeds `losses` through [`EarlyStopping`]; returns (best, stopped)
/// epochs, or `None` if the sequence ends before the stop.
pub fn simulate_early_stopping(losses: &[f64], patience: usize, max_epochs: usize) -> Option<(usize, usize)> {
    let mut es = EarlyStopping::new(patience, max_epochs);
    for &l in losses {
        if es.observe(l) == Decision::Stop {
            return Some((es.best_epoch(), es.epoch()));
        }
    }
    None
}

/// What the validation loss of a fold measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// 1 − AUC.
    Auc,
    /// Mean validation cross-entropy, used when the validation fold holds
    /// a single class and AUC is undefined.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub fold_id: u8,
    pub epoch_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub monitor: Monitor,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub seed: u64,
}

/// ⌈mean best epoch⌉ over exactly five fold runs.
pub fn average_epochs(runs: &[TrainingRun]) -> Result<usize, TrainError> {
    average_best_epochs(&runs.iter().map(|r| r.best_epoch).collect::<Vec<_>>())
}

pub fn average_best_epochs(best: &[usize]) -> Result<usize, TrainError> {
    let k = NUM_FOLDS as usize;
    if best.len() != k {
        return Err(TrainError::WrongFoldCount { expected: k, got: best.len() });
    }
    Ok(best.iter().sum::<usize>().div_ceil(k))
}

/// Per-patient metadata the trainer needs.
/// Stacked inputs per modality and the optional sex column.
type Batch = (Vec<Tensor<f32>>, Option<Vec<f32>>);

#[derive(Debug, Clone)]
struct PatientInfo {
    sex: f32,
    label: Label,
}

/// Holds a model and its optimizer and runs epochs over a frame store.
pub struct Trainer<'a> {
    config: TrainConfig,
    store: &'a FrameStore,
    patients: HashMap<String, PatientInfo>,
    pub checkpoint: Checkpoint,
    updates: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &TrainConfig, store: &'a FrameStore, records: &[PatientRecord]) -> Result<Self, TrainError> {
        config.validate()?;
        if store.modalities() != config.model.modalities.as_slice() {
            return Err(TrainError::InvalidConfig(format!(
                "store holds {:?}, model wants {:?}",
                store.modalities(),
                config.model.modalities
            )));
        }
        let patients =
            records.iter().map(|r| (r.patient_id.clone(), PatientInfo { sex: r.sex.encode(), label: r.label })).collect();
        Ok(Self {
            config: config.clone(),
            store,
            patients,
            checkpoint: Checkpoint::fresh(&config.model, config.adam())?,
            updates: 0,
        })
    }

    /// Parameter updates performed so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    fn info(&self, id: &str) -> Result<&PatientInfo, TrainError> {
        self.patients.get(id).ok_or_else(|| CacheError::CacheMiss(format!("no record for patient {id}")).into())
    }

    /// Every cached frame of `patients`, in (patient, frame) order.
    pub fn samples_of(&self, patients: &[String]) -> Result<Vec<Sample>, TrainError> {
        let mut out = Vec::new();
        for id in patients {
            for frame in 0..self.store.frame_count(id)? {
                out.push(Sample { patient_id: id.clone(), frame });
            }
        }
        Ok(out)
    }

    pub fn balanced(&self, patients: &[String]) -> Result<BalancedIndex, TrainError> {
        let samples = self.samples_of(patients)?;
        for s in &samples {
            self.info(&s.patient_id)?;
        }
        balance_training_set(&samples, |s| self.patients[&s.patient_id].label == Label::Positive)
    }

    fn batch(&self, samples: &[Sample]) -> Result<Batch, TrainError> {
        let frames = samples.iter().map(|s| self.store.sample(&s.patient_id, s.frame)).collect::<Result<Vec<_>, _>>()?;
        let inputs = stack_frames(&self.config.model, &frames)?;
        let sex = if self.config.model.use_sex {
            Some(samples.iter().map(|s| self.info(&s.patient_id).map(|i| i.sex)).collect::<Result<_, _>>()?)
        } else {
            None
        };
        Ok((inputs, sex))
    }

    /// One pass over `index` in an order shuffled by (seed, epoch); the
    /// final partial batch is kept. Returns the mean training loss.
    pub fn run_epoch(&mut self, epoch: usize, index: &BalancedIndex) -> Result<f64, TrainError> {
        let seed = self.config.seed();
        let mut order = index.samples.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, &[10, epoch as u64])));
        let mut total = 0.0f64;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let (inputs, sex) = self.batch(chunk)?;
            let targets: Vec<usize> = chunk
                .iter()
                .map(|s| self.info(&s.patient_id).map(|i| usize::from(i.label == Label::Positive)))
                .collect::<Result<_, _>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[11, epoch as u64, b as u64]));
            let Checkpoint { network, optimizer } = &mut self.checkpoint;
            network.zero_grad();
            let loss = network.train_step(&inputs, sex.as_deref(), &targets, &mut rng).map_err(|e| match e {
                ModelError::Nn(NnError::NonFiniteLoss) => TrainError::NonFiniteLoss { epoch },
                e => e.into(),
            })?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            let mut params: Vec<&mut Tensor<f32>> = network.params_mut().into_iter().map(|(_, t)| t).collect();
            optimizer.step(&mut params)?;
            self.updates += 1;
            total += loss as f64 * chunk.len() as f64;
        }
        Ok(total / index.samples.len() as f64)
    }

    /// Positive-class probability of every frame of `patients`, grouped by
    /// patient.
    pub fn frame_probabilities(&mut self, patients: &[String]) -> Result<Vec<Vec<f64>>, TrainError> {
        let samples = self.samples_of(patients)?;
        let mut probs = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.batch_size) {
            let (inputs, sex) = self.batch(chunk)?;
            probs.extend(self.checkpoint.network.predict(&inputs, sex.as_deref())?.into_iter().map(f64::from));
        }
        let mut out = Vec::with_capacity(patients.len());
        let mut it = probs.into_iter();
        for id in patients {
            out.push(it.by_ref().take(self.store.frame_count(id)?).collect());
        }
        Ok(out)
    }

    /// Patient-level scores (mean frame probability).
    pub fn score(&mut self, patients: &[String]) -> Result<Vec<ScoredPatient>, TrainError> {
        let probs = self.frame_probabilities(patients)?;
        patients.iter().zip(probs).map(|(id, p)| Ok(aggregate_patient_scores(id, &p, self.info(id)?.label)?)).collect()
    }

    /// Validation loss under `monitor`, and the patient-level scores.
    fn validate(&mut self, patients: &[String], monitor: Monitor) -> Result<(f64, Vec<ScoredPatient>), TrainError> {
        let probs = self.frame_probabilities(patients)?;
        let mut scored = Vec::with_capacity(patients.len());
        let mut frames = Vec::new();
        let (mut ce, mut n) = (0.0f64, 0usize);
        for (id, p) in patients.iter().zip(&probs) {
            let label = self.info(id)?.label;
            scored.push(aggregate_patient_scores(id, p, label)?);
            for (k, &q) in p.iter().enumerate() {
                frames.push(ScoredPatient { patient_id: format!("{id}#{k}"), score: q, label });
                let pt = if label == Label::Positive { q } else { 1.0 - q };
                ce -= pt.max(f64::MIN_POSITIVE).ln();
                n += 1;
            }
        }
        let loss = match monitor {
            Monitor::CrossEntropy => ce / n as f64,
            Monitor::Auc => match self.config.validation {
                ValidationLevel::Patient => 1.0 - roc_auc(&scored)?,
                ValidationLevel::Frame => 1.0 - roc_auc(&frames)?,
            },
        };
        Ok((loss, scored))
    }
}

/// Outcome of one fold.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub run: TrainingRun,
    /// Model and optimizer state at the best epoch.
    pub best: Checkpoint,
    /// Validation scores of the best checkpoint.
    pub validation: Vec<ScoredPatient>,
}

fn has_both_classes(labels: impl Iterator<Item = Label>) -> bool {
    let v: Vec<Label> = labels.collect();
    v.contains(&Label::Positive) && v.contains(&Label::Negative)
}

/// Trains on `plan.train` until validation loss stops improving.
pub fn train_fold(
    plan: &FoldPlan,
    config: &TrainConfig,
    store: &FrameStore,
    records: &[PatientRecord],
) -> Result<FoldResult, TrainError> {
    let mut trainer = Trainer::new(config, store, records)?;
    let index = trainer.balanced(&plan.train)?;
    let monitor =
        if has_both_classes(plan.validation.iter().map(|id| trainer.patients.get(id).map_or(Label::Unknown, |i| i.label))) {
            Monitor::Auc
        } else {
            Monitor::CrossEntropy
        };
    let mut es = EarlyStopping::new(config.patience, config.max_epochs);
    let (mut epoch_losses, mut val_losses) = (Vec::new(), Vec::new());
    let mut best = None;
    for epoch in 1..=config.max_epochs {
        epoch_losses.push(trainer.run_epoch(epoch, &index)?);
        let (loss, scored) = trainer.validate(&plan.validation, monitor)?;
        val_losses.push(loss);
        let decision = es.observe(loss);
        if es.best_epoch() == epoch {
            best = Some((trainer.checkpoint.clone(), scored));
        }
        if decision == Decision::Stop {
            break;
        }
    }
    let (best, validation) = best.expect("at least one epoch");
    let run = TrainingRun {
        fold_id: plan.fold_id,
        epoch_losses,
        stopped_epoch: es.epoch(),
        val_losses,
        monitor,
        best_epoch: es.best_epoch(),
        seed: config.seed(),
    };
    Ok(FoldResult { run, best, validation })
}

#[derive(Debug, Clone)]
pub struct FinalResult {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
    pub updates: usize,
}

/// Trains on every training-partition patient for exactly `epochs` epochs.
pub fn train_final(
    config: &TrainConfig,
    epochs: usize,
    store: &FrameStore,
    records: &[PatientRecord],
) -> Result<FinalResult, TrainError> {
    if epochs == 0 {
        return Err(TrainError::InvalidConfig("final epochs must be at least 1".into()));
    }
    let mut trainer = Trainer::new(config, store, records)?;
    let mut ids: Vec<String> = records.iter().filter(|r| r.partition == Partition::Train).map(|r| r.patient_id.clone()).collect();
    ids.sort();
    let index = trainer.balanced(&ids)?;
    let epoch_losses = (1..=epochs).map(|e| trainer.run_epoch(e, &index)).collect::<Result<Vec<_>, _>>()?;
    Ok(FinalResult { updates: trainer.updates(), checkpoint: trainer.checkpoint, epoch_losses })
}

/// Every fold of one configuration.
#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
}

impl CrossValidation {
    pub fn runs(&self) -> Vec<TrainingRun> {
        self.folds.iter().map(|f| f.run.clone()).collect()
    }

    pub fn validation_scores(&self) -> Vec<Vec<ScoredPatient>> {
        self.folds.iter().map(|f| f.validation.clone()).collect()
    }

    pub fn final_epochs(&self) -> Result<usize, TrainError> {
        average_epochs(&self.runs())
    }
}

/// Runs all folds; `on_fold` sees each result as it completes.
pub fn cross_validate(
    config: &TrainConfig,
    store: &FrameStore,
    records: &[PatientRecord],
    mut on_fold: impl FnMut(&FoldResult) -> Result<(), TrainError>,
) -> Result<CrossValidation, TrainError> {
    let mut folds = Vec::new();
    for plan in fold_plans(records)? {
        let result = train_fold(&plan, config, store, records)?;
        on_fold(&result)?;
        folds.push(result);
    }
    Ok(CrossValidation { folds })
}

pub fn fold_dir(run_dir: &Path, fold: u8) -> PathBuf {
    run_dir.join(format!("fold{fold}"))
}

pub fn final_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("final")
}

pub const CHECKPOINT_FILE: &str = "checkpoint.rfus";

pub fn write_history(path: &Path, run: &TrainingRun) -> Result<(), TrainError> {
    let mut text = String::from("epoch,train_loss,val_auc\n");
    for (e, (tl, vl)) in run.epoch_losses.iter().zip(&run.val_losses).enumerate() {
        let auc = match run.monitor {
            Monitor::Auc => format!("{:.6}", 1.0 - vl),
            Monitor::CrossEntropy => String::new(),
        };
        text.push_str(&format!("{},{tl:.6},{auc}\n", e + 1));
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_config(run_dir: &Path, config: &TrainConfig) -> Result<(), TrainError> {
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let path = run_dir.join("config.json");
    let mut text = serde_json::to_string_pretty(config).expect("serializable");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_config(run_dir: &Path) -> Result<TrainConfig, TrainError> {
    let path = run_dir.join("config.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| TrainError::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Summary of a full training run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub runs: Vec<TrainingRun>,
    pub pooled_validation: Vec<Vec<ScoredPatient>>,
    /// Epoch count and update count of the final model, if one was trained.
    pub final_model: Option<(usize, usize)>,
}

/// Cross-validates, optionally trains the final model, and writes the run
/// directory.
pub fn run_training(
    config: &TrainConfig,
    store: &FrameStore,
    records: &[PatientRecord],
    run_dir: &Path,
    final_model: bool,
) -> Result<RunSummary, TrainError> {
    write_config(run_dir, config)?;
    let cv = cross_validate(config, store, records, |f| {
        let dir = fold_dir(run_dir, f.run.fold_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &f.best)?;
        write_history(&dir.join("history.csv"), &f.run)
    })?;
    let mut summary = RunSummary { runs: cv.runs(), pooled_validation: cv.validation_scores(), final_model: None };
    if final_model {
        let epochs = match config.final_epochs {
            Some(e) => e,
            None => cv.final_epochs()?,
        };
        let fin = train_final(config, epochs, store, records)?;
        let dir = final_dir(run_dir);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &fin.checkpoint)?;
        summary.final_model = Some((epochs, fin.updates));
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(p: usize, n: usize) -> Vec<(Sample, bool)> {
        (0..p)
            .map(|i| (Sample { patient_id: format!("a{i:03}"), frame: 0 }, true))
            .chain((0..n).map(|i| (Sample { patient_id: format!("b{i:03}"), frame: 0 }, false)))
            .collect()
    }

    fn balance(p: usize, n: usize) -> BalancedIndex {
        let s = samples(p, n);
        let pos: HashMap<Sample, bool> = s.iter().cloned().collect();
        balance_training_set(&s.iter().map(|x| x.0.clone()).collect::<Vec<_>>(), |x| pos[x]).unwrap()
    }

    #[test]
    fn replication_counts() {
        let b = balance(4, 10);
        let count = |id: &str| b.samples.iter().filter(|s| s.patient_id == id).count();
        assert_eq!([count("a000"), count("a001"), count("a002"), count("a003")], [3, 3, 2, 2]);
        assert_eq!(b.samples.len(), 20);
        let b = balance(172, 793);
        let counts: Vec<usize> =
            (0..172).map(|i| b.samples.iter().filter(|s| s.patient_id == format!("a{i:03}")).count()).collect();
        assert!(counts[..105].iter().all(|&c| c == 5) && counts[105..].iter().all(|&c| c == 4));
    }

    #[test]
    fn balanced_input_unchanged() {
        let b = balance(3, 3);
        assert_eq!(b.samples.len(), 6);
    }

    #[test]
    fn single_class_rejected() {
        let s = vec![Sample { patient_id: "a".into(), frame: 0 }];
        assert!(matches!(balance_training_set(&s, |_| true), Err(TrainError::SingleClass { .. })));
    }

    #[test]
    fn patience_arithmetic() {
        let mut losses = vec![0.5, 0.4];
        losses.extend(std::iter::repeat_n(0.4, 15));
        assert_eq!(simulate_early_stopping(&losses, 15, 100), Some((2, 17)));
        let improving: Vec<f64> = (0..100).map(|i| 1.0 - i as f64 / 100.0).collect();
        assert_eq!(simulate_early_stopping(&improving, 15, 100), Some((100, 100)));
    }

    #[test]
    fn epoch_averaging() {
        assert_eq!(average_best_epochs(&[12, 15, 20, 9, 14]).unwrap(), 14);
        assert_eq!(average_best_epochs(&[12, 15, 20, 10, 14]).unwrap(), 15);
        assert_eq!(average_best_epochs(&[1, 1, 1, 1, 1]).unwrap(), 1);
        assert!(matches!(average_best_epochs(&[1, 2]), Err(TrainError::WrongFoldCount { .. })));
    }
}
