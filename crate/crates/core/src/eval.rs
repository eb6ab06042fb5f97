//! Patient-level scoring, ROC AUC and results tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Label;
use crate::model::ModelConfig;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("patient {0} has no frame scores")]
    EmptyFrameSet(String),
    #[error("AUC needs both classes; got {positives} positive and {negatives} negative patients")]
    SingleClass { positives: usize, negatives: usize },
    #[error("patient {0} has an unknown label")]
    UnknownLabel(String),
    #[error("patient {0} has a non-finite score")]
    NonFiniteScore(String),
    #[error("expected {expected} folds, got {got}")]
    MissingFold { expected: usize, got: usize },
    #[error("patient {0} is scored more than once")]
    DuplicatePatient(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {reason}")]
    BadReport { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPatient {
    pub patient_id: String,
    /// Positive-class probability.
    pub score: f64,
    pub label: Label,
}

/// Mean of a patient's per-frame positive-class probabilities.
pub fn aggregate_patient_scores(patient_id: &str, frame_probs: &[f64], label: Label) -> Result<ScoredPatient, EvalError> {
    if frame_probs.is_empty() {
        return Err(EvalError::EmptyFrameSet(patient_id.into()));
    }
    let score = frame_probs.iter().sum::<f64>() / frame_probs.len() as f64;
    Ok(ScoredPatient { patient_id: patient_id.into(), score, label })
}

/// Mann–Whitney AUC: the share of positive/negative pairs ranked
/// correctly, ties counting one half. Computed from rank sums in
/// O(n log n) with an exact integer numerator in half-pair units.
pub fn roc_auc(scored: &[ScoredPatient]) -> Result<f64, EvalError> {
    let mut v: Vec<(f64, bool)> = Vec::with_capacity(scored.len());
    for s in scored {
        if !s.score.is_finite() {
            return Err(EvalError::NonFiniteScore(s.patient_id.clone()));
        }
        match s.label {
            Label::Positive => v.push((s.score, true)),
            Label::Negative => v.push((s.score, false)),
            Label::Unknown => return Err(EvalError::UnknownLabel(s.patient_id.clone())),
        }
    }
    let positives = v.iter().filter(|x| x.1).count() as u64;
    let negatives = v.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives: positives as usize, negatives: negatives as usize });
    }
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut half_pairs, mut below_neg) = (0u64, 0u64);
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < v.len() && v[j].0 == v[i].0 {
            if v[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        half_pairs += 2 * p * below_neg + p * n;
        below_neg += n;
        i = j;
    }
    Ok(half_pairs as f64 / (2 * positives * negatives) as f64)
}

fn check_folds(folds: &[Vec<ScoredPatient>], expected: usize) -> Result<(), EvalError> {
    if folds.len() != expected || folds.iter().any(|f| f.is_empty()) {
        return Err(EvalError::MissingFold { expected, got: folds.iter().filter(|f| !f.is_empty()).count() });
    }
    let mut seen = HashSet::new();
    for s in folds.iter().flatten() {
        if !seen.insert(s.patient_id.as_str()) {
            return Err(EvalError::DuplicatePatient(s.patient_id.clone()));
        }
    }
    Ok(())
}

/// One AUC over the concatenated validation scores of all folds.
pub fn pooled_validation_auc(folds: &[Vec<ScoredPatient>], expected_folds: usize) -> Result<f64, EvalError> {
    check_folds(folds, expected_folds)?;
    roc_auc(&folds.concat())
}

/// Mean of the per-fold AUCs.
pub fn averaged_validation_auc(folds: &[Vec<ScoredPatient>], expected_folds: usize) -> Result<f64, EvalError> {
    check_folds(folds, expected_folds)?;
    let aucs = folds.iter().map(|f| roc_auc(f)).collect::<Result<Vec<_>, _>>()?;
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Row order of the results table.
pub const ROWS: [&str; 7] = ["C", "B", "S", "C⊗B", "C⊗S", "B⊗S", "C⊗B⊗S"];
/// Column order of the results table.
pub const VARIANTS: [&str; 4] = ["Baseline", "Sex", "C.Att.", "Sex & C.Att."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSet {
    Val,
    Test,
}

impl EvalSet {
    pub fn name(self) -> &'static str {
        match self {
            EvalSet::Val => "val",
            EvalSet::Test => "test",
        }
    }

    fn display(self) -> &'static str {
        match self {
            EvalSet::Val => "Val.",
            EvalSet::Test => "Test",
        }
    }
}

impl std::str::FromStr for EvalSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "val" => Ok(EvalSet::Val),
            "test" => Ok(EvalSet::Test),
            other => Err(format!("unknown set {other:?}, expected val or test")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub row: usize,
    pub variant: usize,
    pub set: EvalSet,
}

impl CellKey {
    pub fn new(modalities: &str, variant: &str, set: EvalSet) -> Option<Self> {
        Some(Self {
            row: ROWS.iter().position(|r| *r == modalities)?,
            variant: VARIANTS.iter().position(|v| *v == variant)?,
            set,
        })
    }

    pub fn for_config(config: &ModelConfig, set: EvalSet) -> Self {
        Self::new(&config.modality_label(), config.variant_label(), set).expect("every config has a cell")
    }
}

/// AUC percentages keyed by (modality row, variant, set).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub cells: BTreeMap<CellKey, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    modalities: String,
    variant: String,
    set: EvalSet,
    auc_percent: f64,
}

impl ResultsTable {
    /// Stores `auc` (in [0, 1]) as a percentage.
    pub fn insert(&mut self, key: CellKey, auc: f64) {
        self.cells.insert(key, 100.0 * auc);
    }

    pub fn get(&self, key: &CellKey) -> Option<f64> {
        self.cells.get(key).copied()
    }

    pub fn merge(&mut self, other: &ResultsTable) {
        self.cells.extend(other.cells.iter().map(|(k, v)| (k.clone(), *v)));
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (k, v) in &self.cells {
            w.serialize(CsvRow {
                modalities: ROWS[k.row].into(),
                variant: VARIANTS[k.variant].into(),
                set: k.set,
                auc_percent: (v * 1e4).round() / 1e4,
            })
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
    }

    pub fn parse_csv(text: &str) -> Result<Self, String> {
        let mut table = Self::default();
        for (i, row) in csv::Reader::from_reader(text.as_bytes()).deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(|e| format!("row {}: {e}", i + 1))?;
            let key = CellKey::new(&row.modalities, &row.variant, row.set)
                .ok_or_else(|| format!("row {}: unknown cell {} / {}", i + 1, row.modalities, row.variant))?;
            if !(0.0..=100.0).contains(&row.auc_percent) {
                return Err(format!("row {}: AUC {} outside [0, 100]", i + 1, row.auc_percent));
            }
            table.cells.insert(key, row.auc_percent);
        }
        Ok(table)
    }

    /// Fixed-width table, one line per (row, set), "--" for empty cells.
    pub fn render(&self) -> String {
        let widths = [11, 5, 9, 9, 9, 13];
        let mut out = String::new();
        let header = ["Sound types", "Set"].iter().chain(VARIANTS.iter()).copied();
        for (h, w) in header.zip(widths) {
            let _ = write!(out, "{h:<w$} ");
        }
        out = out.trim_end().to_string();
        out.push('\n');
        for (r, name) in ROWS.iter().enumerate() {
            for (i, set) in [EvalSet::Val, EvalSet::Test].into_iter().enumerate() {
                let mut line = format!("{:<11} {:<5} ", if i == 0 { *name } else { "" }, set.display());
                for (v, w) in (0..VARIANTS.len()).zip(&widths[2..]) {
                    let cell = self.get(&CellKey { row: r, variant: v, set }).map_or("--".to_string(), |x| format!("{x:.2}"));
                    let _ = write!(line, "{cell:<w$} ");
                }
                out.push_str(line.trim_end());
                out.push('\n');
            }
        }
        out
    }
}

/// Merges `table` into `<dir>/results.csv` (keeping cells it does not
/// touch), rewrites the CSV and `<dir>/results.txt`, and returns the
/// merged table.
pub fn write_report(table: &ResultsTable, dir: &Path) -> Result<ResultsTable, EvalError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let csv_path = dir.join("results.csv");
    let mut merged = if csv_path.is_file() {
        let text = fs::read_to_string(&csv_path).map_err(io(&csv_path))?;
        ResultsTable::parse_csv(&text).map_err(|reason| EvalError::BadReport { path: csv_path.clone(), reason })?
    } else {
        ResultsTable::default()
    };
    merged.merge(table);
    fs::write(&csv_path, merged.to_csv()).map_err(io(&csv_path))?;
    let txt = dir.join("results.txt");
    fs::write(&txt, merged.render()).map_err(io(&txt))?;
    Ok(merged)
}
