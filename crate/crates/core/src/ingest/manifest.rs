//! Dataset manifest: one CSV row per patient.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::IngestError;

pub const MANIFEST_HEADER: [&str; 8] =
    ["patient_id", "cough_path", "breath_path", "speech_path", "sex", "label", "partition", "fold"];

pub const NUM_FOLDS: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoundType {
    Cough,
    Breath,
    Speech,
}

impl SoundType {
    pub const ALL: [SoundType; 3] = [SoundType::Cough, SoundType::Breath, SoundType::Speech];

    pub fn letter(self) -> char {
        match self {
            SoundType::Cough => 'C',
            SoundType::Breath => 'B',
            SoundType::Speech => 'S',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'C' => Some(SoundType::Cough),
            'B' => Some(SoundType::Breath),
            'S' => Some(SoundType::Speech),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SoundType::Cough => "cough",
            SoundType::Breath => "breath",
            SoundType::Speech => "speech",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SoundType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SoundType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cough" => Ok(SoundType::Cough),
            "breath" => Ok(SoundType::Breath),
            "speech" => Ok(SoundType::Speech),
            other => Err(format!("unknown sound type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    /// Scalar encoding fed to the classifier: female 0, male 1.
    pub fn encode(self) -> f32 {
        match self {
            Sex::Female => 0.0,
            Sex::Male => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub cough_path: PathBuf,
    pub breath_path: PathBuf,
    pub speech_path: PathBuf,
    pub sex: Sex,
    pub label: Label,
    pub partition: Partition,
    pub fold: Option<u8>,
}

impl PatientRecord {
    pub fn path(&self, sound: SoundType) -> &Path {
        match sound {
            SoundType::Cough => &self.cough_path,
            SoundType::Breath => &self.breath_path,
            SoundType::Speech => &self.speech_path,
        }
    }

    /// Checks the cross-field invariants of a record.
    pub fn validate(&self) -> Result<(), String> {
        if self.patient_id.is_empty() {
            return Err("empty patient_id".into());
        }
        for sound in SoundType::ALL {
            if self.path(sound).as_os_str().is_empty() {
                return Err(format!("{}: missing {sound} path", self.patient_id));
            }
        }
        if self.label == Label::Unknown && self.partition != Partition::Test {
            return Err(format!("{}: label unknown outside the test partition", self.patient_id));
        }
        match (self.partition, self.fold) {
            (Partition::Train, None) => Err(format!("{}: training record without fold", self.patient_id)),
            (Partition::Test, Some(_)) => Err(format!("{}: test record with a fold", self.patient_id)),
            (_, Some(f)) if f >= NUM_FOLDS => Err(format!("{}: fold {f} out of range", self.patient_id)),
            _ => Ok(()),
        }
    }
}

fn sex_str(sex: Sex) -> &'static str {
    match sex {
        Sex::Female => "f",
        Sex::Male => "m",
    }
}

fn label_str(label: Label) -> &'static str {
    match label {
        Label::Positive => "positive",
        Label::Negative => "negative",
        Label::Unknown => "unknown",
    }
}

fn partition_str(p: Partition) -> &'static str {
    match p {
        Partition::Train => "train",
        Partition::Test => "test",
    }
}

/// Parses a manifest. Relative audio paths are resolved against the
/// manifest's directory.
pub fn parse_manifest(path: &Path) -> Result<Vec<PatientRecord>, IngestError> {
    let unreadable = |e: &dyn fmt::Display| IngestError::UnreadableFile { path: path.to_path_buf(), reason: e.to_string() };
    let mut reader =
        csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path).map_err(|e| unreadable(&e))?;
    let headers = reader.headers().map_err(|e| unreadable(&e))?.clone();
    let mut columns = [0usize; 8];
    for (slot, name) in columns.iter_mut().zip(MANIFEST_HEADER) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| IngestError::MissingColumn(name.to_string()))?;
    }
    if headers.len() != MANIFEST_HEADER.len() {
        let extra = headers.iter().find(|h| !MANIFEST_HEADER.contains(h)).unwrap_or("");
        return Err(IngestError::BadRow { line: 1, reason: format!("unexpected column {extra:?}") });
    }
    let base = path.parent().unwrap_or(Path::new("."));

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| unreadable(&e))?;
        let field = |k: usize| row.get(columns[k]).unwrap_or("");
        let bad = |reason: String| IngestError::BadRow { line, reason };

        let patient_id = field(0).to_string();
        let resolve = |s: &str| {
            if s.is_empty() {
                PathBuf::new()
            } else {
                base.join(s)
            }
        };
        let sex = match field(4) {
            "f" => Sex::Female,
            "m" => Sex::Male,
            other => return Err(bad(format!("sex {other:?} not in {{f,m}}"))),
        };
        let label = match field(5) {
            "positive" => Label::Positive,
            "negative" => Label::Negative,
            "unknown" => Label::Unknown,
            other => return Err(bad(format!("label {other:?}"))),
        };
        let partition = match field(6) {
            "train" => Partition::Train,
            "test" => Partition::Test,
            other => return Err(bad(format!("partition {other:?}"))),
        };
        let fold = match field(7) {
            "" => None,
            s => match s.parse::<u8>() {
                Ok(f) if f < NUM_FOLDS => Some(f),
                _ => return Err(IngestError::BadFoldIndex { line, value: s.to_string() }),
            },
        };
        let record = PatientRecord {
            patient_id,
            cough_path: resolve(field(1)),
            breath_path: resolve(field(2)),
            speech_path: resolve(field(3)),
            sex,
            label,
            partition,
            fold,
        };
        if partition == Partition::Train && fold.is_none() {
            return Err(IngestError::BadFoldIndex { line, value: String::new() });
        }
        record.validate().map_err(bad)?;
        if !seen.insert(record.patient_id.clone()) {
            return Err(IngestError::DuplicatePatient(record.patient_id));
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records as a manifest. Audio paths are written relative to the
/// manifest directory when they live beneath it.
pub fn write_manifest(path: &Path, records: &[PatientRecord]) -> Result<(), IngestError> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = String::new();
    out.push_str(&MANIFEST_HEADER.join(","));
    out.push('\n');
    for r in records {
        let rel = |p: &Path| -> String { p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/") };
        let fold = r.fold.map(|f| f.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.patient_id,
            rel(&r.cough_path),
            rel(&r.breath_path),
            rel(&r.speech_path),
            sex_str(r.sex),
            label_str(r.label),
            partition_str(r.partition),
            fold
        ));
    }
    let mut f = File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("manifest.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    const HEADER: &str = "patient_id,cough_path,breath_path,speech_path,sex,label,partition,fold\n";

    #[test]
    fn maps_row_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &format!("{HEADER}p001,a.wav,b.wav,c.wav,m,positive,train,2\n"));
        let recs = parse_manifest(&p).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.patient_id, "p001");
        assert_eq!(r.sex, Sex::Male);
        assert_eq!(r.label, Label::Positive);
        assert_eq!(r.partition, Partition::Train);
        assert_eq!(r.fold, Some(2));
        assert_eq!(r.cough_path, dir.path().join("a.wav"));
    }

    #[test]
    fn unknown_label_in_test_partition() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &format!("{HEADER}t1,a.wav,b.wav,c.wav,f,unknown,test,\n"));
        let recs = parse_manifest(&p).unwrap();
        assert_eq!(recs[0].label, Label::Unknown);
        assert_eq!(recs[0].fold, None);
    }

    #[test]
    fn unknown_label_in_train_partition_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &format!("{HEADER}t1,a.wav,b.wav,c.wav,f,unknown,train,1\n"));
        assert!(matches!(parse_manifest(&p), Err(IngestError::BadRow { .. })));
    }

    #[test]
    fn duplicate_patient() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            &format!("{HEADER}p001,a.wav,b.wav,c.wav,m,positive,train,2\np001,d.wav,e.wav,f.wav,f,negative,train,1\n"),
        );
        assert!(matches!(parse_manifest(&p), Err(IngestError::DuplicatePatient(id)) if id == "p001"));
    }

    #[test]
    fn bad_fold() {
        let dir = tempfile::tempdir().unwrap();
        for fold in ["5", "-1", "x", ""] {
            let p = write(dir.path(), &format!("{HEADER}p1,a.wav,b.wav,c.wav,m,negative,train,{fold}\n"));
            assert!(matches!(parse_manifest(&p), Err(IngestError::BadFoldIndex { .. })), "fold {fold:?}");
        }
    }

    #[test]
    fn missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "patient_id,cough_path,breath_path,sex,label,partition,fold\np1,a,b,m,negative,train,0\n");
        assert!(matches!(parse_manifest(&p), Err(IngestError::MissingColumn(c)) if c == "speech_path"));
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(parse_manifest(&dir.path().join("nope.csv")), Err(IngestError::UnreadableFile { .. })));
    }
}
