//! Command-line driver: synthesize data, preprocess, train, evaluate and
//! gradient-check.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use respfuse::cache::{preprocess, FrameCache, FrameStore};
use respfuse::eval::{pooled_validation_auc, roc_auc, write_report, CellKey, EvalSet, ResultsTable, ScoredPatient};
use respfuse::ingest::{generate_with, parse_manifest, Label, Partition, PatientRecord, SoundType, SynthConfig, NUM_FOLDS};
use respfuse::model::{load_checkpoint_for, ModelConfig};
use respfuse::selfcheck::{self, CHECKS};
use respfuse::train::{final_dir, fold_dir, fold_plans, read_config, run_training, TrainConfig, Trainer, CHECKPOINT_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "respfuse", version, about = "Multimodal respiratory-sound screening pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Turn every recording into cached spectrogram frames.
    Preprocess(PreprocessArgs),
    /// Cross-validate a configuration and train its final model.
    Train(TrainArgs),
    /// Score the validation folds or the test set and update results.csv.
    Eval(EvalArgs),
    /// Check every backward pass against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Training-partition patients (even, at least 4).
    #[arg(long)]
    pub patients: usize,
    /// Held-out test patients with known labels (even).
    #[arg(long, default_value_t = 0)]
    pub test_patients: usize,
    #[arg(long)]
    pub seed: u64,
    /// Make cough uninformative and split the class signal between breath
    /// and speech.
    #[arg(long)]
    pub split_breath_speech: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    /// Worker threads; the output does not depend on this.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Comma-separated sound types, e.g. `B,S`.
    #[arg(long, value_parser = parse_modalities)]
    pub modalities: Modalities,
    #[arg(long)]
    pub sex: bool,
    #[arg(long)]
    pub attention: bool,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub run_dir: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Final-model epochs instead of the fold mean.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epoch cap per fold.
    #[arg(long, default_value_t = respfuse::train::MAX_EPOCHS)]
    pub max_epochs: usize,
    /// Stop after cross-validation; no final model.
    #[arg(long)]
    pub no_final: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, value_parser = parse_set)]
    pub set: EvalSet,
    /// Directory holding results.csv and results.txt; the run directory
    /// by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Scale one check's analytic gradients by 1.5 to confirm the checker
    /// catches it.
    #[arg(long)]
    pub corrupt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Modalities(pub Vec<SoundType>);

fn parse_modalities(s: &str) -> Result<Modalities, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        let mut chars = part.chars();
        let sound = match (chars.next(), chars.next()) {
            (Some(c), None) => SoundType::from_letter(c.to_ascii_uppercase()),
            _ => None,
        }
        .ok_or_else(|| format!("unknown sound type {part:?}; use C, B or S"))?;
        if out.contains(&sound) {
            return Err(format!("{part} listed twice"));
        }
        out.push(sound);
    }
    Ok(Modalities(out))
}

fn parse_set(s: &str) -> Result<EvalSet, String> {
    s.parse()
}

/// An invalid combination of otherwise well-formed arguments.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A check ran to completion and failed.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Exit code for an error returned by [`execute`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else if err.downcast_ref::<CheckFailed>().is_some() {
        EXIT_CHECK
    } else {
        EXIT_DATA
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Preprocess(a) => cmd_preprocess(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
    }
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    if a.patients < 4 || !a.patients.is_multiple_of(2) {
        bail!(UsageError(format!("--patients must be even and at least 4, got {}", a.patients)));
    }
    if !a.test_patients.is_multiple_of(2) {
        bail!(UsageError(format!("--test-patients must be even, got {}", a.test_patients)));
    }
    let mut cfg = if a.split_breath_speech {
        SynthConfig::split_breath_speech(a.patients, a.seed)
    } else {
        SynthConfig::new(a.patients, a.seed)
    };
    cfg.n_test = a.test_patients;
    let manifest = generate_with(&cfg, &a.out)?;
    writeln!(out, "seed {}: wrote {} patients to {}", a.seed, a.patients + a.test_patients, manifest.display())?;
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Vec<PatientRecord>> {
    parse_manifest(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn cmd_preprocess(a: &PreprocessArgs, out: &mut dyn Write) -> Result<()> {
    if a.workers == 0 {
        bail!(UsageError("--workers must be at least 1".into()));
    }
    let records = load_manifest(&a.manifest)?;
    let report = preprocess(&records, &a.cache, a.workers)?;
    writeln!(
        out,
        "{} patients: {} computed, {} reused; {} frames per sound type",
        records.len(),
        report.computed,
        report.reused,
        report.frames
    )?;
    for s in &report.stats {
        writeln!(out, "{}: mu {:.6?} sigma {:.6?}", s.sound_type, s.mu, s.sigma)?;
    }
    Ok(())
}

fn model_config(m: &ModelArgs) -> Result<ModelConfig> {
    ModelConfig::new(&m.modalities.0, m.attention, m.sex, m.seed).map_err(|e| UsageError(e.to_string()).into())
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    if a.epochs == Some(0) || a.max_epochs == 0 {
        bail!(UsageError("epoch counts must be at least 1".into()));
    }
    let model = model_config(&a.model)?;
    let mut config = TrainConfig::new(model.clone());
    config.final_epochs = a.epochs;
    config.max_epochs = a.max_epochs;
    let records = load_manifest(&a.manifest)?;
    let train: Vec<PatientRecord> = records.iter().filter(|r| r.partition == Partition::Train).cloned().collect();
    let cache = FrameCache::open(&a.cache)?;
    let store = FrameStore::load(&cache, &train, &model.modalities)?;
    writeln!(out, "training {} ({}), seed {}", model.modality_label(), model.variant_label(), model.seed)?;
    let summary = run_training(&config, &store, &train, &a.run_dir, !a.no_final)?;
    for r in &summary.runs {
        writeln!(out, "fold {}: best epoch {}, stopped at {}", r.fold_id, r.best_epoch, r.stopped_epoch)?;
    }
    match pooled_validation_auc(&summary.pooled_validation, NUM_FOLDS as usize) {
        Ok(auc) => writeln!(out, "pooled validation AUC {:.2}%", 100.0 * auc)?,
        Err(e) => writeln!(out, "pooled validation AUC unavailable: {e}")?,
    }
    if let Some((epochs, updates)) = summary.final_model {
        writeln!(out, "final model: {epochs} epochs, {updates} updates -> {}", final_dir(&a.run_dir).display())?;
    }
    Ok(())
}

fn label_name(l: Label) -> &'static str {
    match l {
        Label::Positive => "positive",
        Label::Negative => "negative",
        Label::Unknown => "unknown",
    }
}

fn write_scores(path: &Path, scored: &[ScoredPatient], seed: u64) -> Result<()> {
    let mut text = String::from("patient_id,label,score,seed\n");
    for s in scored {
        text.push_str(&format!("{},{},{:.6},{seed}\n", s.patient_id, label_name(s.label), s.score));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let config = read_config(&a.run_dir)?;
    let model = &config.model;
    let records = load_manifest(&a.manifest)?;
    let partition = match a.set {
        EvalSet::Val => Partition::Train,
        EvalSet::Test => Partition::Test,
    };
    let subset: Vec<PatientRecord> = records.iter().filter(|r| r.partition == partition).cloned().collect();
    if subset.is_empty() {
        bail!("manifest has no {} patients", a.set.name());
    }
    let cache = FrameCache::open(&a.cache)?;
    let store = FrameStore::load(&cache, &subset, &model.modalities)?;
    let mut trainer = Trainer::new(&config, &store, &subset)?;

    let scored: Vec<ScoredPatient>;
    let auc = match a.set {
        EvalSet::Val => {
            let mut folds = Vec::new();
            for plan in fold_plans(&subset)? {
                let path = fold_dir(&a.run_dir, plan.fold_id).join(CHECKPOINT_FILE);
                trainer.checkpoint = load_checkpoint_for(&path, model).with_context(|| format!("loading {}", path.display()))?;
                folds.push(trainer.score(&plan.validation)?);
            }
            scored = folds.concat();
            Some(pooled_validation_auc(&folds, NUM_FOLDS as usize)?)
        }
        EvalSet::Test => {
            let path = final_dir(&a.run_dir).join(CHECKPOINT_FILE);
            trainer.checkpoint = load_checkpoint_for(&path, model).with_context(|| format!("loading {}", path.display()))?;
            let ids: Vec<String> = subset.iter().map(|r| r.patient_id.clone()).collect();
            scored = trainer.score(&ids)?;
            if scored.iter().any(|s| s.label == Label::Unknown) {
                None
            } else {
                Some(roc_auc(&scored)?)
            }
        }
    };
    let scores_path = a.run_dir.join(format!("scores_{}.csv", a.set.name()));
    write_scores(&scores_path, &scored, model.seed)?;
    writeln!(
        out,
        "{} ({}), seed {}: scored {} patients -> {}",
        model.modality_label(),
        model.variant_label(),
        model.seed,
        scored.len(),
        scores_path.display()
    )?;

    let Some(auc) = auc else {
        writeln!(out, "notice: test labels are unknown; AUC skipped")?;
        return Ok(());
    };
    writeln!(out, "{} AUC {:.2}%", a.set.name(), 100.0 * auc)?;
    let mut table = ResultsTable::default();
    table.insert(CellKey::for_config(model, a.set), auc);
    let dir = a.out.clone().unwrap_or_else(|| a.run_dir.clone());
    let merged = write_report(&table, &dir)?;
    write!(out, "{}", merged.render())?;
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(c) = &a.corrupt {
        if !CHECKS.contains(&c.as_str()) {
            bail!(UsageError(format!("unknown check {c:?}; expected one of {}", CHECKS.join(", "))));
        }
    }
    let results = selfcheck::run_all(a.corrupt.as_deref())?;
    writeln!(out, "{:<20} {:>14} {:>10} {:>9}  status", "check", "max rel err", "tolerance", "skipped")?;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        let note = if r.corrupted { " (corrupted)" } else { "" };
        writeln!(out, "{:<20} {:>14.3e} {:>10.0e} {:>9}  {status}{note}", r.name, r.max_rel_error, r.tolerance, r.skipped)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if !failed.is_empty() {
        bail!(CheckFailed(format!("gradient check failed: {}", failed.join(", "))));
    }
    writeln!(out, "all {} checks passed", results.len())?;
    Ok(())
}
