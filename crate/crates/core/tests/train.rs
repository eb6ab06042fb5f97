use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use respfuse::cache::{preprocess, FrameCache, FrameStore};
use respfuse::eval::roc_auc;
use respfuse::ingest::{generate_with, parse_manifest, Partition, PatientRecord, SoundType, SynthConfig};
use respfuse::model::{save_checkpoint, ModelConfig};
use respfuse::train::{cross_validate, fold_plans, train_final, BalancedIndex, TrainConfig, Trainer};

struct Fixture {
    _tmp: tempfile::TempDir,
    cache: PathBuf,
    records: Vec<PatientRecord>,
}

/// Eight training and eight test patients, preprocessed once.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = SynthConfig::new(8, 21);
        cfg.n_test = 8;
        let records = parse_manifest(&generate_with(&cfg, &tmp.path().join("data")).unwrap()).unwrap();
        let cache = tmp.path().join("cache");
        preprocess(&records, &cache, 2).unwrap();
        Fixture { _tmp: tmp, cache, records }
    })
}

fn train_records() -> Vec<PatientRecord> {
    fixture().records.iter().filter(|r| r.partition == Partition::Train).cloned().collect()
}

fn store(modalities: &[SoundType], records: &[PatientRecord]) -> FrameStore {
    FrameStore::load(&FrameCache::open(&fixture().cache).unwrap(), records, modalities).unwrap()
}

#[test]
fn folds_partition_the_training_patients() {
    let plans = fold_plans(&fixture().records).unwrap();
    assert_eq!(plans.len(), 5);
    let mut all: Vec<String> = plans.iter().flat_map(|p| p.validation.clone()).collect();
    all.sort();
    let mut expected: Vec<String> = train_records().into_iter().map(|r| r.patient_id).collect();
    expected.sort();
    assert_eq!(all, expected);
    for p in &plans {
        assert!(p.train.iter().all(|id| !p.validation.contains(id)));
        assert_eq!(p.train.len() + p.validation.len(), expected.len());
    }
}

#[test]
fn mono_breath_overfits_training_set() {
    let records = train_records();
    let store = store(&[SoundType::Breath], &records);
    let config = TrainConfig::new(ModelConfig::new(&[SoundType::Breath], false, false, 3).unwrap());
    let mut trainer = Trainer::new(&config, &store, &records).unwrap();
    let ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let index: BalancedIndex = trainer.balanced(&ids).unwrap();
    let start = Instant::now();
    let mut reached = None;
    for epoch in 1..=100 {
        trainer.run_epoch(epoch, &index).unwrap();
        if roc_auc(&trainer.score(&ids).unwrap()).unwrap() == 1.0 {
            reached = Some(epoch);
            break;
        }
    }
    assert!(reached.is_some(), "training AUC never reached 1.0");
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn final_training_update_count_and_determinism() {
    let records = train_records();
    let store = store(&[SoundType::Cough], &records);
    let mut config = TrainConfig::new(ModelConfig::new(&[SoundType::Cough], false, true, 5).unwrap());
    config.batch_size = 8;
    let a = train_final(&config, 3, &store, &records).unwrap();
    let trainer = Trainer::new(&config, &store, &records).unwrap();
    let ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let samples = trainer.balanced(&ids).unwrap().samples.len();
    assert_eq!(a.updates, 3 * samples.div_ceil(8));

    let b = train_final(&config, 3, &store, &records).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (pa, pb) = (tmp.path().join("a.rfus"), tmp.path().join("b.rfus"));
    save_checkpoint(&pa, &a.checkpoint).unwrap();
    save_checkpoint(&pb, &b.checkpoint).unwrap();
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
}

#[test]
fn fold_mean_final_model_generalizes_to_test_set() {
    let all = fixture().records.clone();
    let store = store(&[SoundType::Breath], &all);
    let config = TrainConfig::new(ModelConfig::new(&[SoundType::Breath], false, false, 9).unwrap());
    let cv = cross_validate(&config, &store, &all, |_| Ok(())).unwrap();
    for run in cv.runs() {
        assert_eq!(run.val_losses.len(), run.stopped_epoch);
        assert!(run.best_epoch <= run.stopped_epoch && run.stopped_epoch <= 100);
    }
    let epochs = cv.final_epochs().unwrap();
    let fin = train_final(&config, epochs, &store, &all).unwrap();
    let test: Vec<String> = all.iter().filter(|r| r.partition == Partition::Test).map(|r| r.patient_id.clone()).collect();
    let mut trainer = Trainer::new(&config, &store, &all).unwrap();
    trainer.checkpoint = fin.checkpoint;
    let auc = roc_auc(&trainer.score(&test).unwrap()).unwrap();
    assert!(auc >= 0.9, "test AUC {auc} after {epochs} epochs");
}
