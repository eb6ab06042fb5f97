use std::fs;
use std::path::Path;

use respfuse_cli::run;

fn respfuse(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("respfuse").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let (code, _, err) = respfuse(&["synth", "--patients", "7", "--seed", "1", "--out", p(&out)]);
    assert_eq!(code, 1);
    assert!(err.contains("even"), "{err}");
    assert_eq!(respfuse(&["synth", "--patients", "8"]).0, 1);
    assert_eq!(respfuse(&["train", "--modalities", "X"]).0, 1);
    assert_eq!(respfuse(&["frobnicate"]).0, 1);
    assert_eq!(respfuse(&["gradcheck", "--corrupt", "nope"]).0, 1);
    let (code, help, _) = respfuse(&["--help"]);
    assert_eq!(code, 0);
    assert!(help.contains("preprocess"));
}

#[test]
fn missing_data_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, err) =
        respfuse(&["preprocess", "--manifest", p(&tmp.path().join("none.csv")), "--cache", p(&tmp.path().join("c"))]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error:"));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let (code, out, _) = respfuse(&["gradcheck"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.lines().filter(|l| l.contains("ok")).count() >= 14, "{out}");
    let (code, out, err) = respfuse(&["gradcheck", "--corrupt", "conv2d"]);
    assert_eq!(code, 3, "{out}");
    assert!(err.contains("conv2d"));
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let (code, _, err) = respfuse(&["synth", "--patients", "6", "--test-patients", "2", "--seed", "4", "--out", p(dir)]);
        assert_eq!(code, 0, "{err}");
    }
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.csv")).unwrap());
    assert_eq!(manifest.lines().count(), 9);
    for e in fs::read_dir(a.join("audio")).unwrap() {
        let e = e.unwrap();
        assert_eq!(fs::read(e.path()).unwrap(), fs::read(b.join("audio").join(e.file_name())).unwrap());
    }
}

#[test]
fn unknown_test_labels_produce_scores_and_a_notice() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let (cache, run_dir) = (tmp.path().join("cache"), tmp.path().join("run"));
    assert_eq!(respfuse(&["synth", "--patients", "10", "--test-patients", "2", "--seed", "8", "--out", p(&data)]).0, 0);
    let manifest = data.join("manifest.csv");
    let text = fs::read_to_string(&manifest).unwrap();
    let blind: Vec<String> = text
        .lines()
        .map(|l| {
            if l.contains(",test,") {
                l.replace(",positive,", ",unknown,").replace(",negative,", ",unknown,")
            } else {
                l.into()
            }
        })
        .collect();
    fs::write(&manifest, blind.join("\n") + "\n").unwrap();

    let (code, out, err) = respfuse(&["preprocess", "--manifest", p(&manifest), "--cache", p(&cache), "--workers", "2"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("12 computed"), "{out}");
    let (code, out, err) = respfuse(&[
        "train",
        "--manifest",
        p(&manifest),
        "--cache",
        p(&cache),
        "--run-dir",
        p(&run_dir),
        "--modalities",
        "S",
        "--seed",
        "2",
        "--max-epochs",
        "2",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("pooled validation AUC"), "{out}");
    for fold in 0..5 {
        assert!(run_dir.join(format!("fold{fold}/checkpoint.rfus")).is_file());
        assert!(run_dir.join(format!("fold{fold}/history.csv")).is_file());
    }
    assert!(run_dir.join("final/checkpoint.rfus").is_file());

    let eval =
        |set: &str| respfuse(&["eval", "--run-dir", p(&run_dir), "--manifest", p(&manifest), "--cache", p(&cache), "--set", set]);
    let (code, out, err) = eval("test");
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("notice: test labels are unknown"), "{out}");
    let scores = fs::read_to_string(run_dir.join("scores_test.csv")).unwrap();
    assert_eq!(scores.lines().count(), 3);
    assert!(scores.lines().skip(1).all(|l| l.contains(",unknown,")));
    assert!(!run_dir.join("results.csv").exists());

    let (code, out, err) = eval("val");
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("Val."), "{out}");
    let results = fs::read_to_string(run_dir.join("results.csv")).unwrap();
    assert!(results.starts_with("modalities,variant,set,auc_percent\nS,Baseline,val,"), "{results}");
}
