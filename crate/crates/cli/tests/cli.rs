use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hallucinator_core::feature_store::{read_feature_file, write_feature_file, FeatureCollection, FeatureSequence};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hallucinator"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stdout.is_empty(), "machine output must go to files");
    out
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(!err.is_empty());
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small corpus: 4 training and 2 held-out speakers, 4 utterances of 250 frames in 8 dims.
fn small_corpus(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join("corpus");
    ok(&[
        "synth", "--out", s(&out), "--seed", seed, "--speakers", "4", "--held-out", "2", "--dim", "8",
        "--frames", "250", "--utterances", "4",
    ]);
    out
}

fn trained(dir: &Path, corpus: &Path) -> PathBuf {
    let out = dir.join("run");
    ok(&["train", "--data", s(corpus), "--out", s(&out), "--epochs", "1", "--batch-size", "8"]);
    out.join("best.phck")
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn synth_writes_a_reproducible_corpus() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = small_corpus(a.path(), "3");
    let cb = small_corpus(b.path(), "3");
    let mut names: Vec<_> = std::fs::read_dir(&ca).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let fsf = names.iter().filter(|n| n.to_string_lossy().ends_with(".fsf")).count();
    assert_eq!(fsf, 6 * 4);
    for n in &names {
        assert_eq!(std::fs::read(ca.join(n)).unwrap(), std::fs::read(cb.join(n)).unwrap(), "{n:?}");
    }
    let labels = rows(&ca.join("spk000_u00.labels.csv"));
    assert_eq!(labels.len(), 250);
    let frames = read_feature_file(&ca.join("spk000_u00.fsf")).unwrap();
    assert!(matches!(frames, FeatureCollection::Sequence(_)));
    assert_eq!((frames.dim(), frames.len()), (8, 250));
}

#[test]
fn synth_default_is_twenty_speakers() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("c");
    ok(&["synth", "--out", s(&out)]);
    let fsf = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "fsf"))
        .count();
    assert_eq!(fsf, 24 * 8);
}

#[test]
fn synth_into_a_file_fails() {
    let d = tempfile::tempdir().unwrap();
    let file = d.path().join("taken");
    std::fs::write(&file, b"x").unwrap();
    let err = fails(&["synth", "--out", s(&file)]);
    assert!(err.contains("not a directory"), "{err}");
}

#[test]
fn train_hallucinate_convert_round() {
    let d = tempfile::tempdir().unwrap();
    let corpus = small_corpus(d.path(), "5");
    let ckpt = trained(d.path(), &corpus);
    let run_dir = ckpt.parent().unwrap();
    assert!(run_dir.join("last.phck").is_file());
    assert_eq!(rows(&run_dir.join("history.csv")).len(), 1);

    // resume continues the history
    ok(&[
        "train", "--data", s(&corpus), "--out", s(run_dir), "--epochs", "2", "--batch-size", "8", "--resume",
        s(&run_dir.join("last.phck")),
    ]);
    assert_eq!(rows(&run_dir.join("history.csv")).len(), 2);

    let target = corpus.join("spk004_u00.fsf");
    let hall = d.path().join("hall.fsf");
    ok(&[
        "hallucinate", "--checkpoint", s(&ckpt), "--target", s(&target), "--count", "300", "--out", s(&hall),
    ]);
    let h = read_feature_file(&hall).unwrap();
    assert!(matches!(h, FeatureCollection::Set(_)));
    assert_eq!((h.dim(), h.len()), (8, 300));

    let err = fails(&[
        "hallucinate", "--checkpoint", s(&ckpt), "--target", s(&target), "--count", "0", "--out", s(&hall),
    ]);
    assert!(err.contains("cardinality"), "{err}");
    let err = fails(&[
        "hallucinate", "--checkpoint", s(&d.path().join("missing.phck")), "--target", s(&target), "--count", "5",
        "--out", s(&hall),
    ]);
    assert!(err.contains("does not exist"), "{err}");

    let source = corpus.join("spk005_u01.fsf");
    let conv = d.path().join("conv.fsf");
    ok(&[
        "convert", "--source", s(&source), "--target", s(&target), "--checkpoint", s(&ckpt), "--count", "200",
        "--out", s(&conv),
    ]);
    let c = read_feature_file(&conv).unwrap();
    assert!(matches!(c, FeatureCollection::Sequence(_)));
    assert_eq!(c.len(), 250);

    // project with hallucinated groups
    let proj = d.path().join("proj.csv");
    ok(&[
        "project", "--inputs", s(&target), s(&source), "--checkpoint", s(&ckpt), "--count", "50", "--out",
        s(&proj),
    ]);
    assert_eq!(rows(&proj).len(), 250 + 50 + 250 + 50);

    let table = d.path().join("eval.csv");
    ok(&[
        "eval", "--corpus", s(&corpus), "--checkpoint", s(&ckpt), "--counts", "0,100", "--out", s(&table),
    ]);
    let r = rows(&table);
    assert_eq!(r.len(), 2);
    for row in &r {
        let ce: f64 = row[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&ce));
    }
}

#[test]
fn identity_conversion_without_hallucinations() {
    let d = tempfile::tempdir().unwrap();
    let corpus = small_corpus(d.path(), "9");
    let src = corpus.join("spk001_u02.fsf");
    let out = d.path().join("same.fsf");
    ok(&["convert", "--source", s(&src), "--target", s(&src), "--k", "1", "--out", s(&out)]);
    assert_eq!(read_feature_file(&out).unwrap(), read_feature_file(&src).unwrap());

    let other = d.path().join("wide.fsf");
    write_feature_file(&other, &FeatureSequence::new(3, vec![1.0; 6]).unwrap().into(), None).unwrap();
    fails(&["convert", "--source", s(&other), "--target", s(&src), "--out", s(&out)]);
    let err = fails(&["convert", "--source", s(&src), "--target", s(&src), "--count", "5", "--out", s(&out)]);
    assert!(err.contains("--checkpoint"), "{err}");
}

#[test]
fn short_utterances_are_not_trainable() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("short");
    ok(&[
        "synth", "--out", s(&corpus), "--speakers", "3", "--held-out", "2", "--dim", "8", "--frames", "120",
        "--utterances", "4",
    ]);
    let err = fails(&["train", "--data", s(&corpus), "--out", s(&d.path().join("run")), "--epochs", "1"]);
    assert!(err.contains("no trainable utterances"), "{err}");
}

#[test]
fn ground_truth_eval_hits_metric_extremes() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("dense");
    ok(&[
        "synth", "--out", s(&corpus), "--seed", "11", "--speakers", "4", "--held-out", "2", "--dim", "8",
        "--utterances", "4",
    ]);
    let table = d.path().join("truth.csv");
    ok(&["eval", "--corpus", s(&corpus), "--out", s(&table)]);
    let r = rows(&table);
    assert_eq!(r.len(), 2);
    for row in &r {
        let (cov, fid, ce): (f64, f64, f64) = (row[1].parse().unwrap(), row[2].parse().unwrap(), row[3].parse().unwrap());
        assert_eq!(cov, 1.0);
        assert!(fid >= 0.99, "{fid}");
        assert_eq!(ce, 0.0);
    }
}

#[test]
fn ablate_emits_one_row_per_variant_and_count() {
    let d = tempfile::tempdir().unwrap();
    let corpus = small_corpus(d.path(), "13");
    let table = d.path().join("ablation.csv");
    ok(&[
        "ablate", "--corpus", s(&corpus), "--epochs", "1", "--batch-size", "8", "--counts", "100", "--out",
        s(&table),
    ]);
    let mut rdr = csv::Reader::from_path(&table).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(
        header,
        ["variant", "peq", "cat", "mod", "count", "content_error", "fidelity", "coverage"]
    );
    let r = rows(&table);
    assert_eq!(r.len(), 6);
    let names: Vec<&str> = r.iter().map(|row| row.get(0).unwrap()).collect();
    assert_eq!(names, ["V1", "V2", "V3", "V4", "V5", "V6"]);

    let err = fails(&["ablate", "--corpus", s(&corpus), "--variants", "V7", "--out", s(&table)]);
    assert!(err.contains("unknown variant"), "{err}");
}

#[test]
fn thread_override_is_validated() {
    let d = tempfile::tempdir().unwrap();
    let out = bin()
        .env("HALLUCINATOR_THREADS", "lots")
        .args(["synth", "--out", s(&d.path().join("c"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = bin()
        .env("HALLUCINATOR_THREADS", "2")
        .args(["synth", "--out", s(&d.path().join("c")), "--speakers", "3", "--held-out", "2", "--dim", "8"])
        .output()
        .unwrap();
    assert!(out.status.success());
}
