use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dreamnet::checkpoint::Checkpoint;
use dreamnet::dataset::{self, EMOTIONS, THEMES};
use dreamnet::model::{is_encoder_param, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dreamnet")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small architecture and short narratives so training runs take seconds.
const SMALL: &str = "d_model=16
n_heads_text=2
ff_dim=32
max_len=48
mean_words=20
sd_words=5
min_words=8
eeg_seconds=4
ft_lr=0.003
pre_lr=0.003
ft_epochs=3
pre_epochs=2
min_freq=1
";

fn small_data(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let cfg = dir.join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.join("data");
    let out = run(&["gen-data", "--config", p(&cfg), "--n", &n.to_string(), "--seed", "3", "--eeg-fraction", "1", "--out", p(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (cfg, data.join("dataset.jsonl"))
}

#[test]
fn gen_data_default_corpus_shape() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("d");
    let out = run(&["gen-data", "--n", "1500", "--seed", "7", "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(out_dir.join("dataset.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1500);
    let eeg = fs::read_dir(&out_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "eeg"))
        .count();
    assert!((399..=401).contains(&eeg), "{eeg} EEG files");
    let manifest = fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("n=1500") && manifest.contains("seed=7"));
}

#[test]
fn gen_data_empty_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    let out = run(&["gen-data", "--n", "0", "--out", p(&empty)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(empty.join("dataset.jsonl")).unwrap(), Vec::<u8>::new());

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = run(&["gen-data", "--n", "25", "--seed", "11", "--eeg-fraction", "0.2", "--out", p(d)]);
        assert_eq!(code(&out), 0);
    }
    assert_eq!(fs::read(a.join("dataset.jsonl")).unwrap(), fs::read(b.join("dataset.jsonl")).unwrap());
}

#[test]
fn gen_data_unwritable_path_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = run(&["gen-data", "--n", "3", "--out", p(&blocker.join("sub"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("file"), "{}", stderr(&out));
}

#[test]
fn finetune_writes_one_loss_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small_data(dir.path(), 32);
    let ckpt = dir.path().join("run/model.ckpt");
    let out = run(&["finetune", "--config", p(&cfg), "--data", p(&data), "--ckpt-out", p(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,val_loss"));
    assert_eq!(lines.count(), 3);
    assert!(dir.path().join("run/manifest.txt").is_file());
    assert!(dir.path().join("run/model.vocab").is_file());

    // Evaluation of the fresh checkpoint writes both table files.
    let report = dir.path().join("eval");
    let out = run(&["eval", "--config", p(&cfg), "--data", p(&data), "--ckpt", p(&ckpt), "--report-dir", p(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = fs::read_to_string(report.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("model,accuracy,f1,precision,recall,auc"));
    assert!(metrics.lines().nth(1).unwrap().starts_with("Rule-Based,"));
    assert!(metrics.lines().nth(2).unwrap().starts_with("DNet-M,"));
    assert_eq!(fs::read_to_string(report.join("dream_types.csv")).unwrap().lines().count(), 7);
    assert!(report.join("manifest.txt").is_file());
}

#[test]
fn pretrained_encoder_is_loaded_and_heads_are_fresh() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small_data(dir.path(), 32);
    let pre = dir.path().join("pre/enc.ckpt");
    let out = run(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--ckpt-out", p(&pre)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(dir.path().join("pre/loss.csv")).unwrap().lines().count(), 3);

    // A zero learning rate leaves every tensor at its starting value.
    let frozen = dir.path().join("frozen.cfg");
    fs::write(&frozen, format!("{SMALL}ft_lr=0\nft_epochs=1\n")).unwrap();
    let ft = dir.path().join("ft/model.ckpt");
    let out = run(&["finetune", "--config", p(&frozen), "--data", p(&data), "--init-ckpt", p(&pre), "--ckpt-out", p(&ft), "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("encoder tensors"));

    let pre_ck = Checkpoint::load(&pre).unwrap();
    let tuned = Model::load(&ft).unwrap();
    let fresh = Model::new(tuned.config.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut encoder = 0;
    for (name, t) in tuned.params.iter() {
        if is_encoder_param(name) {
            let src = &pre_ck.tensors.iter().find(|(n, _)| n == name).unwrap().1;
            assert_eq!(t.data(), src.data(), "{name}");
            encoder += 1;
        } else if name.starts_with("head.") {
            assert_eq!(t.data(), fresh.params.get(name).unwrap().data(), "{name}");
        }
    }
    assert!(encoder > 0);
}

#[test]
fn bad_checkpoints_and_missing_data_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small_data(dir.path(), 12);
    let report = dir.path().join("r");

    let out = run(&["finetune", "--data", p(&dir.path().join("nope.jsonl")), "--ckpt-out", p(&dir.path().join("x.ckpt"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.jsonl"));

    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"XXXXnot a checkpoint").unwrap();
    fs::write(dir.path().join("bad.vocab"), "").unwrap();
    let out = run(&["eval", "--config", p(&cfg), "--data", p(&data), "--ckpt", p(&bad), "--report-dir", p(&report)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.ckpt"), "{}", stderr(&out));

    // Header claims a different width than the stored tensors.
    let ck = dir.path().join("good.ckpt");
    let out = run(&["finetune", "--config", p(&cfg), "--data", p(&data), "--ckpt-out", p(&ck)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut c = Checkpoint::load(&ck).unwrap();
    c.header = c.header.replace("d_model=16", "d_model=32");
    let mismatched = dir.path().join("mismatch.ckpt");
    c.save(&mismatched).unwrap();
    fs::copy(dir.path().join("good.vocab"), dir.path().join("mismatch.vocab")).unwrap();
    let out = run(&["eval", "--config", p(&cfg), "--data", p(&data), "--ckpt", p(&mismatched), "--report-dir", p(&report)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("shape"), "{}", stderr(&out));
}

#[test]
fn exploding_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = small_data(dir.path(), 12);
    let cfg = dir.path().join("explode.cfg");
    fs::write(&cfg, format!("{SMALL}ft_lr=1e200\n")).unwrap();
    let out = run(&["finetune", "--config", p(&cfg), "--data", p(&data), "--ckpt-out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("numerical"), "{}", stderr(&out));
}

#[test]
fn oracle_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small_data(dir.path(), 20);
    let records = dataset::load(&data).unwrap();
    let lines: String = records
        .iter()
        .map(|r| {
            let e: Vec<f64> = r.emotions.iter().map(|&v| f64::from(v)).collect();
            let t: Vec<f64> = r.themes.iter().map(|&v| f64::from(v)).collect();
            format!("{}\n", serde_json::json!({"id": r.id, "emotions": e, "themes": t}))
        })
        .collect();
    let preds = dir.path().join("oracle.jsonl");
    fs::write(&preds, lines).unwrap();
    let report = dir.path().join("r");
    let out = run(&["eval", "--config", p(&cfg), "--data", p(&data), "--predictions", p(&preds), "--report-dir", p(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = fs::read_to_string(report.join("metrics.csv")).unwrap();
    let row = metrics.lines().find(|l| l.starts_with("Predictions,")).unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    for c in &cols[1..7] {
        assert_eq!(*c, "1.000000", "{row}");
    }
}

#[test]
fn correlate_recovers_planted_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let out = run(&["gen-data", "--n", "1500", "--seed", "21", "--eeg-fraction", "0", "--out", p(&d)]);
    assert_eq!(code(&out), 0);
    let report = dir.path().join("r");
    let out = run(&["correlate", "--data", p(&d.join("dataset.jsonl")), "--report-dir", p(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(report.join("correlations.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 1 + EMOTIONS.len());
    assert_eq!(csv.lines().count(), 1 + THEMES.len());
    let j = header.iter().position(|&h| h == "anxiety").unwrap();
    let row = csv.lines().find(|l| l.starts_with("falling,")).unwrap();
    let r: f64 = row.split(',').nth(j).unwrap().parse().unwrap();
    assert!((r - 0.9).abs() <= 0.1, "r = {r}");
    let pv = fs::read_to_string(report.join("correlation_pvalues.csv")).unwrap();
    let prow = pv.lines().find(|l| l.starts_with("falling,")).unwrap();
    let pval: f64 = prow.split(',').nth(j).unwrap().parse().unwrap();
    assert!(pval < 0.01);
}

#[test]
fn grad_check_passes_at_width_16() {
    let out = run(&["grad-check", "--d-model", "16"]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("max_rel_error"));
    // An impossible threshold turns the same run into a numerical failure.
    let out = run(&["grad-check", "--d-model", "16", "--coords", "2", "--threshold", "0"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn ablate_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small_data(dir.path(), 24);
    let report = dir.path().join("abl");
    let out = run(&["ablate", "--config", p(&cfg), "--data", p(&data), "--seeds", "1", "--report-dir", p(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(report.join("ablation.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["DNet-T", "-LSTM", "-Cross-Attention", "DNet-M"]);
}

#[test]
fn kfold_reports_every_fold() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small_data(dir.path(), 15);
    let report = dir.path().join("kf");
    let cfg2 = dir.path().join("kf.cfg");
    fs::write(&cfg2, format!("{}ft_epochs=1\n", fs::read_to_string(&cfg).unwrap())).unwrap();
    let out = run(&["kfold", "--config", p(&cfg2), "--data", p(&data), "--k", "3", "--report-dir", p(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(report.join("kfold.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 2);
}
