use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dreamnet::checkpoint::Checkpoint;
use dreamnet::config::apply_kv_text;
use dreamnet::dataset::{self, DreamRecord, Generated, EMOTIONS, THEMES};
use dreamnet::eeg::FeatureConfig;
use dreamnet::evaluation::{
    self, ablation_csv, correlation_grid_csv, dream_types_csv, metrics_csv, predict_samples, stratified_metrics, Experiment,
    MetricsReport, RuleBaseline, Variant,
};
use dreamnet::gradcheck::Coverage;
use dreamnet::model::{is_encoder_param, Fusion, Model, ModelConfig, Temporal};
use dreamnet::text::{tokenize, Vocab};
use dreamnet::training::{self, build_samples, grad_check_fixture, grad_check_model, Sample};
use dreamnet::DreamError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::run_config::RunConfig;
use crate::Common;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Dream(#[from] DreamError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: max relative error {err:.3e} exceeds {threshold:.1e}")]
    GradCheck { err: f64, threshold: f64 },
}

impl CliError {
    /// 2 for input and configuration problems, 3 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Dream(DreamError::Numerical(_)) | CliError::GradCheck { .. } => 3,
            _ => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Attaches `path` to plain IO failures coming out of the library.
fn at(path: &Path) -> impl FnOnce(DreamError) -> CliError + '_ {
    move |e| match e {
        DreamError::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Dream(other),
    }
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.features.dim = cfg.model.feature_dim;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig) -> CliResult<()> {
    write(&dir.join("manifest.txt"), &format!("# dreamnet {command}\n{}", cfg.to_kv()))
}

fn load_data(path: &Path) -> CliResult<Generated> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("data file {} does not exist", path.display())));
    }
    dataset::load_with_eeg(path).map_err(at(path))
}

fn parent_or_here(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Vocabulary sidecar stored beside a checkpoint.
fn vocab_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("vocab")
}

fn load_vocab(ckpt: &Path) -> CliResult<Vocab> {
    let p = vocab_path(ckpt);
    if !p.is_file() {
        return Err(CliError::Usage(format!("vocabulary {} for checkpoint {} not found", p.display(), ckpt.display())));
    }
    Vocab::load(&p).map_err(at(&p))
}

fn save_model(model: &Model, vocab: &Vocab, ckpt: &Path) -> CliResult<()> {
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    model.save(ckpt).map_err(at(ckpt))?;
    let vp = vocab_path(ckpt);
    vocab.save(&vp).map_err(at(&vp))
}

fn load_model(ckpt: &Path) -> CliResult<(Model, Vocab)> {
    if !ckpt.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", ckpt.display())));
    }
    let model = Model::load(ckpt)?;
    let vocab = load_vocab(ckpt)?;
    if vocab.len() != model.config.vocab_size {
        return Err(CliError::Usage(format!(
            "vocabulary of {} tokens does not match checkpoint {} (vocab_size {})",
            vocab.len(),
            ckpt.display(),
            model.config.vocab_size
        )));
    }
    Ok((model, vocab))
}

struct Splits {
    train: Vec<DreamRecord>,
    val: Vec<DreamRecord>,
    test: Vec<DreamRecord>,
}

fn split(cfg: &RunConfig, records: &[DreamRecord]) -> CliResult<Splits> {
    let (train, val, test) = dataset::split(records, cfg.split, cfg.seed)?;
    Ok(Splits { train, val, test })
}

fn build_vocab(records: &[DreamRecord], min_freq: usize) -> CliResult<Vocab> {
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    Ok(Vocab::build(&texts, min_freq)?)
}

/// Architecture for a fresh model. With a pretrained checkpoint the encoder
/// dimensions follow the checkpoint so its tensors fit.
fn model_config(cfg: &RunConfig, vocab: &Vocab, pretrained: Option<&Checkpoint>) -> CliResult<ModelConfig> {
    let mut m = ModelConfig {
        vocab_size: vocab.len(),
        dropout: cfg.train.dropout,
        ..cfg.model.clone()
    };
    if let Some(ck) = pretrained {
        let mut enc = ModelConfig::default();
        apply_kv_text(&mut enc, &ck.header)?;
        m.vocab_size = enc.vocab_size;
        m.d_model = enc.d_model;
        m.n_layers = enc.n_layers;
        m.n_heads_text = enc.n_heads_text;
        m.ff_dim = enc.ff_dim;
        m.max_len = enc.max_len;
        m.layer_norm_eps = enc.layer_norm_eps;
    }
    m.validate()?;
    Ok(m)
}

/// Pretrained checkpoint and its vocabulary, or a vocabulary built from
/// the training split.
fn init_source(cfg: &RunConfig, init: Option<&Path>, train: &[DreamRecord]) -> CliResult<(Vocab, Option<Checkpoint>)> {
    match init {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::Usage(format!("checkpoint {} does not exist", p.display())));
            }
            let ck = Checkpoint::load(p)?;
            Ok((load_vocab(p)?, Some(ck)))
        }
        None => Ok((build_vocab(train, cfg.min_freq)?, None)),
    }
}

fn label_name(config: &ModelConfig) -> &'static str {
    match (config.temporal, config.fusion) {
        (_, Fusion::None) => "DNet-T",
        (Temporal::MeanPool, _) => "-LSTM",
        (Temporal::BiLstm, Fusion::Concat) => "-Cross-Attention",
        (Temporal::BiLstm, Fusion::CrossAttention) => "DNet-M",
    }
}

fn print_metrics(name: &str, m: &MetricsReport) {
    println!(
        "{name}: accuracy {:.4} f1 {:.4} precision {:.4} recall {:.4} auc {} (n={})",
        m.accuracy,
        m.f1,
        m.precision,
        m.recall,
        m.auc.map_or("NA".into(), |a| format!("{a:.4}")),
        m.n
    );
}

pub fn gen_data(common: &Common, n: Option<usize>, eeg_fraction: Option<f64>, out: &Path) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    if let Some(n) = n {
        cfg.spec.n = n;
    }
    if let Some(f) = eeg_fraction {
        cfg.spec.eeg_fraction = f;
    }
    let generated = dataset::generate(&cfg.spec)?;
    ensure_dir(out)?;
    let path = dataset::save_generated(&generated, out).map_err(at(out))?;
    write_manifest(out, "gen-data", &cfg)?;
    println!(
        "wrote {} records ({} with EEG) to {}",
        generated.records.len(),
        generated.eeg.len(),
        path.display()
    );
    Ok(())
}

pub fn pretrain(common: &Common, data: &Path, ckpt_out: &Path, report_dir: Option<PathBuf>) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    cfg.data = Some(data.to_path_buf());
    cfg.ckpt = Some(ckpt_out.to_path_buf());
    let report_dir = report_dir.unwrap_or_else(|| parent_or_here(ckpt_out));
    let g = load_data(data)?;
    let splits = split(&cfg, &g.records)?;
    let vocab = build_vocab(&splits.train, cfg.min_freq)?;
    let mcfg = model_config(&cfg, &vocab, None)?;
    let corpus: Vec<_> = splits.train.iter().map(|r| tokenize(&r.text, &vocab, mcfg.max_len)).collect();
    let mut model = Model::new(mcfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let t = Instant::now();
    let history = training::pretrain(&corpus, &mut model, &cfg.train)?;
    save_model(&model, &vocab, ckpt_out)?;
    ensure_dir(&report_dir)?;
    let mut csv = String::from("epoch,mlm_loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", i + 1);
    }
    write(&report_dir.join("loss.csv"), &csv)?;
    cfg.report_dir = Some(report_dir.clone());
    write_manifest(&report_dir, "pretrain", &cfg)?;
    println!(
        "pretrained {} epochs on {} texts in {:.1}s; final MLM loss {:.4}",
        history.len(),
        corpus.len(),
        t.elapsed().as_secs_f64(),
        history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn finetune(common: &Common, data: &Path, ckpt_out: &Path, init: Option<&Path>, report_dir: Option<PathBuf>) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    cfg.data = Some(data.to_path_buf());
    cfg.ckpt = Some(ckpt_out.to_path_buf());
    let report_dir = report_dir.unwrap_or_else(|| parent_or_here(ckpt_out));
    let g = load_data(data)?;
    let splits = split(&cfg, &g.records)?;
    let (vocab, pretrained) = init_source(&cfg, init, &splits.train)?;
    let mcfg = model_config(&cfg, &vocab, pretrained.as_ref())?;
    let mut model = Model::new(mcfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    if let Some(ck) = &pretrained {
        let n = model.load_matching(ck, is_encoder_param, false)?;
        println!("loaded {n} encoder tensors from {}", init.map_or_else(String::new, |p| p.display().to_string()));
    }
    let fc = FeatureConfig {
        dim: model.config.feature_dim,
        ..cfg.features
    };
    let train = build_samples(&splits.train, &g.eeg, &vocab, model.config.max_len, &fc)?;
    let val = build_samples(&splits.val, &g.eeg, &vocab, model.config.max_len, &fc)?;
    let t = Instant::now();
    let report = training::finetune(&train, &val, &mut model, &cfg.train)?;
    save_model(&model, &vocab, ckpt_out)?;
    ensure_dir(&report_dir)?;
    write(&report_dir.join("loss.csv"), &report.to_csv())?;
    cfg.report_dir = Some(report_dir.clone());
    write_manifest(&report_dir, "finetune", &cfg)?;
    match report.best_epoch.checked_sub(1).and_then(|i| report.val_loss.get(i)) {
        Some(v) => println!(
            "fine-tuned {} epochs in {:.1}s; best epoch {} (val loss {v:.4}){}",
            report.val_loss.len(),
            t.elapsed().as_secs_f64(),
            report.best_epoch,
            if report.stopped_early { ", stopped early" } else { "" }
        ),
        None => println!("no fine-tuning epochs run"),
    }
    Ok(())
}

/// One line of a predictions file.
#[derive(Debug, Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    emotions: Vec<f64>,
    themes: Vec<f64>,
}

fn read_predictions(path: &Path) -> CliResult<Vec<PredictionLine>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(&line).map_err(|e| DreamError::Parse {
            line: i + 1,
            msg: format!("{}: {e}", path.display()),
        })?;
        out.push(p);
    }
    Ok(out)
}

fn pick_split<'a>(splits: &'a Splits, all: &'a [DreamRecord], which: &str) -> CliResult<&'a [DreamRecord]> {
    Ok(match which {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        "all" => all,
        other => return Err(CliError::Usage(format!("unknown split {other:?}; expected train, val, test or all"))),
    })
}

pub fn eval(common: &Common, data: &Path, ckpt: Option<&Path>, predictions: Option<&Path>, which: &str, report_dir: &Path) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    cfg.data = Some(data.to_path_buf());
    cfg.ckpt = ckpt.map(Path::to_path_buf);
    cfg.report_dir = Some(report_dir.to_path_buf());
    let g = load_data(data)?;
    let splits = split(&cfg, &g.records)?;

    let (name, records, probs) = match predictions {
        Some(path) => {
            let by_id: BTreeMap<&str, &DreamRecord> = g.records.iter().map(|r| (r.id.as_str(), r)).collect();
            let mut records = Vec::new();
            let mut probs = Vec::new();
            for p in read_predictions(path)? {
                let r = by_id
                    .get(p.id.as_str())
                    .ok_or_else(|| CliError::Usage(format!("prediction for unknown id {:?}", p.id)))?;
                records.push((*r).clone());
                probs.push(p.emotions.into_iter().chain(p.themes).collect::<Vec<f64>>());
            }
            ("Predictions".to_string(), records, probs)
        }
        None => {
            let ckpt = ckpt.ok_or_else(|| CliError::Usage("eval needs --ckpt or --predictions".into()))?;
            let (model, vocab) = load_model(ckpt)?;
            let records = pick_split(&splits, &g.records, which)?.to_vec();
            let fc = FeatureConfig {
                dim: model.config.feature_dim,
                ..cfg.features
            };
            let samples = build_samples(&records, &g.eeg, &vocab, model.config.max_len, &fc)?;
            let (probs, _) = predict_samples(&model, &samples)?;
            let out: String = samples
                .iter()
                .zip(&probs)
                .map(|(s, p)| {
                    let line = PredictionLine {
                        id: s.id.clone(),
                        emotions: p[..EMOTIONS.len()].to_vec(),
                        themes: p[EMOTIONS.len()..].to_vec(),
                    };
                    serde_json::to_string(&line).expect("plain data serializes") + "\n"
                })
                .collect();
            ensure_dir(report_dir)?;
            write(&report_dir.join("predictions.jsonl"), &out)?;
            (label_name(&model.config).to_string(), records, probs)
        }
    };
    if records.is_empty() {
        return Err(CliError::Usage("nothing to evaluate".into()));
    }
    let labels: Vec<Vec<f64>> = records.iter().map(DreamRecord::joint_labels).collect();
    let report = evaluation::multilabel_metrics(&probs, &labels, cfg.tau)?;

    let rule = RuleBaseline::fit(if splits.train.is_empty() { &g.records } else { &splits.train });
    let rule_probs: Vec<Vec<f64>> = records.iter().map(|r| rule.predict(&r.text).joint()).collect();
    let rule_report = evaluation::multilabel_metrics(&rule_probs, &labels, cfg.tau)?;

    let types: Vec<_> = records.iter().map(|r| r.dream_type).collect();
    let strata = stratified_metrics(&probs, &labels, &types, cfg.tau)?;

    ensure_dir(report_dir)?;
    print_metrics("Rule-Based", &rule_report);
    print_metrics(&name, &report);
    write(
        &report_dir.join("metrics.csv"),
        &metrics_csv(&[("Rule-Based".into(), rule_report), (name, report)]),
    )?;
    write(&report_dir.join("dream_types.csv"), &dream_types_csv(&strata))?;
    write_manifest(report_dir, "eval", &cfg)
}

pub fn ablate(common: &Common, data: &Path, init: Option<&Path>, seeds: Option<Vec<u64>>, report_dir: &Path) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    cfg.data = Some(data.to_path_buf());
    cfg.report_dir = Some(report_dir.to_path_buf());
    if let Some(s) = seeds {
        cfg.ablation_seeds = s;
    }
    let g = load_data(data)?;
    if !g.records.iter().any(|r| r.eeg_path.is_some()) {
        return Err(CliError::Usage("ablation needs records with EEG".into()));
    }
    let splits = split(&cfg, &g.records)?;
    let (vocab, pretrained) = init_source(&cfg, init, &splits.train)?;
    let mcfg = model_config(&cfg, &vocab, pretrained.as_ref())?;
    let fc = FeatureConfig {
        dim: mcfg.feature_dim,
        ..cfg.features
    };
    let prep = |rs: &[DreamRecord]| build_samples(rs, &g.eeg, &vocab, mcfg.max_len, &fc);
    let (train, val, test) = (prep(&splits.train)?, prep(&splits.val)?, prep(&splits.test)?);
    let exp = Experiment {
        train: &train,
        val: &val,
        test: &test,
        model: &mcfg,
        train_cfg: &cfg.train,
        pretrained: pretrained.as_ref(),
        tau: cfg.tau,
    };
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let mut runs = Vec::new();
        for &seed in &cfg.ablation_seeds {
            let r = exp.run(v, seed)?;
            println!("{} seed {seed}: f1 {:.4} accuracy {:.4}", v.name(), r.test.f1, r.test.accuracy);
            runs.push(r.test);
        }
        let (mean, std) = evaluation::summarize(&runs);
        rows.push(evaluation::AblationRow { variant: v, runs, mean, std });
    }
    ensure_dir(report_dir)?;
    write(&report_dir.join("ablation.csv"), &ablation_csv(&rows))?;
    write_manifest(report_dir, "ablate", &cfg)
}

pub fn kfold(common: &Common, data: &Path, k: Option<usize>, init: Option<&Path>, report_dir: &Path) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    cfg.data = Some(data.to_path_buf());
    cfg.report_dir = Some(report_dir.to_path_buf());
    if let Some(k) = k {
        cfg.folds = k;
    }
    let g = load_data(data)?;
    let (vocab, pretrained) = init_source(&cfg, init, &g.records)?;
    let mcfg = model_config(&cfg, &vocab, pretrained.as_ref())?;
    let fc = FeatureConfig {
        dim: mcfg.feature_dim,
        ..cfg.features
    };
    let samples = build_samples(&g.records, &g.eeg, &vocab, mcfg.max_len, &fc)?;
    let summary = evaluation::kfold(samples.len(), cfg.folds, cfg.seed, |fold, train_idx, test_idx| {
        // An eighth of the training folds, at least one sample, selects the epoch.
        let mut idx = train_idx.to_vec();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ fold as u64));
        let n_val = (idx.len() / 8).max(1).min(idx.len().saturating_sub(1));
        let pick = |ids: &[usize]| -> Vec<Sample> { ids.iter().map(|&i| samples[i].clone()).collect() };
        let (val, train) = (pick(&idx[..n_val]), pick(&idx[n_val..]));
        let test = pick(test_idx);
        let exp = Experiment {
            train: &train,
            val: &val,
            test: &test,
            model: &mcfg,
            train_cfg: &cfg.train,
            pretrained: pretrained.as_ref(),
            tau: cfg.tau,
        };
        let variant = Variant::ALL
            .into_iter()
            .find(|v| v.config(&mcfg) == mcfg)
            .unwrap_or(Variant::Full);
        let r = exp.run(variant, cfg.seed)?;
        println!("fold {}: f1 {:.4} accuracy {:.4} (n={})", fold + 1, r.test.f1, r.test.accuracy, r.test.n);
        Ok(r.test)
    })?;
    let mut csv = String::from("fold,accuracy,f1,precision,recall,auc,n\n");
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
    for (i, m) in summary.folds.iter().enumerate() {
        let _ = writeln!(csv, "{},{:.6},{:.6},{:.6},{:.6},{},{}", i + 1, m.accuracy, m.f1, m.precision, m.recall, opt(m.auc), m.n);
    }
    for (label, s) in [("mean", &summary.mean), ("std", &summary.std)] {
        let _ = writeln!(csv, "{label},{:.6},{:.6},{:.6},{:.6},{},", s.accuracy, s.f1, s.precision, s.recall, opt(s.auc));
    }
    ensure_dir(report_dir)?;
    write(&report_dir.join("kfold.csv"), &csv)?;
    write_manifest(report_dir, "kfold", &cfg)
}

pub fn correlate(common: &Common, data: &Path, ckpt: Option<&Path>, gold: bool, n_perm: Option<usize>, report_dir: &Path) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    cfg.data = Some(data.to_path_buf());
    cfg.ckpt = ckpt.map(Path::to_path_buf);
    cfg.report_dir = Some(report_dir.to_path_buf());
    if let Some(n) = n_perm {
        cfg.n_perm = n;
    }
    let g = load_data(data)?;
    let themes: Vec<Vec<f64>> = g.records.iter().map(|r| r.themes.iter().map(|&v| f64::from(v)).collect()).collect();
    let (source, emotions): (&str, Vec<Vec<f64>>) = match ckpt {
        Some(p) if !gold => {
            let (model, vocab) = load_model(p)?;
            let fc = FeatureConfig {
                dim: model.config.feature_dim,
                ..cfg.features
            };
            let samples = build_samples(&g.records, &g.eeg, &vocab, model.config.max_len, &fc)?;
            let (probs, _) = predict_samples(&model, &samples)?;
            ("predicted", probs.into_iter().map(|p| p[..EMOTIONS.len()].to_vec()).collect())
        }
        _ => (
            "gold",
            g.records.iter().map(|r| r.emotions.iter().map(|&v| f64::from(v)).collect()).collect(),
        ),
    };
    let grid = evaluation::correlation_matrix(&themes, &emotions, cfg.n_perm, cfg.seed)?;
    ensure_dir(report_dir)?;
    write(&report_dir.join("correlations.csv"), &correlation_grid_csv(&grid, |c| c.r))?;
    write(&report_dir.join("correlation_pvalues.csv"), &correlation_grid_csv(&grid, |c| c.p_value))?;
    write_manifest(report_dir, "correlate", &cfg)?;
    let (k, j) = (
        THEMES.iter().position(|&t| t == "falling").expect("schema"),
        EMOTIONS.iter().position(|&e| e == "anxiety").expect("schema"),
    );
    match &grid[k][j] {
        Some(c) => println!("falling/anxiety ({source} emotions): r {:.4} p {:.5} n {}", c.r, c.p_value, c.n),
        None => println!("falling/anxiety ({source} emotions): undefined"),
    }
    Ok(())
}

pub fn grad_check(common: &Common, d_model: usize, eps: f64, coords: usize, threshold: f64, report_dir: Option<&Path>) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    cfg.report_dir = report_dir.map(Path::to_path_buf);
    let mcfg = ModelConfig {
        vocab_size: 30,
        d_model,
        n_heads_text: if d_model % 2 == 0 { 2 } else { 1 },
        ff_dim: 2 * d_model,
        max_len: 12,
        dropout: 0.0,
        ..cfg.model.clone()
    };
    let coverage = if coords == 0 { Coverage::All } else { Coverage::Sampled(coords) };
    let t = Instant::now();
    let (model, sample) = grad_check_fixture(&mcfg, cfg.seed)?;
    let r = grad_check_model(&model, &sample, &cfg.train, eps, coverage)?;
    let (name, idx) = match r.worst {
        Some((ti, e)) => (model.params.iter().nth(ti).map_or("?", |(n, _)| n), e),
        None => ("-", 0),
    };
    let line = format!(
        "max_rel_error {:.3e} at {name}[{idx}] (analytic {:.6e}, numeric {:.6e}); {} coordinates in {:.1}s",
        r.max_rel_error,
        r.worst_values.0,
        r.worst_values.1,
        r.coords_checked,
        t.elapsed().as_secs_f64()
    );
    println!("{line}");
    if let Some(dir) = report_dir {
        ensure_dir(dir)?;
        write(&dir.join("gradcheck.txt"), &format!("{line}\n"))?;
        write_manifest(dir, "grad-check", &cfg)?;
    }
    if !(r.max_rel_error <= threshold) {
        return Err(CliError::GradCheck {
            err: r.max_rel_error,
            threshold,
        });
    }
    Ok(())
}
