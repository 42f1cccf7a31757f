//! Masked-LM pretraining, multilabel fine-tuning, Adam and the loss.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_value, KvApply};
use crate::dataset::DreamRecord;
use crate::eeg::{featurize, BandFeatures, EegRecording, FeatureConfig};
use crate::error::{DreamError, Result};
use crate::gradcheck::{compare, Coverage, GradCheckReport};
use crate::graph::{bce_clamped, Var};
use crate::model::{Ctx, Mode, Model, ModelConfig, N_EMOTIONS, N_THEMES};
use crate::text::{mask_tokens, tokenize, TokenSequence, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub pre_epochs: usize,
    pub pre_lr: f64,
    pub ft_epochs: usize,
    pub ft_lr: f64,
    pub batch_size: usize,
    pub lambda_e: f64,
    pub lambda_s: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub mask_rate: f64,
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pre_epochs: 25,
            pre_lr: 1e-5,
            ft_epochs: 15,
            ft_lr: 2e-5,
            batch_size: 8,
            lambda_e: 1.0,
            lambda_s: 1.0,
            dropout: 0.1,
            weight_decay: 0.01,
            mask_rate: 0.15,
            patience: Some(3),
            eps: 1e-7,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DreamError::Config(m));
        if !(self.lambda_e >= 0.0 && self.lambda_s >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad(format!("mask_rate {} outside [0, 1]", self.mask_rate));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return bad(format!("probability clamp {} outside (0, 0.5)", self.eps));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.pre_lr >= 0.0 && self.ft_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be nonnegative".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pre_epochs={}", self.pre_epochs);
        let _ = writeln!(s, "pre_lr={}", self.pre_lr);
        let _ = writeln!(s, "ft_epochs={}", self.ft_epochs);
        let _ = writeln!(s, "ft_lr={}", self.ft_lr);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "lambda_e={}", self.lambda_e);
        let _ = writeln!(s, "lambda_s={}", self.lambda_s);
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "mask_rate={}", self.mask_rate);
        match self.patience {
            Some(p) => {
                let _ = writeln!(s, "patience={p}");
            }
            None => s.push_str("patience=inf\n"),
        }
        let _ = writeln!(s, "eps={}", self.eps);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }
}

impl KvApply for TrainConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "pre_epochs" => self.pre_epochs = parse_value(key, value)?,
            "pre_lr" => self.pre_lr = parse_value(key, value)?,
            "ft_epochs" => self.ft_epochs = parse_value(key, value)?,
            "ft_lr" => self.ft_lr = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lambda_e" => self.lambda_e = parse_value(key, value)?,
            "lambda_s" => self.lambda_s = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "mask_rate" => self.mask_rate = parse_value(key, value)?,
            "patience" => {
                self.patience = match value.trim() {
                    "inf" | "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "eps" => self.eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Clamped binary cross-entropy.
pub fn bce(p: f64, y: f64, eps: f64) -> f64 {
    bce_clamped(p, y, eps)
}

/// Weighted emotion plus theme BCE, averaged over the batch.
pub fn total_loss(
    emotions_hat: &[Vec<f64>],
    themes_hat: &[Vec<f64>],
    emotions: &[Vec<f64>],
    themes: &[Vec<f64>],
    lambda_e: f64,
    lambda_s: f64,
    eps: f64,
) -> Result<f64> {
    let n = emotions_hat.len();
    if n == 0 || themes_hat.len() != n || emotions.len() != n || themes.len() != n {
        return Err(DreamError::input(format!(
            "batch sizes disagree or are empty: {n}, {}, {}, {}",
            themes_hat.len(),
            emotions.len(),
            themes.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        for (pred, gold, dim, what) in [
            (&emotions_hat[i], &emotions[i], N_EMOTIONS, "emotion"),
            (&themes_hat[i], &themes[i], N_THEMES, "theme"),
        ] {
            if pred.len() != dim || gold.len() != dim {
                return Err(DreamError::shape(what, &[pred.len()], &[gold.len(), dim]));
            }
        }
        let e: f64 = emotions_hat[i].iter().zip(&emotions[i]).map(|(&p, &y)| bce(p, y, eps)).sum();
        let s: f64 = themes_hat[i].iter().zip(&themes[i]).map(|(&p, &y)| bce(p, y, eps)).sum();
        total += lambda_e * e + lambda_s * s;
    }
    Ok(total / n as f64)
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        let zeros: Vec<Vec<f64>> = shapes.into_iter().map(|n| vec![0.0; n]).collect();
        OptimizerState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        Self::new(model.params.iter().map(|(_, t)| t.numel()))
    }
}

/// One Adam step with decoupled weight decay. `grads[i] == None` leaves
/// parameter `i` and its moments untouched.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[Option<&[f64]>],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(DreamError::shape(
            "adam_step",
            &[params.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if g.len() != p.len() || m.len() != p.len() {
            return Err(DreamError::shape("adam_step", &[p.len()], &[g.len()]));
        }
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * weight_decay * p[j];
            p[j] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

fn model_step(model: &mut Model, state: &mut OptimizerState, lr: f64, wd: f64) -> Result<()> {
    let grads: Vec<Option<Vec<f64>>> = model.params.iter().map(|(_, t)| t.grad().map(<[f64]>::to_vec)).collect();
    let gviews: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
    let mut views: Vec<&mut [f64]> = model.params.tensors_mut().map(|t| t.data_mut()).collect();
    adam_step(&mut views, &gviews, state, lr, wd)?;
    model.params.zero_grad();
    if !model.params.is_finite() {
        return Err(DreamError::Numerical("parameters became non-finite".into()));
    }
    Ok(())
}

/// Early stopping on a validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: Option<usize>,
    best: f64,
    best_epoch: Option<usize>,
    since_best: usize,
    epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            since_best: 0,
            epochs: 0,
        }
    }

    /// Records one epoch. Returns `(improved, stop)`.
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        self.epochs += 1;
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.best_epoch = Some(self.epochs);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        let stop = self.patience.is_some_and(|p| self.since_best >= p);
        (improved, stop)
    }

    /// 1-based epoch of the best loss seen.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// A tokenized, optionally featurized, labelled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub seq: TokenSequence,
    pub features: Option<BandFeatures>,
    pub emotions: Vec<f64>,
    pub themes: Vec<f64>,
}

impl Sample {
    pub fn from_record(
        record: &DreamRecord,
        eeg: Option<&EegRecording>,
        vocab: &Vocab,
        max_len: usize,
        features: &FeatureConfig,
    ) -> Result<Self> {
        let features = match eeg {
            Some(rec) => Some(featurize(rec, features)?),
            None => None,
        };
        Ok(Sample {
            id: record.id.clone(),
            seq: tokenize(&record.text, vocab, max_len),
            features,
            emotions: record.emotions.iter().map(|&v| f64::from(v)).collect(),
            themes: record.themes.iter().map(|&v| f64::from(v)).collect(),
        })
    }

    /// The same example with its EEG features removed.
    pub fn text_only(&self) -> Self {
        Sample {
            features: None,
            ..self.clone()
        }
    }

    pub fn joint_labels(&self) -> Vec<f64> {
        self.emotions.iter().chain(&self.themes).copied().collect()
    }
}

/// Samples for `records`, attaching EEG features where `eeg` holds a
/// recording for the record id.
pub fn build_samples(
    records: &[DreamRecord],
    eeg: &std::collections::BTreeMap<String, EegRecording>,
    vocab: &Vocab,
    max_len: usize,
    features: &FeatureConfig,
) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| Sample::from_record(r, eeg.get(&r.id), vocab, max_len, features))
        .collect()
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the weighted emotion plus theme loss for one sample on `ctx`.
fn sample_loss(ctx: &mut Ctx<'_>, sample: &Sample, cfg: &TrainConfig) -> Result<Var> {
    let out = ctx.forward(sample.seq.active_ids(), sample.features.as_ref())?;
    let le = ctx.g.bce_sum(out.emotions, &sample.emotions, &[cfg.lambda_e; N_EMOTIONS], cfg.eps)?;
    let ls = ctx.g.bce_sum(out.themes, &sample.themes, &[cfg.lambda_s; N_THEMES], cfg.eps)?;
    ctx.g.add(le, ls)
}

/// Per-sample loss with dropout off.
pub fn eval_loss(model: &Model, sample: &Sample, cfg: &TrainConfig) -> Result<f64> {
    let mut ctx = model.ctx(Mode::Eval);
    let loss = sample_loss(&mut ctx, sample, cfg)?;
    ctx.g.scalar(loss)
}

pub fn mean_eval_loss(model: &Model, samples: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(DreamError::input("cannot average loss over an empty split"));
    }
    let mut total = 0.0;
    for s in samples {
        total += eval_loss(model, s, cfg)?;
    }
    Ok(total / samples.len() as f64)
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DreamError::Numerical(format!("{what} is {v}")))
    }
}

/// Finite-difference check of one sample's loss (dropout off) against
/// reverse-mode gradients for every parameter the sample reaches. Report
/// tensor indices refer to `model.params`.
pub fn grad_check_model(model: &Model, sample: &Sample, cfg: &TrainConfig, eps: f64, coverage: Coverage) -> Result<GradCheckReport> {
    let mut ctx = model.ctx(Mode::Eval);
    let loss = sample_loss(&mut ctx, sample, cfg)?;
    let grads = ctx.g.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = model.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut touched = vec![false; analytic.len()];
    for (id, g) in grads.params() {
        analytic[id].copy_from_slice(g);
        touched[id] = true;
    }
    drop(ctx);
    let ids: Vec<usize> = (0..analytic.len()).filter(|&i| touched[i]).collect();
    let tensors: Vec<_> = ids.iter().map(|&i| model.params.by_id(i).clone()).collect();
    let subset: Vec<Vec<f64>> = ids.iter().map(|&i| std::mem::take(&mut analytic[i])).collect();
    let scratch = std::cell::RefCell::new(model.clone());
    let mut report = compare(&tensors, &subset, eps, coverage, |work| {
        let mut m = scratch.borrow_mut();
        for (&i, t) in ids.iter().zip(work) {
            m.params.by_id_mut(i).data_mut().copy_from_slice(t.data());
        }
        let mut ctx = m.ctx(Mode::Eval);
        let l = sample_loss(&mut ctx, sample, cfg)?;
        ctx.g.scalar(l)
    })?;
    report.worst = report.worst.map(|(t, e)| (ids[t], e));
    Ok(report)
}

/// Multiplier applied to every non-layer-norm tensor of a freshly
/// initialized model to obtain the gradient-check point. At initialization
/// the fusion query/key gradients sit near the finite-difference roundoff
/// floor; this scale lifts them clear of it while keeping every
/// probability away from the clamp.
pub const CHECK_POINT_SCALE: f64 = 2.5;

/// A model at the gradient-check point together with one EEG-paired
/// sample of 8 active tokens drawn from `seed`.
pub fn grad_check_fixture(cfg: &ModelConfig, seed: u64) -> Result<(Model, Sample)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(cfg.clone(), &mut rng)?;
    let scaled: Vec<usize> = model
        .params
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| !name.contains("ln"))
        .map(|(i, _)| i)
        .collect();
    for i in scaled {
        model.params.by_id_mut(i).data_mut().iter_mut().for_each(|v| *v *= CHECK_POINT_SCALE);
    }
    let generated = crate::dataset::generate(&crate::dataset::GeneratorSpec {
        n: 1,
        seed,
        eeg_fraction: 1.0,
        ..Default::default()
    })?;
    let features = match generated.eeg.values().next() {
        Some(rec) if cfg.fusion != crate::model::Fusion::None => Some(featurize(
            rec,
            &FeatureConfig {
                dim: cfg.feature_dim,
                ..Default::default()
            },
        )?),
        _ => None,
    };
    let active = 8.min(cfg.max_len);
    let mut ids = vec![crate::text::CLS];
    ids.extend((1..active).map(|_| rng.random_range(crate::text::RESERVED.len()..cfg.vocab_size)));
    ids.resize(cfg.max_len, crate::text::PAD);
    let sample = Sample {
        id: "check".into(),
        seq: TokenSequence { ids, true_len: active },
        features,
        emotions: (0..N_EMOTIONS).map(|i| (i % 2) as f64).collect(),
        themes: (0..N_THEMES).map(|i| f64::from(u8::from(i % 3 == 0))).collect(),
    };
    Ok((model, sample))
}

/// Masked-LM pretraining of the encoder. Returns the mean masked-token
/// cross-entropy of every epoch.
pub fn pretrain(corpus: &[TokenSequence], model: &mut Model, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(DreamError::input("pretraining corpus is empty"));
    }
    let mcfg = ModelConfig {
        dropout: cfg.dropout,
        ..model.config.clone()
    };
    let mut state = OptimizerState::for_model(model);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x6d6c6d, 0));
    let mut history = Vec::with_capacity(cfg.pre_epochs);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.pre_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, epoch as u64)));
        let (mut loss_sum, mut counted) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut in_batch = Vec::new();
            for &i in batch {
                let (masked, targets) = mask_tokens(&corpus[i], cfg.mask_rate, &mut mask_rng)?;
                if !targets.is_empty() {
                    in_batch.push((i, masked, targets));
                }
            }
            if in_batch.is_empty() {
                continue;
            }
            let scale = 1.0 / in_batch.len() as f64;
            for (i, masked, targets) in &in_batch {
                let seed = mix(cfg.seed, 2, (epoch * corpus.len() + i) as u64);
                let mut ctx = Ctx::new(&mcfg, &model.params, Mode::Train { seed });
                let h = ctx.encode(masked.active_ids(), None)?;
                let positions: Vec<usize> = targets.iter().map(|t| t.0).collect();
                let rows = ctx.g.gather_rows(h, &positions)?;
                let logits = ctx.mlm_logits(rows)?;
                let pairs: Vec<(usize, usize)> = targets.iter().enumerate().map(|(r, t)| (r, t.1)).collect();
                let loss = ctx.g.softmax_cross_entropy(logits, &pairs)?;
                loss_sum += check_finite(ctx.g.scalar(loss)?, "MLM loss")?;
                counted += 1;
                let grads = ctx.g.backward(loss)?;
                drop(ctx);
                model.params.accumulate(&grads, scale)?;
            }
            model_step(model, &mut state, cfg.pre_lr, cfg.weight_decay)?;
        }
        if counted == 0 {
            return Err(DreamError::input(format!(
                "epoch {} masked no positions (mask_rate {}); nothing to predict",
                epoch + 1,
                cfg.mask_rate
            )));
        }
        history.push(loss_sum / counted as f64);
    }
    Ok(history)
}

/// Per-epoch losses from fine-tuning.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinetuneReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl FinetuneReport {
    /// `epoch,train_loss,val_loss`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            let _ = writeln!(s, "{},{t},{v}", i + 1);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn finetune(train: &[Sample], val: &[Sample], model: &mut Model, cfg: &TrainConfig) -> Result<FinetuneReport> {
    finetune_observed(train, val, model, cfg, |_, _| {})
}

/// Losses of one completed fine-tuning epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Fine-tunes on `train`, selecting parameters by `val` loss. `observe`
/// sees every finished epoch together with the current model.
pub fn finetune_observed(
    train: &[Sample],
    val: &[Sample],
    model: &mut Model,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochLog, &Model),
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(DreamError::input(format!(
            "fine-tuning needs nonempty splits (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    let mcfg = ModelConfig {
        dropout: cfg.dropout,
        ..model.config.clone()
    };
    let mut state = OptimizerState::for_model(model);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params.clone();
    let mut report = FinetuneReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.ft_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 3, epoch as u64)));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let seed = mix(cfg.seed, 4, (epoch * train.len() + i) as u64);
                let mut ctx = Ctx::new(&mcfg, &model.params, Mode::Train { seed });
                let loss = sample_loss(&mut ctx, &train[i], cfg)?;
                loss_sum += check_finite(ctx.g.scalar(loss)?, "training loss")?;
                let grads = ctx.g.backward(loss)?;
                drop(ctx);
                model.params.accumulate(&grads, scale)?;
            }
            model_step(model, &mut state, cfg.ft_lr, cfg.weight_decay)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = check_finite(mean_eval_loss(model, val, cfg)?, "validation loss")?;
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        let log = EpochLog {
            epoch: epoch + 1,
            train_loss,
            val_loss,
        };
        observe(&log, model);
        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            best_params = model.params.clone();
        }
        if stop {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(best) = stopper.best_epoch() {
        model.params = best_params;
        report.best_epoch = best;
    }
    Ok(report)
}
