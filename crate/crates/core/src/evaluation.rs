//! Multilabel metrics, rank AUC, permutation correlations, dream-type
//! stratification, k-fold and ablation runners, the keyword rule baseline
//! and the CSV report writers.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::dataset::{DreamRecord, DreamType, GeneratorSpec, EMOTIONS, THEMES, THEME_KEYWORDS};
use crate::error::{DreamError, Result};
use crate::model::{is_encoder_param, Fusion, Model, ModelConfig, Mode, Prediction, Temporal, N_EMOTIONS, N_THEMES};
use crate::text::words;
use crate::training::{finetune, FinetuneReport, Sample, TrainConfig};

/// Fewest shuffles accepted by the permutation test.
pub const MIN_PERMUTATIONS: usize = 10_000;

/// Joint label names in metric order: emotions, then themes.
pub fn joint_label_names() -> Vec<&'static str> {
    EMOTIONS.iter().chain(THEMES.iter()).copied().collect()
}

/// How precision, recall and F1 are pooled across labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Pool every decision, then compute the ratios.
    #[default]
    Micro,
    /// Unweighted mean of per-label values.
    Macro,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the label has a single class in the evaluated set.
    pub auc: Option<f64>,
    /// Number of positive gold labels.
    pub support: usize,
}

/// Multilabel scores. `accuracy` is the mean per-position correctness over
/// all `n × labels` decisions; `subset_accuracy` requires a whole row to
/// match.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub subset_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean of per-label AUCs over labels with both classes present.
    pub auc: Option<f64>,
    pub averaging: Averaging,
    pub per_label: Vec<LabelMetrics>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Counts {
    /// Empty denominators score 1 when there was nothing to find and
    /// nothing was claimed, 0 otherwise.
    fn prf(self) -> (f64, f64, f64) {
        let ratio = |num: usize, den: usize| {
            if den > 0 {
                num as f64 / den as f64
            } else if self.tp + self.fp + self.fn_ == 0 {
                1.0
            } else {
                0.0
            }
        };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        (p, r, harmonic(p, r))
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn check_matrix(probs: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<usize> {
    if probs.is_empty() {
        return Err(DreamError::input("metrics need at least one sample"));
    }
    if probs.len() != labels.len() {
        return Err(DreamError::shape("multilabel_metrics", &[probs.len()], &[labels.len()]));
    }
    let width = probs[0].len();
    if width == 0 {
        return Err(DreamError::input("metrics need at least one label"));
    }
    for (i, (p, y)) in probs.iter().zip(labels).enumerate() {
        if p.len() != width || y.len() != width {
            return Err(DreamError::shape("multilabel_metrics", &[i, p.len()], &[width, y.len()]));
        }
        if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DreamError::input(format!("probability {v} outside [0,1] in row {i}")));
        }
        if let Some(v) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(DreamError::input(format!("label {v} is not 0/1 in row {i}")));
        }
    }
    Ok(width)
}

/// Micro-averaged report at threshold `tau`.
pub fn multilabel_metrics(probs: &[Vec<f64>], labels: &[Vec<f64>], tau: f64) -> Result<MetricsReport> {
    multilabel_metrics_with(probs, labels, tau, Averaging::Micro)
}

pub fn multilabel_metrics_with(probs: &[Vec<f64>], labels: &[Vec<f64>], tau: f64, averaging: Averaging) -> Result<MetricsReport> {
    let width = check_matrix(probs, labels)?;
    let n = probs.len();
    let mut per = vec![Counts::default(); width];
    let mut correct = 0usize;
    let mut exact = 0usize;
    for (p, y) in probs.iter().zip(labels) {
        let mut row_ok = true;
        for j in 0..width {
            let pred = p[j] >= tau;
            let gold = y[j] == 1.0;
            match (pred, gold) {
                (true, true) => per[j].tp += 1,
                (true, false) => per[j].fp += 1,
                (false, true) => per[j].fn_ += 1,
                (false, false) => {}
            }
            if pred == gold {
                correct += 1;
            } else {
                row_ok = false;
            }
        }
        exact += usize::from(row_ok);
    }

    let mut per_label = Vec::with_capacity(width);
    let mut aucs = Vec::new();
    for (j, c) in per.iter().enumerate() {
        let scores: Vec<f64> = probs.iter().map(|r| r[j]).collect();
        let gold: Vec<bool> = labels.iter().map(|r| r[j] == 1.0).collect();
        let auc = auc(&scores, &gold).ok();
        aucs.extend(auc);
        let (precision, recall, f1) = c.prf();
        per_label.push(LabelMetrics {
            precision,
            recall,
            f1,
            auc,
            support: c.tp + c.fn_,
        });
    }

    let (precision, recall, f1) = match averaging {
        Averaging::Micro => {
            let total = per.iter().fold(Counts::default(), |a, c| Counts {
                tp: a.tp + c.tp,
                fp: a.fp + c.fp,
                fn_: a.fn_ + c.fn_,
            });
            total.prf()
        }
        Averaging::Macro => {
            let mean = |f: fn(&LabelMetrics) -> f64| per_label.iter().map(f).sum::<f64>() / width as f64;
            (mean(|l| l.precision), mean(|l| l.recall), mean(|l| l.f1))
        }
    };
    Ok(MetricsReport {
        n,
        accuracy: correct as f64 / (n * width) as f64,
        subset_accuracy: exact as f64 / n as f64,
        precision,
        recall,
        f1,
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        averaging,
        per_label,
    })
}

/// Probability that a random positive outranks a random negative, ties
/// counted one half, via midranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DreamError::shape("auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DreamError::input("auc scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DreamError::Undefined("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    let (xc, nx) = centered(x, y.len())?;
    let (yc, ny) = centered(y, x.len())?;
    Ok((dot(&xc, &yc) / (nx * ny)).clamp(-1.0, 1.0))
}

fn centered(x: &[f64], other_len: usize) -> Result<(Vec<f64>, f64)> {
    if x.len() != other_len {
        return Err(DreamError::shape("pearson", &[x.len()], &[other_len]));
    }
    if x.len() < 3 {
        return Err(DreamError::input(format!("pearson needs at least 3 points, got {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DreamError::input("pearson input is not finite"));
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let norm = dot(&c, &c).sqrt();
    if norm == 0.0 {
        return Err(DreamError::Undefined("correlation of a constant column".into()));
    }
    Ok((c, norm))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationResult {
    pub theme: String,
    pub emotion: String,
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Pearson r with a two-sided permutation p-value from shuffling `y`:
/// `(1 + #{|r*| ≥ |r|}) / (1 + n_perm)`.
pub fn pearson_permutation<R: Rng + ?Sized>(x: &[f64], y: &[f64], n_perm: usize, rng: &mut R) -> Result<(f64, f64)> {
    if n_perm < MIN_PERMUTATIONS {
        return Err(DreamError::config(format!("permutation test needs at least {MIN_PERMUTATIONS} shuffles, got {n_perm}")));
    }
    let (xc, nx) = centered(x, y.len())?;
    let (mut yc, ny) = centered(y, x.len())?;
    let scale = nx * ny;
    let r = (dot(&xc, &yc) / scale).clamp(-1.0, 1.0);
    // Slack so permutations that reproduce r exactly are not lost to rounding.
    let bar = r.abs() - 1e-12;
    let mut hits = 0usize;
    for _ in 0..n_perm {
        yc.shuffle(rng);
        if (dot(&xc, &yc) / scale).abs() >= bar {
            hits += 1;
        }
    }
    Ok((r, (1 + hits) as f64 / (1 + n_perm) as f64))
}

/// Theme-column against emotion-column correlation test.
pub fn pearson<R: Rng + ?Sized>(theme: usize, emotion: usize, theme_col: &[f64], emotion_col: &[f64], n_perm: usize, rng: &mut R) -> Result<CorrelationResult> {
    let name = |names: &[&str], i: usize| {
        names
            .get(i)
            .map(|s| s.to_string())
            .ok_or_else(|| DreamError::input(format!("label index {i} out of range")))
    };
    let (r, p_value) = pearson_permutation(theme_col, emotion_col, n_perm, rng)?;
    Ok(CorrelationResult {
        theme: name(&THEMES, theme)?,
        emotion: name(&EMOTIONS, emotion)?,
        r,
        p_value,
        n: theme_col.len(),
    })
}

/// Full theme × emotion grid; `None` where a column is constant. Each cell
/// draws from its own stream so cells are independent of grid order.
pub fn correlation_matrix(themes: &[Vec<f64>], emotions: &[Vec<f64>], n_perm: usize, seed: u64) -> Result<Vec<Vec<Option<CorrelationResult>>>> {
    if themes.len() != emotions.len() {
        return Err(DreamError::shape("correlation_matrix", &[themes.len()], &[emotions.len()]));
    }
    let col = |m: &[Vec<f64>], j: usize, width: usize| -> Result<Vec<f64>> {
        m.iter()
            .map(|r| {
                if r.len() != width {
                    return Err(DreamError::shape("correlation_matrix", &[r.len()], &[width]));
                }
                Ok(r[j])
            })
            .collect()
    };
    let mut grid = Vec::with_capacity(N_THEMES);
    for k in 0..N_THEMES {
        let x = col(themes, k, N_THEMES)?;
        let mut row = Vec::with_capacity(N_EMOTIONS);
        for j in 0..N_EMOTIONS {
            let y = col(emotions, j, N_EMOTIONS)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k * N_EMOTIONS + j) as u64) << 32);
            match pearson(k, j, &x, &y, n_perm, &mut rng) {
                Ok(c) => row.push(Some(c)),
                Err(DreamError::Undefined(_)) => row.push(None),
                Err(e) => return Err(e),
            }
        }
        grid.push(row);
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratumRow {
    pub dream_type: DreamType,
    pub metrics: MetricsReport,
}

/// Metrics per dream type, in canonical type order, for the types present.
pub fn stratified_metrics(probs: &[Vec<f64>], labels: &[Vec<f64>], types: &[DreamType], tau: f64) -> Result<Vec<StratumRow>> {
    if types.len() != probs.len() {
        return Err(DreamError::shape("stratified_metrics", &[probs.len()], &[types.len()]));
    }
    let present: BTreeSet<DreamType> = types.iter().copied().collect();
    present
        .into_iter()
        .map(|t| {
            let idx: Vec<usize> = (0..types.len()).filter(|&i| types[i] == t).collect();
            let p: Vec<Vec<f64>> = idx.iter().map(|&i| probs[i].clone()).collect();
            let y: Vec<Vec<f64>> = idx.iter().map(|&i| labels[i].clone()).collect();
            Ok(StratumRow {
                dream_type: t,
                metrics: multilabel_metrics(&p, &y, tau)?,
            })
        })
        .collect()
}

/// Model predictions on `samples`, grouped by the dream type of the
/// matching record in `records` (matched by id).
pub fn stratified_eval(model: &Model, samples: &[Sample], records: &[DreamRecord], tau: f64) -> Result<Vec<StratumRow>> {
    let (probs, labels) = predict_samples(model, samples)?;
    let types = samples
        .iter()
        .map(|s| {
            records
                .iter()
                .find(|r| r.id == s.id)
                .map(|r| r.dream_type)
                .ok_or_else(|| DreamError::input(format!("no record for sample {}", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    stratified_metrics(&probs, &labels, &types, tau)
}

/// Test folds of a deterministic `k`-way partition of `0..n`; sizes differ
/// by at most one.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(DreamError::config(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(DreamError::input(format!("k-fold with k={k} needs at least {k} samples, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = n / k + usize::from(i < n % k);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

/// The scalar columns of a [`MetricsReport`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub subset_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

/// Mean and sample standard deviation of each metric over runs. AUC is
/// aggregated over the runs that produced one.
pub fn summarize(reports: &[MetricsReport]) -> (MetricSummary, MetricSummary) {
    fn stats(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    }
    let col = |f: fn(&MetricsReport) -> f64| stats(&reports.iter().map(f).collect::<Vec<_>>());
    let (a, a_sd) = col(|r| r.accuracy);
    let (s, s_sd) = col(|r| r.subset_accuracy);
    let (p, p_sd) = col(|r| r.precision);
    let (rc, rc_sd) = col(|r| r.recall);
    let (f, f_sd) = col(|r| r.f1);
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
    let (auc, auc_sd) = if aucs.is_empty() { (None, None) } else {
        let (m, sd) = stats(&aucs);
        (Some(m), Some(sd))
    };
    (
        MetricSummary { accuracy: a, subset_accuracy: s, precision: p, recall: rc, f1: f, auc },
        MetricSummary { accuracy: a_sd, subset_accuracy: s_sd, precision: p_sd, recall: rc_sd, f1: f_sd, auc: auc_sd },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct KfoldSummary {
    pub folds: Vec<MetricsReport>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

/// Runs `run(fold, train_indices, test_indices)` on each fold and
/// aggregates in fold order.
pub fn kfold<F>(n: usize, k: usize, seed: u64, mut run: F) -> Result<KfoldSummary>
where
    F: FnMut(usize, &[usize], &[usize]) -> Result<MetricsReport>,
{
    let folds = kfold_indices(n, k, seed)?;
    let mut reports = Vec::with_capacity(k);
    for (i, test) in folds.iter().enumerate() {
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        reports.push(run(i, &train, test)?);
    }
    let (mean, std) = summarize(&reports);
    Ok(KfoldSummary { folds: reports, mean, std })
}

/// Keyword lexicon baseline: a theme fires iff one of its keywords occurs
/// as a word; emotion probabilities combine the fired themes' priors as a
/// noisy-OR.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleBaseline {
    pub keywords: Vec<Vec<String>>,
    /// `priors[k][j]`: probability theme `k` evokes emotion `j`.
    pub priors: Vec<[f64; N_EMOTIONS]>,
}

impl Default for RuleBaseline {
    /// Generator keyword lexicon with the default generator's theme-emotion
    /// table as priors.
    fn default() -> Self {
        RuleBaseline {
            keywords: THEME_KEYWORDS.iter().map(|ks| ks.iter().map(|s| s.to_string()).collect()).collect(),
            priors: GeneratorSpec::default().conditional.to_vec(),
        }
    }
}

impl RuleBaseline {
    /// Default lexicon with priors estimated from `records`:
    /// `P(emotion | theme)` among records carrying the theme.
    pub fn fit(records: &[DreamRecord]) -> Self {
        let mut base = RuleBaseline::default();
        for k in 0..N_THEMES {
            let with: Vec<&DreamRecord> = records.iter().filter(|r| r.themes[k] == 1).collect();
            if with.is_empty() {
                base.priors[k] = [0.0; N_EMOTIONS];
                continue;
            }
            for j in 0..N_EMOTIONS {
                base.priors[k][j] = with.iter().filter(|r| r.emotions[j] == 1).count() as f64 / with.len() as f64;
            }
        }
        base
    }

    pub fn predict(&self, text: &str) -> Prediction {
        let present: BTreeSet<String> = words(text).collect();
        let themes: Vec<f64> = self
            .keywords
            .iter()
            .map(|ks| f64::from(u8::from(ks.iter().any(|k| present.contains(k)))))
            .collect();
        let mut quiet = [1.0; N_EMOTIONS];
        for (k, &fired) in themes.iter().enumerate() {
            if fired == 1.0 {
                for (q, p) in quiet.iter_mut().zip(&self.priors[k]) {
                    *q *= 1.0 - p;
                }
            }
        }
        Prediction {
            emotions: quiet.iter().map(|q| 1.0 - q).collect(),
            themes,
            attention: None,
        }
    }
}

/// Joint probabilities and labels for a set of samples.
pub fn predict_samples(model: &Model, samples: &[Sample]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut probs = Vec::with_capacity(samples.len());
    for s in samples {
        probs.push(model.forward(&s.seq, s.features.as_ref(), Mode::Eval)?.joint());
    }
    Ok((probs, samples.iter().map(Sample::joint_labels).collect()))
}

pub fn evaluate(model: &Model, samples: &[Sample], tau: f64) -> Result<MetricsReport> {
    let (p, y) = predict_samples(model, samples)?;
    multilabel_metrics(&p, &y, tau)
}

/// The four compared configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Text only: Bi-LSTM, no fusion, EEG withheld.
    TextOnly,
    /// Mean-pooled encoder states instead of the Bi-LSTM, with fusion.
    NoLstm,
    /// Concatenation of the text state and the mean EEG token.
    NoCrossAttention,
    /// Bi-LSTM with cross-attention fusion.
    Full,
}

impl Variant {
    /// Reporting order: text-only, the two ablations, full.
    pub const ALL: [Variant; 4] = [Variant::TextOnly, Variant::NoLstm, Variant::NoCrossAttention, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TextOnly => "DNet-T",
            Variant::NoLstm => "-LSTM",
            Variant::NoCrossAttention => "-Cross-Attention",
            Variant::Full => "DNet-M",
        }
    }

    pub fn uses_eeg(self) -> bool {
        self != Variant::TextOnly
    }

    pub fn config(self, base: &ModelConfig) -> ModelConfig {
        let (temporal, fusion) = match self {
            Variant::TextOnly => (Temporal::BiLstm, Fusion::None),
            Variant::NoLstm => (Temporal::MeanPool, Fusion::CrossAttention),
            Variant::NoCrossAttention => (Temporal::BiLstm, Fusion::Concat),
            Variant::Full => (Temporal::BiLstm, Fusion::CrossAttention),
        };
        ModelConfig {
            temporal,
            fusion,
            ..base.clone()
        }
    }

    /// `samples` as this variant sees them.
    pub fn view(self, samples: &[Sample]) -> Vec<Sample> {
        if self.uses_eeg() {
            samples.to_vec()
        } else {
            samples.iter().map(Sample::text_only).collect()
        }
    }
}

/// Splits, configurations and an optional pretrained encoder shared by
/// every run of a comparison.
#[derive(Debug, Clone, Copy)]
pub struct Experiment<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub test: &'a [Sample],
    pub model: &'a ModelConfig,
    pub train_cfg: &'a TrainConfig,
    /// Encoder tensors copied into every fresh model.
    pub pretrained: Option<&'a Checkpoint>,
    pub tau: f64,
}

/// One trained and evaluated configuration.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub model: Model,
    pub history: FinetuneReport,
    pub test: MetricsReport,
}

impl Experiment<'_> {
    /// Initializes the variant from `seed`, loads the pretrained encoder,
    /// fine-tunes and scores the test split.
    pub fn run(&self, variant: Variant, seed: u64) -> Result<RunResult> {
        let mut model = Model::new(variant.config(self.model), &mut ChaCha8Rng::seed_from_u64(seed))?;
        if let Some(ck) = self.pretrained {
            model.load_matching(ck, is_encoder_param, false)?;
        }
        let cfg = TrainConfig {
            seed,
            ..self.train_cfg.clone()
        };
        let history = finetune(&variant.view(self.train), &variant.view(self.val), &mut model, &cfg)?;
        let test = evaluate(&model, &variant.view(self.test), self.tau)?;
        Ok(RunResult {
            variant,
            seed,
            model,
            history,
            test,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Test metrics per seed, in seed order.
    pub runs: Vec<MetricsReport>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

/// Trains every variant on every seed and tabulates test metrics.
pub fn ablation(exp: &Experiment<'_>, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(DreamError::config("ablation needs at least one seed"));
    }
    Variant::ALL
        .iter()
        .map(|&v| {
            let runs = seeds
                .iter()
                .map(|&s| exp.run(v, s).map(|r| r.test))
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = summarize(&runs);
            Ok(AblationRow { variant: v, runs, mean, std })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// `model,accuracy,f1,precision,recall,auc,subset_accuracy,n`.
pub fn metrics_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut s = String::from("model,accuracy,f1,precision,recall,auc,subset_accuracy,n\n");
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "{name},{:.6},{:.6},{:.6},{:.6},{},{:.6},{}",
            m.accuracy,
            m.f1,
            m.precision,
            m.recall,
            fmt_opt(m.auc),
            m.subset_accuracy,
            m.n
        );
    }
    s
}

/// `configuration,accuracy,f1,precision,recall,auc,accuracy_std,f1_std,seeds`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("configuration,accuracy,f1,precision,recall,auc,accuracy_std,f1_std,seeds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{}",
            r.variant.name(),
            r.mean.accuracy,
            r.mean.f1,
            r.mean.precision,
            r.mean.recall,
            fmt_opt(r.mean.auc),
            r.std.accuracy,
            r.std.f1,
            r.runs.len()
        );
    }
    s
}

/// One row per dream type in canonical order; types with no samples are
/// marked `absent`.
pub fn dream_types_csv(rows: &[StratumRow]) -> String {
    let mut s = String::from("dream_type,accuracy,f1,precision,recall,n\n");
    for t in DreamType::ALL {
        match rows.iter().find(|r| r.dream_type == t) {
            Some(r) => {
                let m = &r.metrics;
                let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6},{}", t.as_str(), m.accuracy, m.f1, m.precision, m.recall, m.n);
            }
            None => {
                let _ = writeln!(s, "{},absent,absent,absent,absent,0", t.as_str());
            }
        }
    }
    s
}

/// Theme × emotion grid of `r` (`value = r`) or of p-values; undefined
/// cells are `NA`.
pub fn correlation_grid_csv(grid: &[Vec<Option<CorrelationResult>>], value: fn(&CorrelationResult) -> f64) -> String {
    let mut s = String::from("theme");
    for e in EMOTIONS {
        s.push(',');
        s.push_str(e);
    }
    s.push('\n');
    for (k, row) in grid.iter().enumerate() {
        s.push_str(THEMES[k]);
        for c in row {
            s.push(',');
            s.push_str(&fmt_opt(c.as_ref().map(value)));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|r| r.to_vec()).collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let y = rows(&[&[1.0, 0.0, 1.0], &[0.0, 0.0, 1.0], &[1.0, 1.0, 0.0]]);
        let m = multilabel_metrics(&y, &y, 0.5).unwrap();
        for v in [m.accuracy, m.subset_accuracy, m.precision, m.recall, m.f1, m.auc.unwrap()] {
            assert_eq!(v, 1.0);
        }
        let inv: Vec<Vec<f64>> = y.iter().map(|r| r.iter().map(|v| 1.0 - v).collect()).collect();
        let m = multilabel_metrics(&inv, &y, 0.5).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(m.auc, Some(0.0));
    }

    #[test]
    fn hand_computed_micro_scores() {
        // label 0: tp 2, fp 1, fn 0; label 1: tp 0, fp 0, fn 2; label 2: tp 1, fp 1, fn 1.
        let p = rows(&[&[0.9, 0.1, 0.8], &[0.7, 0.2, 0.6], &[0.6, 0.4, 0.1], &[0.2, 0.3, 0.3]]);
        let y = rows(&[&[1.0, 1.0, 1.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 1.0], &[0.0, 0.0, 0.0]]);
        let m = multilabel_metrics(&p, &y, 0.5).unwrap();
        assert!(close(m.precision, 3.0 / 5.0));
        assert!(close(m.recall, 3.0 / 6.0));
        assert!(close(m.f1, 2.0 * 0.6 * 0.5 / 1.1));
        assert!(close(m.accuracy, 7.0 / 12.0));
        assert!(close(m.subset_accuracy, 1.0 / 4.0));
        assert_eq!(m.per_label[1].support, 2);
        assert_eq!(m.per_label[1].precision, 0.0);
        let macro_ = multilabel_metrics_with(&p, &y, 0.5, Averaging::Macro).unwrap();
        assert!(close(macro_.precision, (2.0 / 3.0 + 0.0 + 0.5) / 3.0));
    }

    #[test]
    fn metric_errors() {
        assert!(multilabel_metrics(&[], &[], 0.5).is_err());
        assert!(multilabel_metrics(&rows(&[&[0.5]]), &rows(&[&[1.0, 0.0]]), 0.5).is_err());
        assert!(multilabel_metrics(&rows(&[&[1.5]]), &rows(&[&[1.0]]), 0.5).is_err());
    }

    #[test]
    fn single_class_labels_are_skipped_by_auc() {
        let p = rows(&[&[0.9, 0.2], &[0.1, 0.3]]);
        let y = rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let m = multilabel_metrics(&p, &y, 0.5).unwrap();
        assert_eq!(m.per_label[1].auc, None);
        assert_eq!(m.auc, Some(1.0));
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(DreamError::Undefined(_))));
    }

    #[test]
    fn auc_ties_count_half() {
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
    }

    #[test]
    fn pearson_extremes_and_errors() {
        let x = [1.0, 0.0, 1.0, 1.0, 0.0];
        let inv: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        assert!(close(pearson_r(&x, &x).unwrap(), 1.0));
        assert!(close(pearson_r(&x, &inv).unwrap(), -1.0));
        assert!(matches!(pearson_r(&x, &[0.3; 5]), Err(DreamError::Undefined(_))));
        assert!(pearson_r(&[1.0, 0.0], &[1.0, 0.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(pearson_permutation(&x, &x, 100, &mut rng).is_err());
    }

    #[test]
    fn permutation_p_value_separates_signal_from_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..200).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 0.5 + rng.random::<f64>()).collect();
        let (r, p) = pearson_permutation(&x, &y, MIN_PERMUTATIONS, &mut rng).unwrap();
        assert!(r > 0.3 && p < 0.01, "r {r} p {p}");
        let z: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let (_, p) = pearson_permutation(&x, &z, MIN_PERMUTATIONS, &mut rng).unwrap();
        assert!(p > 0.01);
    }

    #[test]
    fn strata_follow_canonical_order() {
        let p = rows(&[&[0.9], &[0.2], &[0.8]]);
        let y = rows(&[&[1.0], &[1.0], &[1.0]]);
        let t = [DreamType::Surreal, DreamType::General, DreamType::Surreal];
        let s = stratified_metrics(&p, &y, &t, 0.5).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].dream_type, DreamType::General);
        assert_eq!(s[0].metrics.recall, 0.0);
        assert_eq!(s[1].metrics.n, 2);
        let csv = dream_types_csv(&s);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.contains("lucid,absent"));
    }

    #[test]
    fn kfold_partition_arithmetic() {
        let folds = kfold_indices(23, 5, 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(folds, kfold_indices(23, 5, 3).unwrap());
        assert!(kfold_indices(3, 5, 0).is_err());
        let seen = std::cell::RefCell::new(Vec::new());
        let summary = kfold(5, 5, 0, |_, train, test| {
            assert_eq!((train.len(), test.len()), (4, 1));
            seen.borrow_mut().push(test[0]);
            multilabel_metrics(&rows(&[&[1.0]]), &rows(&[&[1.0]]), 0.5)
        })
        .unwrap();
        assert_eq!(summary.folds.len(), 5);
        assert_eq!(summary.mean.f1, 1.0);
        assert_eq!(summary.std.f1, 0.0);
        let mut s = seen.into_inner();
        s.sort_unstable();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn rule_baseline_contract() {
        let rb = RuleBaseline::default();
        let p = rb.predict("");
        assert!(p.themes.iter().chain(&p.emotions).all(|&v| v == 0.0));
        let p = rb.predict("I was flying over the town.");
        assert_eq!(p.themes[0], 1.0);
        assert_eq!(p.themes.iter().sum::<f64>(), 1.0);
        assert!(p.emotions.iter().zip(&rb.priors[0]).all(|(a, b)| close(*a, *b)));
    }

    #[test]
    fn csv_layouts() {
        let y = rows(&[&[1.0, 0.0]]);
        let m = multilabel_metrics(&y, &y, 0.5).unwrap();
        let csv = metrics_csv(&[("DNet-M".into(), m)]);
        assert_eq!(csv, "model,accuracy,f1,precision,recall,auc,subset_accuracy,n\nDNet-M,1.000000,1.000000,1.000000,1.000000,NA,1.000000,1\n");
        let grid = vec![vec![None; N_EMOTIONS]; N_THEMES];
        let csv = correlation_grid_csv(&grid, |c| c.r);
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.starts_with("theme,joy,fear,anxiety"));
    }
}
