//! Python bindings: corpus generation, EEG featurization, the classifier and
//! the evaluation metrics.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dreamnet::config::KvApply;
use dreamnet::dataset::{self, GeneratorSpec};
use dreamnet::eeg::{self, BandFeatures, EegRecording, FeatureConfig};
use dreamnet::evaluation::{self, Averaging, MetricsReport};
use dreamnet::gradcheck::Coverage;
use dreamnet::model::{self as net, Mode, ModelConfig};
use dreamnet::text::{self, TokenSequence};
use dreamnet::training::{self, TrainConfig};
use dreamnet::DreamError;

fn py_err(e: DreamError) -> PyErr {
    match e {
        DreamError::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        DreamError::Io(_) | DreamError::Checkpoint { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn apply_overrides<C: KvApply>(cfg: &mut C, overrides: Option<HashMap<String, String>>) -> PyResult<()> {
    for (k, v) in overrides.unwrap_or_default() {
        if !cfg.apply(&k, &v).map_err(py_err)? {
            return Err(PyValueError::new_err(format!("unknown key {k:?}")));
        }
    }
    Ok(())
}

/// One generated narrative with its gold labels and optional EEG channels.
#[pyclass(get_all, frozen, skip_from_py_object)]
#[derive(Clone)]
struct Record {
    id: String,
    text: String,
    themes: Vec<u8>,
    emotions: Vec<u8>,
    dream_type: String,
    sample_rate: Option<f64>,
    eeg: Option<Vec<Vec<f64>>>,
}

#[pymethods]
impl Record {
    fn __repr__(&self) -> String {
        format!("Record(id={:?}, dream_type={:?}, eeg={})", self.id, self.dream_type, self.eeg.is_some())
    }
}

/// Synthetic corpus. `overrides` takes the same `key=value` pairs as a
/// config file (for example `{"mean_words": "20"}`).
#[pyfunction]
#[pyo3(signature = (n, seed=0, eeg_fraction=0.0, overrides=None))]
fn generate(n: usize, seed: u64, eeg_fraction: f64, overrides: Option<HashMap<String, String>>) -> PyResult<Vec<Record>> {
    let mut spec = GeneratorSpec::default();
    apply_overrides(&mut spec, overrides)?;
    spec.n = n;
    spec.seed = seed;
    spec.eeg_fraction = eeg_fraction;
    let mut data = dataset::generate(&spec).map_err(py_err)?;
    Ok(data
        .records
        .into_iter()
        .map(|r| {
            let rec = data.eeg.remove(&r.id);
            Record {
                themes: r.themes,
                emotions: r.emotions,
                dream_type: r.dream_type.as_str().to_string(),
                sample_rate: rec.as_ref().map(|e| e.sample_rate),
                eeg: rec.map(|e| e.channels),
                id: r.id,
                text: r.text,
            }
        })
        .collect())
}

#[pyfunction]
fn theme_names() -> Vec<&'static str> {
    dataset::THEMES.to_vec()
}

#[pyfunction]
fn emotion_names() -> Vec<&'static str> {
    dataset::EMOTIONS.to_vec()
}

/// Normalized band-power features of a multichannel recording.
#[pyfunction]
#[pyo3(signature = (channels, sample_rate=eeg::DEFAULT_SAMPLE_RATE, dim=eeg::DEFAULT_FEATURE_DIM, window_sec=2.0, hop_sec=1.0))]
fn featurize(channels: Vec<Vec<f64>>, sample_rate: f64, dim: usize, window_sec: f64, hop_sec: f64) -> PyResult<Vec<f64>> {
    let rec = EegRecording::new(sample_rate, channels).map_err(py_err)?;
    let cfg = FeatureConfig { dim, window_sec, hop_sec };
    Ok(eeg::featurize(&rec, &cfg).map_err(py_err)?.values)
}

/// Welch power spectral density; returns `(frequencies, power)`.
#[pyfunction]
#[pyo3(signature = (signal, sample_rate, window_len, overlap=0.5))]
fn welch_psd(signal: Vec<f64>, sample_rate: f64, window_len: usize, overlap: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let psd = eeg::welch_psd(&signal, sample_rate, window_len, overlap).map_err(py_err)?;
    let freqs = (0..psd.power.len()).map(|b| psd.freq(b)).collect();
    Ok((freqs, psd.power))
}

#[pyclass(frozen, skip_from_py_object)]
struct Vocab {
    inner: text::Vocab,
}

#[pymethods]
impl Vocab {
    #[new]
    #[pyo3(signature = (texts, min_freq=text::DEFAULT_MIN_FREQ))]
    fn new(texts: Vec<String>, min_freq: usize) -> PyResult<Self> {
        Ok(Vocab {
            inner: text::Vocab::build(&texts, min_freq).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Vocab {
            inner: text::Vocab::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn id(&self, token: &str) -> usize {
        self.inner.id(token)
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    /// `(ids, true_len)`: exactly `max_len` ids starting with CLS.
    fn tokenize(&self, text: &str, max_len: usize) -> (Vec<usize>, usize) {
        let seq = text::tokenize(text, &self.inner, max_len);
        (seq.ids, seq.true_len)
    }
}

/// Emotion and theme probabilities for one narrative.
#[pyclass(get_all, frozen, skip_from_py_object)]
#[derive(Clone)]
struct Prediction {
    emotions: Vec<f64>,
    themes: Vec<f64>,
    attention: Option<Vec<Vec<f64>>>,
}

#[pyclass(skip_from_py_object)]
struct Model {
    inner: net::Model,
}

#[pymethods]
impl Model {
    /// Fresh model. `overrides` accepts model config keys such as
    /// `d_model`, `temporal` or `fusion`.
    #[new]
    #[pyo3(signature = (vocab_size, seed=0, overrides=None))]
    fn new(vocab_size: usize, seed: u64, overrides: Option<HashMap<String, String>>) -> PyResult<Self> {
        let mut cfg = ModelConfig {
            vocab_size,
            ..ModelConfig::default()
        };
        apply_overrides(&mut cfg, overrides)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Model {
            inner: net::Model::new(cfg, &mut rng).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: net::Model::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.inner.config.max_len
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.config.feature_dim
    }

    fn config(&self) -> String {
        self.inner.config.to_kv()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|(n, _)| n.to_string()).collect()
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.numel()
    }

    /// Eval-mode forward pass over `max_len` ids (as from `Vocab.tokenize`).
    #[pyo3(signature = (ids, true_len, features=None))]
    fn predict(&self, ids: Vec<usize>, true_len: usize, features: Option<Vec<f64>>) -> PyResult<Prediction> {
        if true_len == 0 || true_len > ids.len() {
            return Err(PyValueError::new_err(format!("true_len {true_len} outside 1..={}", ids.len())));
        }
        let seq = TokenSequence { ids, true_len };
        let feats = features.map(|values| BandFeatures { values });
        let p = self.inner.forward(&seq, feats.as_ref(), Mode::Eval).map_err(py_err)?;
        Ok(Prediction {
            emotions: p.emotions,
            themes: p.themes,
            attention: p.attention,
        })
    }
}

/// Multilabel scores as a plain dict.
#[pyclass(get_all, frozen, skip_from_py_object)]
struct Metrics {
    n: usize,
    accuracy: f64,
    subset_accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    auc: Option<f64>,
    per_label_f1: Vec<f64>,
}

impl From<MetricsReport> for Metrics {
    fn from(r: MetricsReport) -> Self {
        Metrics {
            n: r.n,
            accuracy: r.accuracy,
            subset_accuracy: r.subset_accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            auc: r.auc,
            per_label_f1: r.per_label.iter().map(|l| l.f1).collect(),
        }
    }
}

#[pyfunction]
#[pyo3(signature = (probs, labels, tau=0.5, average="micro"))]
fn multilabel_metrics(probs: Vec<Vec<f64>>, labels: Vec<Vec<f64>>, tau: f64, average: &str) -> PyResult<Metrics> {
    let averaging = match average {
        "micro" => Averaging::Micro,
        "macro" => Averaging::Macro,
        other => return Err(PyValueError::new_err(format!("average must be micro or macro, got {other:?}"))),
    };
    evaluation::multilabel_metrics_with(&probs, &labels, tau, averaging)
        .map(Metrics::from)
        .map_err(py_err)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    evaluation::auc(&scores, &labels).map_err(py_err)
}

#[pyfunction]
fn pearson_r(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    evaluation::pearson_r(&x, &y).map_err(py_err)
}

/// `(r, p)` with a two-sided permutation p-value.
#[pyfunction]
#[pyo3(signature = (x, y, n_perm=evaluation::MIN_PERMUTATIONS, seed=0))]
fn pearson_permutation(x: Vec<f64>, y: Vec<f64>, n_perm: usize, seed: u64) -> PyResult<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    evaluation::pearson_permutation(&x, &y, n_perm, &mut rng).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (p, y, eps=1e-7))]
fn bce(p: f64, y: f64, eps: f64) -> f64 {
    training::bce(p, y, eps)
}

/// Finite-difference check of the full multimodal graph at a small width.
/// Returns `(max_rel_error, coordinates_checked)`.
#[pyfunction]
#[pyo3(signature = (d_model=16, seed=0, eps=1e-5, coords=40))]
fn grad_check(d_model: usize, seed: u64, eps: f64, coords: usize) -> PyResult<(f64, usize)> {
    let cfg = ModelConfig {
        vocab_size: 30,
        d_model,
        n_heads_text: if d_model % 2 == 0 { 2 } else { 1 },
        ff_dim: 2 * d_model,
        max_len: 12,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let coverage = if coords == 0 { Coverage::All } else { Coverage::Sampled(coords) };
    let (model, sample) = training::grad_check_fixture(&cfg, seed).map_err(py_err)?;
    let r = training::grad_check_model(&model, &sample, &TrainConfig::default(), eps, coverage).map_err(py_err)?;
    Ok((r.max_rel_error, r.coords_checked))
}

#[pymodule]
fn dreamnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Record>()?;
    m.add_class::<Vocab>()?;
    m.add_class::<Model>()?;
    m.add_class::<Prediction>()?;
    m.add_class::<Metrics>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(theme_names, m)?)?;
    m.add_function(wrap_pyfunction!(emotion_names, m)?)?;
    m.add_function(wrap_pyfunction!(featurize, m)?)?;
    m.add_function(wrap_pyfunction!(welch_psd, m)?)?;
    m.add_function(wrap_pyfunction!(multilabel_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_r, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_permutation, m)?)?;
    m.add_function(wrap_pyfunction!(bce, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
