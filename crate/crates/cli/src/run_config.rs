//! Merged run configuration: generator, model, training and run-level keys
//! in one flat `key=value` namespace.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dreamnet::config::{parse_kv, parse_value, KvApply};
use dreamnet::dataset::GeneratorSpec;
use dreamnet::eeg::FeatureConfig;
use dreamnet::evaluation::MIN_PERMUTATIONS;
use dreamnet::model::ModelConfig;
use dreamnet::training::TrainConfig;
use dreamnet::{DreamError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: GeneratorSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
    pub seed: u64,
    pub split: (f64, f64, f64),
    pub tau: f64,
    pub min_freq: usize,
    pub n_perm: usize,
    pub ablation_seeds: Vec<u64>,
    pub folds: usize,
    pub data: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            spec: GeneratorSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            features: FeatureConfig::default(),
            seed: 0,
            split: (0.70, 0.20, 0.10),
            tau: 0.5,
            min_freq: dreamnet::text::DEFAULT_MIN_FREQ,
            n_perm: MIN_PERMUTATIONS,
            ablation_seeds: vec![1, 2, 3, 4, 5],
            folds: 5,
            data: None,
            ckpt: None,
            report_dir: None,
        }
    }
}

impl RunConfig {
    /// Propagates the run seed to the generator and the trainer.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.spec.seed = seed;
        self.train.seed = seed;
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DreamError::input(format!("config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (line, k, v) in parse_kv(&text)? {
            if !cfg.apply(&k, &v)? {
                return Err(DreamError::Parse {
                    line,
                    msg: format!("unknown key {k:?} in {}", path.display()),
                });
            }
        }
        Ok(cfg)
    }

    /// Every resolved value; loadable again with `from_file`.
    pub fn to_kv(&self) -> String {
        let mut s = String::from("# run\n");
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "split={},{},{}", self.split.0, self.split.1, self.split.2);
        let _ = writeln!(s, "tau={}", self.tau);
        let _ = writeln!(s, "min_freq={}", self.min_freq);
        let _ = writeln!(s, "n_perm={}", self.n_perm);
        let seeds: Vec<String> = self.ablation_seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "ablation_seeds={}", seeds.join(","));
        let _ = writeln!(s, "folds={}", self.folds);
        let _ = writeln!(s, "feature_window_sec={}", self.features.window_sec);
        let _ = writeln!(s, "feature_hop_sec={}", self.features.hop_sec);
        for (key, p) in [("data", &self.data), ("ckpt", &self.ckpt), ("report_dir", &self.report_dir)] {
            if let Some(p) = p {
                let _ = writeln!(s, "{key}={}", p.display());
            }
        }
        s.push_str("# generator\n");
        s.push_str(&self.spec.to_kv());
        s.push_str("# model\n");
        s.push_str(&self.model.to_kv());
        s.push_str("# training\n");
        s.push_str(&self.train.to_kv());
        s
    }
}

impl KvApply for RunConfig {
    /// Run-level keys first; otherwise every section that knows the key
    /// takes it (`dropout` reaches both model and trainer).
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "seed" => {
                self.set_seed(parse_value(key, value)?);
                return Ok(true);
            }
            "split" => {
                let v: Vec<f64> = value.split(',').map(|x| parse_value(key, x)).collect::<Result<_>>()?;
                let [a, b, c] = v[..] else {
                    return Err(DreamError::config(format!("split expects three ratios, got {value:?}")));
                };
                self.split = (a, b, c);
                return Ok(true);
            }
            "tau" => self.tau = parse_value(key, value)?,
            "min_freq" => self.min_freq = parse_value(key, value)?,
            "n_perm" => self.n_perm = parse_value(key, value)?,
            "ablation_seeds" => {
                self.ablation_seeds = value.split(',').map(|x| parse_value(key, x)).collect::<Result<_>>()?;
            }
            "folds" => self.folds = parse_value(key, value)?,
            "feature_window_sec" => self.features.window_sec = parse_value(key, value)?,
            "feature_hop_sec" => self.features.hop_sec = parse_value(key, value)?,
            "data" => self.data = Some(value.into()),
            "ckpt" => self.ckpt = Some(value.into()),
            "report_dir" => self.report_dir = Some(value.into()),
            _ => {
                let a = self.spec.apply(key, value)?;
                let b = self.model.apply(key, value)?;
                let c = self.train.apply(key, value)?;
                return Ok(a || b || c);
            }
        }
        Ok(true)
    }
}
