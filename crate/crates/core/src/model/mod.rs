//! Text encoder, Bi-LSTM, physiological encoder, cross-attention fusion and
//! the sigmoid classifier heads.

mod config;
mod net;
mod params;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{Fusion, ModelConfig, Temporal, FUSED_DIM, N_EMOTIONS, N_THEMES};
pub use net::{sinusoidal_positions, Ctx, ForwardVars, Mode};
pub use params::{is_encoder_param, ModelParams};

use crate::checkpoint::Checkpoint;
use crate::config::apply_kv_text;
use crate::eeg::BandFeatures;
use crate::error::{DreamError, Result};
use crate::tensor::Tensor;
use crate::text::{TokenSequence, PAD};

/// Emotion and theme probabilities for one narrative.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub emotions: Vec<f64>,
    pub themes: Vec<f64>,
    /// One row of attention weights per fusion head, when fusion ran.
    pub attention: Option<Vec<Vec<f64>>>,
}

impl Prediction {
    /// Emotions followed by themes, the layout used by the metrics.
    pub fn joint(&self) -> Vec<f64> {
        self.emotions.iter().chain(&self.themes).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Model { config, params })
    }

    pub fn ctx(&self, mode: Mode) -> Ctx<'_> {
        Ctx::new(&self.config, &self.params, mode)
    }

    fn check_seq(&self, seq: &TokenSequence) -> Result<()> {
        if seq.true_len == 0 || seq.true_len > seq.ids.len() {
            return Err(DreamError::input(format!(
                "sequence true_len {} invalid for length {}",
                seq.true_len,
                seq.ids.len()
            )));
        }
        Ok(())
    }

    /// Encoder output for every position of the padded sequence
    /// (`max_len × d_model`); PAD keys are masked out of attention.
    pub fn encode_text(&self, seq: &TokenSequence, mode: Mode) -> Result<Tensor> {
        self.check_seq(seq)?;
        let mask: Vec<bool> = seq.ids.iter().enumerate().map(|(i, _)| i < seq.true_len).collect();
        debug_assert!(seq.ids[seq.true_len..].iter().all(|&id| id == PAD));
        let mut ctx = self.ctx(mode);
        let h = ctx.encode(&seq.ids, Some(&mask))?;
        Ok(ctx.g.to_tensor(h))
    }

    /// `h_t` (length 128) from encoder states.
    pub fn bilstm(&self, h_x: &Tensor, true_len: usize) -> Result<Vec<f64>> {
        let mut ctx = self.ctx(Mode::Eval);
        let x = ctx.g.constant(h_x.rows(), h_x.cols(), h_x.data().to_vec())?;
        let h = ctx.bilstm(x, true_len)?;
        Ok(ctx.g.value(h).to_vec())
    }

    /// Physiological tokens `h_p` (`N_p × 128`).
    pub fn phys_encode(&self, features: &BandFeatures) -> Result<Tensor> {
        let mut ctx = self.ctx(Mode::Eval);
        let h = ctx.phys_encode(&features.values)?;
        Ok(ctx.g.to_tensor(h))
    }

    /// Fused state `h_f` and the per-head attention weights.
    pub fn cross_attention(&self, h_t: &[f64], h_p: &Tensor) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut ctx = self.ctx(Mode::Eval);
        let t = ctx.g.constant(1, h_t.len(), h_t.to_vec())?;
        let p = ctx.g.constant(h_p.rows(), h_p.cols(), h_p.data().to_vec())?;
        let (f, w) = ctx.cross_attention(t, p)?;
        let weights = w.iter().map(|&v| ctx.g.value(v).to_vec()).collect();
        Ok((ctx.g.value(f).to_vec(), weights))
    }

    pub fn forward(&self, seq: &TokenSequence, features: Option<&BandFeatures>, mode: Mode) -> Result<Prediction> {
        self.check_seq(seq)?;
        let mut ctx = self.ctx(mode);
        let out = ctx.forward(seq.active_ids(), features)?;
        Ok(Prediction {
            emotions: ctx.g.value(out.emotions).to_vec(),
            themes: ctx.g.value(out.themes).to_vec(),
            attention: out
                .attention
                .map(|ws| ws.iter().map(|&w| ctx.g.value(w).to_vec()).collect()),
        })
    }

    /// Per-position vocabulary logits (`rows(h_x) × vocab_size`).
    pub fn mlm_logits(&self, h_x: &Tensor) -> Result<Tensor> {
        let mut ctx = self.ctx(Mode::Eval);
        let x = ctx.g.constant(h_x.rows(), h_x.cols(), h_x.data().to_vec())?;
        let l = ctx.mlm_logits(x)?;
        Ok(ctx.g.to_tensor(l))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: self.config.to_kv(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| {
                    let mut t = t.clone();
                    t.zero_grad();
                    (n.to_string(), t)
                })
                .collect(),
        }
    }

    /// Rebuilds a model from a checkpoint, validating every tensor against
    /// the shapes the echoed configuration implies.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut config = ModelConfig::default();
        apply_kv_text(&mut config, &ck.header)?;
        let mut model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.load_matching(ck, |_| true, true)?;
        Ok(model)
    }

    /// Copies tensors named in `ck` that satisfy `filter` into this model.
    /// Shapes must agree. With `require_all`, every parameter of this model
    /// must be present in the checkpoint. Returns the number copied.
    pub fn load_matching(&mut self, ck: &Checkpoint, filter: impl Fn(&str) -> bool, require_all: bool) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in &ck.tensors {
            if !filter(name) {
                continue;
            }
            let Some(dst) = self.params.get_mut(name) else {
                if require_all {
                    return Err(DreamError::config(format!("checkpoint tensor {name:?} unknown to model")));
                }
                continue;
            };
            if dst.shape() != t.shape() {
                return Err(DreamError::config(format!(
                    "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
            copied += 1;
        }
        if require_all && copied != self.params.len() {
            return Err(DreamError::config(format!(
                "checkpoint provides {copied} of {} parameters",
                self.params.len()
            )));
        }
        Ok(copied)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Model::from_checkpoint(&ck).map_err(|e| DreamError::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}
