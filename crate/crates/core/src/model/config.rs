use std::fmt::Write as _;

use crate::config::{parse_value, KvApply};
use crate::error::{DreamError, Result};

pub const N_EMOTIONS: usize = 8;
pub const N_THEMES: usize = 12;
/// Width of `h_t`, of every physiological token and of `h_f`.
pub const FUSED_DIM: usize = 128;

/// How the token states are summarized into `h_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Temporal {
    BiLstm,
    /// Mean of the active rows of `h_x`, then a linear map to 128.
    MeanPool,
}

/// How `h_t` and the physiological tokens are combined when EEG is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    CrossAttention,
    /// `[h_t ; mean(h_p)]` through a linear map to 128.
    Concat,
    /// EEG ignored; `h_f = h_t` always.
    None,
}

impl Temporal {
    pub fn as_str(self) -> &'static str {
        match self {
            Temporal::BiLstm => "bilstm",
            Temporal::MeanPool => "meanpool",
        }
    }
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::CrossAttention => "cross_attention",
            Fusion::Concat => "concat",
            Fusion::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads_text: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub lstm_hidden: usize,
    pub mlp_dims: (usize, usize),
    pub fusion_heads: usize,
    pub fusion_d_k: usize,
    pub n_emotions: usize,
    pub n_themes: usize,
    pub dropout: f64,
    pub phys_tokens: usize,
    pub feature_dim: usize,
    pub layer_norm_eps: f64,
    pub temporal: Temporal,
    pub fusion: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads_text: 4,
            ff_dim: 256,
            max_len: 256,
            lstm_hidden: FUSED_DIM,
            mlp_dims: (256, FUSED_DIM),
            fusion_heads: 8,
            fusion_d_k: 16,
            n_emotions: N_EMOTIONS,
            n_themes: N_THEMES,
            dropout: 0.1,
            phys_tokens: 4,
            feature_dim: crate::eeg::DEFAULT_FEATURE_DIM,
            layer_norm_eps: 1e-5,
            temporal: Temporal::BiLstm,
            fusion: Fusion::CrossAttention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DreamError::Config(m));
        if self.vocab_size <= crate::text::RESERVED.len() {
            return bad(format!("vocab_size {} leaves no room for tokens", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads_text == 0 || self.d_model % self.n_heads_text != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads_text {}",
                self.d_model, self.n_heads_text
            ));
        }
        if self.ff_dim == 0 || self.max_len == 0 {
            return bad("ff_dim and max_len must be positive".into());
        }
        if self.fusion_heads * self.fusion_d_k != FUSED_DIM {
            return bad(format!(
                "fusion_heads x fusion_d_k = {} must equal {FUSED_DIM}",
                self.fusion_heads * self.fusion_d_k
            ));
        }
        if self.lstm_hidden != FUSED_DIM || self.mlp_dims.1 != FUSED_DIM {
            return bad(format!("lstm_hidden and the last MLP width must equal {FUSED_DIM}"));
        }
        if self.mlp_dims.0 == 0 {
            return bad("MLP hidden width must be positive".into());
        }
        if self.n_emotions != N_EMOTIONS || self.n_themes != N_THEMES {
            return bad(format!("label schema is fixed at {N_EMOTIONS} emotions and {N_THEMES} themes"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.phys_tokens == 0 || self.phys_tokens > self.feature_dim {
            return bad(format!(
                "phys_tokens {} must lie in 1..={}",
                self.phys_tokens, self.feature_dim
            ));
        }
        Ok(())
    }

    /// Length of one physiological chunk: `ceil(D / N_p)`.
    pub fn chunk_len(&self) -> usize {
        self.feature_dim.div_ceil(self.phys_tokens)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads_text
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        let _ = writeln!(s, "d_model={}", self.d_model);
        let _ = writeln!(s, "n_layers={}", self.n_layers);
        let _ = writeln!(s, "n_heads_text={}", self.n_heads_text);
        let _ = writeln!(s, "ff_dim={}", self.ff_dim);
        let _ = writeln!(s, "max_len={}", self.max_len);
        let _ = writeln!(s, "lstm_hidden={}", self.lstm_hidden);
        let _ = writeln!(s, "mlp_dims={},{}", self.mlp_dims.0, self.mlp_dims.1);
        let _ = writeln!(s, "fusion_heads={}", self.fusion_heads);
        let _ = writeln!(s, "fusion_d_k={}", self.fusion_d_k);
        let _ = writeln!(s, "n_emotions={}", self.n_emotions);
        let _ = writeln!(s, "n_themes={}", self.n_themes);
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "phys_tokens={}", self.phys_tokens);
        let _ = writeln!(s, "feature_dim={}", self.feature_dim);
        let _ = writeln!(s, "layer_norm_eps={}", self.layer_norm_eps);
        let _ = writeln!(s, "temporal={}", self.temporal.as_str());
        let _ = writeln!(s, "fusion={}", self.fusion.as_str());
        s
    }
}

impl KvApply for ModelConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "n_layers" => self.n_layers = parse_value(key, value)?,
            "n_heads_text" => self.n_heads_text = parse_value(key, value)?,
            "ff_dim" => self.ff_dim = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "lstm_hidden" => self.lstm_hidden = parse_value(key, value)?,
            "mlp_dims" => {
                let (a, b) = value
                    .split_once(',')
                    .ok_or_else(|| DreamError::config(format!("mlp_dims expects two values, got {value:?}")))?;
                self.mlp_dims = (parse_value(key, a.trim())?, parse_value(key, b.trim())?);
            }
            "fusion_heads" => self.fusion_heads = parse_value(key, value)?,
            "fusion_d_k" => self.fusion_d_k = parse_value(key, value)?,
            "n_emotions" => self.n_emotions = parse_value(key, value)?,
            "n_themes" => self.n_themes = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "phys_tokens" => self.phys_tokens = parse_value(key, value)?,
            "feature_dim" => self.feature_dim = parse_value(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = parse_value(key, value)?,
            "temporal" => {
                self.temporal = match value {
                    "bilstm" => Temporal::BiLstm,
                    "meanpool" => Temporal::MeanPool,
                    _ => return Err(DreamError::config(format!("unknown temporal module {value:?}"))),
                }
            }
            "fusion" => {
                self.fusion = match value {
                    "cross_attention" => Fusion::CrossAttention,
                    "concat" => Fusion::Concat,
                    "none" => Fusion::None,
                    _ => return Err(DreamError::config(format!("unknown fusion mode {value:?}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}
