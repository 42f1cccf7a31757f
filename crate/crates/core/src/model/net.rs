//! Graph builders for each stage of the network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Fusion, ModelConfig, Temporal, FUSED_DIM};
use super::params::ModelParams;
use crate::eeg::BandFeatures;
use crate::error::{DreamError, Result};
use crate::graph::{ComputeGraph, Var};

/// Evaluation disables dropout; training draws dropout masks from a
/// generator seeded with `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// A graph under construction together with the parameters it reads.
pub struct Ctx<'m> {
    pub g: ComputeGraph,
    pub cfg: &'m ModelConfig,
    params: &'m ModelParams,
    rng: Option<ChaCha8Rng>,
}

/// Graph nodes produced by a full forward pass.
pub struct ForwardVars {
    pub h_x: Var,
    pub h_t: Var,
    pub h_f: Var,
    pub emotions: Var,
    pub themes: Var,
    /// Per-head attention weights when cross-attention ran.
    pub attention: Option<Vec<Var>>,
}

impl<'m> Ctx<'m> {
    pub fn new(cfg: &'m ModelConfig, params: &'m ModelParams, mode: Mode) -> Self {
        Ctx {
            g: ComputeGraph::new(),
            cfg,
            params,
            rng: match mode {
                Mode::Eval => None,
                Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            },
        }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.g.param(id, self.params.by_id(id)))
    }

    /// `x · W + b`.
    pub fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = self.p(w)?;
        let b = self.p(b)?;
        let xw = self.g.matmul(x, w)?;
        self.g.add_row_bias(xw, b)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) if self.cfg.dropout > 0.0 => self.g.dropout(x, self.cfg.dropout, rng),
            _ => Ok(x),
        }
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.g.layer_norm(x, g, b, self.cfg.layer_norm_eps)
    }

    /// Transformer encoder over `ids`. `key_mask[j] == false` removes
    /// position `j` from every attention distribution. Returns `len × d_model`.
    pub fn encode(&mut self, ids: &[usize], key_mask: Option<&[bool]>) -> Result<Var> {
        let cfg = self.cfg;
        let (len, d) = (ids.len(), cfg.d_model);
        if len == 0 {
            return Err(DreamError::input("cannot encode an empty sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(DreamError::input(format!(
                "token id {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let table = self.p("enc.tok_emb")?;
        let tok = self.g.gather_rows(table, ids)?;
        let tok = self.g.scale(tok, (d as f64).sqrt());
        let pos = self.g.constant(len, d, sinusoidal_positions(len, d))?;
        let x = self.g.add(tok, pos)?;
        let x = self.layer_norm(x, "enc.emb_ln")?;
        let mut x = self.dropout(x)?;

        let (heads, dh) = (cfg.n_heads_text, cfg.head_dim());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.n_layers {
            let q = self.linear(x, &format!("enc.l{l}.wq"), &format!("enc.l{l}.bq"))?;
            // No key bias: it shifts every score in a row equally.
            let wk = self.p(&format!("enc.l{l}.wk"))?;
            let k = self.g.matmul(x, wk)?;
            let v = self.linear(x, &format!("enc.l{l}.wv"), &format!("enc.l{l}.bv"))?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = self.g.slice_cols(q, h * dh, dh)?;
                let kh = self.g.slice_cols(k, h * dh, dh)?;
                let vh = self.g.slice_cols(v, h * dh, dh)?;
                let kt = self.g.transpose(kh);
                let scores = self.g.matmul(qh, kt)?;
                let scores = self.g.scale(scores, inv_sqrt);
                let w = self.g.softmax_rows_masked(scores, key_mask)?;
                outs.push(self.g.matmul(w, vh)?);
            }
            let cat = if heads == 1 { outs[0] } else { self.g.concat_cols(&outs)? };
            let attn = self.linear(cat, &format!("enc.l{l}.wo"), &format!("enc.l{l}.bo"))?;
            let attn = self.dropout(attn)?;
            let res = self.g.add(x, attn)?;
            x = self.layer_norm(res, &format!("enc.l{l}.ln1"))?;

            let hidden = self.linear(x, &format!("enc.l{l}.ff1.w"), &format!("enc.l{l}.ff1.b"))?;
            let hidden = self.g.relu(hidden);
            let ff = self.linear(hidden, &format!("enc.l{l}.ff2.w"), &format!("enc.l{l}.ff2.b"))?;
            let ff = self.dropout(ff)?;
            let res = self.g.add(x, ff)?;
            x = self.layer_norm(res, &format!("enc.l{l}.ln2"))?;
        }
        Ok(x)
    }

    /// Bidirectional LSTM over the first `true_len` rows of `h_x`; returns
    /// `[final forward state ; final backward state]` as `1 × 128`.
    pub fn bilstm(&mut self, h_x: Var, true_len: usize) -> Result<Var> {
        if true_len == 0 {
            return Err(DreamError::input("Bi-LSTM needs at least one position"));
        }
        let (rows, _) = self.g.dims(h_x);
        if true_len > rows {
            return Err(DreamError::input(format!(
                "true_len {true_len} exceeds the {rows} encoded positions"
            )));
        }
        let xs = if true_len == rows {
            h_x
        } else {
            self.g.slice_rows(h_x, 0, true_len)?
        };
        let fwd = self.lstm_direction(xs, true_len, "fwd", false)?;
        let bwd = self.lstm_direction(xs, true_len, "bwd", true)?;
        self.g.concat_cols(&[fwd, bwd])
    }

    fn lstm_direction(&mut self, xs: Var, len: usize, dir: &str, reverse: bool) -> Result<Var> {
        let h = self.cfg.lstm_hidden / 2;
        let w_hh = self.p(&format!("lstm.{dir}.w_hh"))?;
        let pre = self.linear(xs, &format!("lstm.{dir}.w_ih"), &format!("lstm.{dir}.b"))?;
        let mut state: Option<(Var, Var)> = None;
        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            let mut gates = self.g.slice_rows(pre, t, 1)?;
            if let Some((h_prev, _)) = state {
                let rec = self.g.matmul(h_prev, w_hh)?;
                gates = self.g.add(gates, rec)?;
            }
            let i = self.g.slice_cols(gates, 0, h)?;
            let i = self.g.sigmoid(i);
            let f = self.g.slice_cols(gates, h, h)?;
            let f = self.g.sigmoid(f);
            let cand = self.g.slice_cols(gates, 2 * h, h)?;
            let cand = self.g.tanh(cand);
            let o = self.g.slice_cols(gates, 3 * h, h)?;
            let o = self.g.sigmoid(o);
            let mut c = self.g.mul(i, cand)?;
            if let Some((_, c_prev)) = state {
                let keep = self.g.mul(f, c_prev)?;
                c = self.g.add(keep, c)?;
            }
            let tc = self.g.tanh(c);
            let h_new = self.g.mul(o, tc)?;
            state = Some((h_new, c));
        }
        Ok(state.expect("len > 0").0)
    }

    /// Mean of the first `true_len` rows of `h_x`, projected to 128.
    pub fn mean_pool(&mut self, h_x: Var, true_len: usize) -> Result<Var> {
        if true_len == 0 {
            return Err(DreamError::input("mean pooling needs at least one position"));
        }
        let xs = self.g.slice_rows(h_x, 0, true_len)?;
        let m = self.g.mean_rows(xs);
        self.linear(m, "pool.w", "pool.b")
    }

    pub fn temporal(&mut self, h_x: Var, true_len: usize) -> Result<Var> {
        match self.cfg.temporal {
            Temporal::BiLstm => self.bilstm(h_x, true_len),
            Temporal::MeanPool => self.mean_pool(h_x, true_len),
        }
    }

    /// Splits the feature vector into `N_p` zero-padded chunks and maps each
    /// through the shared two-layer MLP. Returns `N_p × 128`.
    pub fn phys_encode(&mut self, features: &[f64]) -> Result<Var> {
        let cfg = self.cfg;
        if features.len() != cfg.feature_dim {
            return Err(DreamError::shape(
                "phys_encode",
                &[features.len()],
                &[cfg.feature_dim],
            ));
        }
        let (n_p, chunk) = (cfg.phys_tokens, cfg.chunk_len());
        if n_p * chunk < cfg.feature_dim || (n_p - 1) * chunk >= cfg.feature_dim {
            return Err(DreamError::config(format!(
                "{n_p} physiological tokens cannot tile {} features",
                cfg.feature_dim
            )));
        }
        let mut padded = features.to_vec();
        padded.resize(n_p * chunk, 0.0);
        let x = self.g.constant(n_p, chunk, padded)?;
        let hidden = self.linear(x, "phys.l1.w", "phys.l1.b")?;
        let hidden = self.g.relu(hidden);
        let hidden = self.dropout(hidden)?;
        self.linear(hidden, "phys.l2.w", "phys.l2.b")
    }

    /// Multi-head cross-attention with the query from `h_t` and keys/values
    /// from the physiological tokens, plus the residual `h_t`.
    pub fn cross_attention(&mut self, h_t: Var, h_p: Var) -> Result<(Var, Vec<Var>)> {
        let cfg = self.cfg;
        let (tr, tc) = self.g.dims(h_t);
        let (_, pc) = self.g.dims(h_p);
        if tr != 1 || tc != FUSED_DIM || pc != FUSED_DIM {
            return Err(DreamError::shape("cross_attention", &[tr, tc], &[pc]));
        }
        let wq = self.p("fuse.wq")?;
        let wk = self.p("fuse.wk")?;
        let wv = self.p("fuse.wv")?;
        let q = self.g.matmul(h_t, wq)?;
        let k = self.g.matmul(h_p, wk)?;
        let v = self.g.matmul(h_p, wv)?;
        let dk = cfg.fusion_d_k;
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(cfg.fusion_heads);
        let mut weights = Vec::with_capacity(cfg.fusion_heads);
        for h in 0..cfg.fusion_heads {
            let qh = self.g.slice_cols(q, h * dk, dk)?;
            let kh = self.g.slice_cols(k, h * dk, dk)?;
            let vh = self.g.slice_cols(v, h * dk, dk)?;
            let kt = self.g.transpose(kh);
            let scores = self.g.matmul(qh, kt)?;
            let scores = self.g.scale(scores, inv_sqrt);
            let w = self.g.softmax_rows(scores);
            outs.push(self.g.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = self.g.concat_cols(&outs)?;
        let proj = self.linear(cat, "fuse.wo", "fuse.bo")?;
        let fused = self.g.add(proj, h_t)?;
        Ok((fused, weights))
    }

    fn concat_fusion(&mut self, h_t: Var, h_p: Var) -> Result<Var> {
        let mean = self.g.mean_rows(h_p);
        let cat = self.g.concat_cols(&[h_t, mean])?;
        self.linear(cat, "fuse.concat.w", "fuse.concat.b")
    }

    /// Full network on the active prefix of a token sequence.
    pub fn forward(&mut self, active_ids: &[usize], features: Option<&BandFeatures>) -> Result<ForwardVars> {
        let h_x = self.encode(active_ids, None)?;
        let h_t = self.temporal(h_x, active_ids.len())?;
        let (h_f, attention) = match (features, self.cfg.fusion) {
            (Some(f), Fusion::CrossAttention) => {
                let h_p = self.phys_encode(&f.values)?;
                let (h_f, w) = self.cross_attention(h_t, h_p)?;
                (h_f, Some(w))
            }
            (Some(f), Fusion::Concat) => {
                let h_p = self.phys_encode(&f.values)?;
                (self.concat_fusion(h_t, h_p)?, None)
            }
            _ => (h_t, None),
        };
        let z = self.dropout(h_f)?;
        let e = self.linear(z, "head.emotion.w", "head.emotion.b")?;
        let emotions = self.g.sigmoid(e);
        let s = self.linear(z, "head.theme.w", "head.theme.b")?;
        let themes = self.g.sigmoid(s);
        Ok(ForwardVars {
            h_x,
            h_t,
            h_f,
            emotions,
            themes,
            attention,
        })
    }

    pub fn mlm_logits(&mut self, h_x: Var) -> Result<Var> {
        self.linear(h_x, "mlm.w", "mlm.b")
    }
}

/// Standard sine/cosine positional table, `len × d` row-major.
pub fn sinusoidal_positions(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
