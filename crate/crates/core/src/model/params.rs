use std::collections::HashMap;

use rand::Rng;

use super::config::{Fusion, ModelConfig, Temporal, FUSED_DIM};
use crate::error::{DreamError, Result};
use crate::graph::Gradients;
use crate::tensor::Tensor;

/// Every learnable tensor, addressed by name. The position of a tensor in
/// the store is its parameter id inside compute graphs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, tensor));
            }
        }
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| DreamError::config(format!("model has no parameter {name:?}")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn by_id(&self, id: usize) -> &Tensor {
        &self.entries[id].1
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Adds `scale ×` every parameter gradient in `grads` into the stored
    /// gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (id, g) in grads.params() {
            let t = &mut self.entries[id].1;
            if scale == 1.0 {
                t.accumulate_grad(g)?;
            } else {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                t.accumulate_grad(&scaled)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Initializes every tensor the configuration needs. Weights and biases
    /// are drawn from `U(−1/√fan_in, 1/√fan_in)`; layer-norm scales start at
    /// one and shifts at zero.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut p = ModelParams::new();
        let d = cfg.d_model;
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
            Tensor::matrix(rows, cols, data).expect("dims match")
        };
        let ones = |n: usize| Tensor::matrix(1, n, vec![1.0; n]).expect("dims match");
        let zeros = |n: usize| Tensor::zeros(vec![1, n]);

        // Token rows behave like a d-wide linear map.
        p.insert("enc.tok_emb", uniform(cfg.vocab_size, d, d));
        p.insert("enc.emb_ln.g", ones(d));
        p.insert("enc.emb_ln.b", zeros(d));
        for l in 0..cfg.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("enc.l{l}.{w}"), uniform(d, d, d));
                if w != "wk" {
                    p.insert(format!("enc.l{l}.b{}", &w[1..]), uniform(1, d, d));
                }
            }
            p.insert(format!("enc.l{l}.ln1.g"), ones(d));
            p.insert(format!("enc.l{l}.ln1.b"), zeros(d));
            p.insert(format!("enc.l{l}.ff1.w"), uniform(d, cfg.ff_dim, d));
            p.insert(format!("enc.l{l}.ff1.b"), uniform(1, cfg.ff_dim, d));
            p.insert(format!("enc.l{l}.ff2.w"), uniform(cfg.ff_dim, d, cfg.ff_dim));
            p.insert(format!("enc.l{l}.ff2.b"), uniform(1, d, cfg.ff_dim));
            p.insert(format!("enc.l{l}.ln2.g"), ones(d));
            p.insert(format!("enc.l{l}.ln2.b"), zeros(d));
        }

        match cfg.temporal {
            Temporal::BiLstm => {
                let h = cfg.lstm_hidden / 2;
                for dir in ["fwd", "bwd"] {
                    p.insert(format!("lstm.{dir}.w_ih"), uniform(d, 4 * h, h));
                    p.insert(format!("lstm.{dir}.w_hh"), uniform(h, 4 * h, h));
                    // Forget gate starts open so early tokens survive to the final state.
                    let mut b = uniform(1, 4 * h, h);
                    b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
                    p.insert(format!("lstm.{dir}.b"), b);
                }
            }
            Temporal::MeanPool => {
                p.insert("pool.w", uniform(d, FUSED_DIM, d));
                p.insert("pool.b", uniform(1, FUSED_DIM, d));
            }
        }

        if cfg.fusion != Fusion::None {
            let (h1, h2) = cfg.mlp_dims;
            let c = cfg.chunk_len();
            p.insert("phys.l1.w", uniform(c, h1, c));
            p.insert("phys.l1.b", uniform(1, h1, c));
            p.insert("phys.l2.w", uniform(h1, h2, h1));
            p.insert("phys.l2.b", uniform(1, h2, h1));
        }
        match cfg.fusion {
            Fusion::CrossAttention => {
                for w in ["wq", "wk", "wv", "wo"] {
                    p.insert(format!("fuse.{w}"), uniform(FUSED_DIM, FUSED_DIM, FUSED_DIM));
                }
                p.insert("fuse.bo", uniform(1, FUSED_DIM, FUSED_DIM));
            }
            Fusion::Concat => {
                p.insert("fuse.concat.w", uniform(2 * FUSED_DIM, FUSED_DIM, 2 * FUSED_DIM));
                p.insert("fuse.concat.b", uniform(1, FUSED_DIM, 2 * FUSED_DIM));
            }
            Fusion::None => {}
        }

        p.insert("head.emotion.w", uniform(FUSED_DIM, cfg.n_emotions, FUSED_DIM));
        p.insert("head.emotion.b", uniform(1, cfg.n_emotions, FUSED_DIM));
        p.insert("head.theme.w", uniform(FUSED_DIM, cfg.n_themes, FUSED_DIM));
        p.insert("head.theme.b", uniform(1, cfg.n_themes, FUSED_DIM));
        p.insert("mlm.w", uniform(d, cfg.vocab_size, d));
        p.insert("mlm.b", uniform(1, cfg.vocab_size, d));
        Ok(p)
    }
}

/// Names belonging to the text encoder (embeddings and transformer layers).
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.")
}
