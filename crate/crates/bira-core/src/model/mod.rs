//! A tiny decoder-only transformer with exact hand-written gradients.
//!
//! Pre-norm residual blocks (LayerNorm -> causal multi-head attention,
//! LayerNorm -> GELU MLP), learned positional embeddings, a final LayerNorm,
//! and an untied output head. Everything runs in f64 on one thread so the
//! finite-difference gradient checks are meaningful and every run is
//! bit-reproducible.

mod backward;
mod forward;

pub use backward::backward;
pub use forward::{
    forward, greedy_decode, log_softmax_row, logprob_sequence, softmax_row, DecodeOutcome,
    ForwardTrace,
};

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.context_len == 0
            || self.vocab_size == 0
        {
            return Err(Error::config("model dimensions must all be at least 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Dense row-major tensor of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: Vec<usize>) -> Tensor {
        let n = dims.iter().product::<usize>().max(1);
        Tensor {
            data: vec![0.0; n],
            dims,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn fill_gauss(&mut self, rng: &mut Rng, std: f64) {
        for x in &mut self.data {
            *x = rng.gauss() * std;
        }
    }

    fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl NormParams {
    fn zeros(d: usize) -> NormParams {
        NormParams {
            gain: Tensor::zeros(vec![d]),
            bias: Tensor::zeros(vec![d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: NormParams,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: NormParams,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// The full named tensor set. Gradients reuse this container, so parameter
/// and gradient traversal are always structurally aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: NormParams,
    pub head: Tensor,
}

impl ModelParams {
    /// Deterministic init: scaled normal weights, norms at identity. The
    /// residual output projections are scaled down by 1/sqrt(2 * n_layers).
    pub fn init(config: ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let mut p = ModelParams::zeros(config)?;
        let base_std = 0.02;
        let resid_std = base_std / ((2 * config.n_layers) as f64).sqrt();
        for (name, t) in p.tensors_mut() {
            let mut rng = Rng::derive(config.init_seed, &name, 0);
            if name.ends_with("norm/gain") {
                t.fill(1.0);
            } else if name.ends_with("norm/bias") {
                t.fill(0.0);
            } else if name.ends_with("/wo") || name.ends_with("/w_down") {
                t.fill_gauss(&mut rng, resid_std);
            } else {
                t.fill_gauss(&mut rng, base_std);
            }
        }
        Ok(p)
    }

    /// All-zero parameters of the right shape (also the uniform-logit model).
    pub fn zeros(config: ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: NormParams::zeros(d),
                wq: Tensor::zeros(vec![d, d]),
                wk: Tensor::zeros(vec![d, d]),
                wv: Tensor::zeros(vec![d, d]),
                wo: Tensor::zeros(vec![d, d]),
                mlp_norm: NormParams::zeros(d),
                w_up: Tensor::zeros(vec![config.d_ff, d]),
                w_down: Tensor::zeros(vec![d, config.d_ff]),
            })
            .collect();
        Ok(ModelParams {
            config,
            tok_emb: Tensor::zeros(vec![config.vocab_size, d]),
            pos_emb: Tensor::zeros(vec![config.context_len, d]),
            layers,
            final_norm: NormParams::zeros(d),
            head: Tensor::zeros(vec![config.vocab_size, d]),
        })
    }

    /// Zero gradients (or moments) with this parameter set's shapes.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams::zeros(self.config).expect("existing config is valid")
    }

    /// Uniform-logit model: all-zero weights give exactly uniform next-token
    /// distributions at every position, which several closed-form tests use.
    pub fn uniform(config: ModelConfig) -> Result<ModelParams> {
        ModelParams::zeros(config)
    }

    /// Tensors in canonical order with stable names.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("tok_emb".to_string(), &self.tok_emb));
        out.push(("pos_emb".to_string(), &self.pos_emb));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}/attn_norm/gain"), &l.attn_norm.gain));
            out.push((format!("layer{i}/attn_norm/bias"), &l.attn_norm.bias));
            out.push((format!("layer{i}/wq"), &l.wq));
            out.push((format!("layer{i}/wk"), &l.wk));
            out.push((format!("layer{i}/wv"), &l.wv));
            out.push((format!("layer{i}/wo"), &l.wo));
            out.push((format!("layer{i}/mlp_norm/gain"), &l.mlp_norm.gain));
            out.push((format!("layer{i}/mlp_norm/bias"), &l.mlp_norm.bias));
            out.push((format!("layer{i}/w_up"), &l.w_up));
            out.push((format!("layer{i}/w_down"), &l.w_down));
        }
        out.push(("final_norm/gain".to_string(), &self.final_norm.gain));
        out.push(("final_norm/bias".to_string(), &self.final_norm.bias));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("tok_emb".to_string(), &mut self.tok_emb));
        out.push(("pos_emb".to_string(), &mut self.pos_emb));
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}/attn_norm/gain"), &mut l.attn_norm.gain));
            out.push((format!("layer{i}/attn_norm/bias"), &mut l.attn_norm.bias));
            out.push((format!("layer{i}/wq"), &mut l.wq));
            out.push((format!("layer{i}/wk"), &mut l.wk));
            out.push((format!("layer{i}/wv"), &mut l.wv));
            out.push((format!("layer{i}/wo"), &mut l.wo));
            out.push((format!("layer{i}/mlp_norm/gain"), &mut l.mlp_norm.gain));
            out.push((format!("layer{i}/mlp_norm/bias"), &mut l.mlp_norm.bias));
            out.push((format!("layer{i}/w_up"), &mut l.w_up));
            out.push((format!("layer{i}/w_down"), &mut l.w_down));
        }
        out.push(("final_norm/gain".to_string(), &mut self.final_norm.gain));
        out.push(("final_norm/bias".to_string(), &mut self.final_norm.bias));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// True when every element of every tensor is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    /// Inner product over the whole flattened parameter space.
    pub fn dot(&self, other: &ModelParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .map(|((_, a), (_, b))| {
                a.data
                    .iter()
                    .zip(b.data.iter())
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
            })
            .sum()
    }

    /// self += alpha * other, elementwise across all tensors.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(b.data.iter()) {
                *x += alpha * y;
            }
        }
    }
}
