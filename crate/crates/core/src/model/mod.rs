// SPDX-License-Identifier: MIT OR Apache-2.0

//! Miniature pre-norm transformer with encoder (bidirectional) and decoder
//! (causal) modes, activation recording and value-vector interventions.

mod backward;
mod checkpoint;
mod forward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

pub use backward::LossTarget;
pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, CheckpointHeader, TensorEntry};
pub use forward::{
    target_probability, ActivationTrace, ForwardOptions, ForwardOutput, Intervention, InterventionKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Bidirectional attention, masked-token prediction.
    Encoder,
    /// Causal attention, next-token prediction.
    Decoder,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Encoder => "encoder",
            Mode::Decoder => "decoder",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Mode::Encoder),
            "decoder" => Ok(Mode::Decoder),
            other => Err(Error::Invalid(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Share the LM head with the input embedding matrix.
    #[serde(default = "default_true")]
    pub tied_head: bool,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

fn default_true() -> bool {
    true
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn new(mode: Mode, n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize) -> Self {
        Self {
            mode,
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            vocab_size,
            max_len: 64,
            tied_head: true,
            ln_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 || self.max_len == 0 {
            return Err(Error::Invalid("vocab_size and max_len too small".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Invalid("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub w_q: Matrix,
    pub b_q: Matrix,
    pub w_k: Matrix,
    pub b_k: Matrix,
    pub w_v: Matrix,
    pub b_v: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w_ff1: Matrix,
    pub b_ff1: Matrix,
    pub w_ff2: Matrix,
    pub b_ff2: Matrix,
}

/// All trainable tensors. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
    pub lm_bias: Matrix,
    /// Separate `d_model × vocab` head when untied.
    pub lm_head: Option<Matrix>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(ln1_gain, ln1_bias, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_gain, ln2_bias, w_ff1, b_ff1, w_ff2, b_ff2)
    };
}

impl Weights {
    /// Zero tensors with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layer = || LayerWeights {
            ln1_gain: Matrix::zeros(1, d),
            ln1_bias: Matrix::zeros(1, d),
            w_q: Matrix::zeros(d, d),
            b_q: Matrix::zeros(1, d),
            w_k: Matrix::zeros(d, d),
            b_k: Matrix::zeros(1, d),
            w_v: Matrix::zeros(d, d),
            b_v: Matrix::zeros(1, d),
            w_o: Matrix::zeros(d, d),
            b_o: Matrix::zeros(1, d),
            ln2_gain: Matrix::zeros(1, d),
            ln2_bias: Matrix::zeros(1, d),
            w_ff1: Matrix::zeros(d, cfg.d_ff),
            b_ff1: Matrix::zeros(1, cfg.d_ff),
            w_ff2: Matrix::zeros(cfg.d_ff, d),
            b_ff2: Matrix::zeros(1, d),
        };
        Weights {
            tok_emb: Matrix::zeros(cfg.vocab_size, d),
            pos_emb: Matrix::zeros(cfg.max_len, d),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            lnf_gain: Matrix::zeros(1, d),
            lnf_bias: Matrix::zeros(1, d),
            lm_bias: Matrix::zeros(1, cfg.vocab_size),
            lm_head: (!cfg.tied_head).then(|| Matrix::zeros(d, cfg.vocab_size)),
        }
    }

    /// Gaussian initialization (std 0.02, residual projections scaled by
    /// `1/sqrt(2L)`), unit layer-norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut w = Self::zeros(cfg);
        let resid_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut fill = |m: &mut Matrix, std: f64| {
            for v in m.data_mut() {
                *v = std * rng.normal();
            }
        };
        fill(&mut w.tok_emb, 0.02);
        fill(&mut w.pos_emb, 0.02);
        for l in &mut w.layers {
            fill(&mut l.w_q, 0.02);
            fill(&mut l.w_k, 0.02);
            fill(&mut l.w_v, 0.02);
            fill(&mut l.w_o, 0.02 * resid_scale);
            fill(&mut l.w_ff1, 0.02);
            fill(&mut l.w_ff2, 0.02 * resid_scale);
            l.ln1_gain.fill(1.0);
            l.ln2_gain.fill(1.0);
        }
        if let Some(h) = &mut w.lm_head {
            fill(h, 0.02);
        }
        w.lnf_gain.fill(1.0);
        w
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => { $( out.push((format!("layers.{i}.{}", stringify!($f)), &l.$f)); )* };
            }
            layer_fields!(push);
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        out.push(("lm_bias".into(), &self.lm_bias));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    /// Mutable tensors in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            macro_rules! push {
                ($($f:ident),*) => { $( out.push(&mut l.$f); )* };
            }
            layer_fields!(push);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.lm_bias);
        if let Some(h) = &mut self.lm_head {
            out.push(h);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// `self += other * factor`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Weights, factor: f64) {
        let src: Vec<&Matrix> = other.tensors().into_iter().map(|(_, m)| m).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.data_mut().iter_mut().zip(s.data()) {
                *a += factor * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for m in self.tensors_mut() {
            m.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            weights: Weights::init(&config, rng),
            config,
        })
    }

    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let expected = Weights::zeros(&config);
        let shapes_match = expected
            .tensors()
            .iter()
            .zip(weights.tensors())
            .all(|((_, a), (_, b))| a.shape() == b.shape())
            && expected.tensors().len() == weights.tensors().len();
        if !shapes_match {
            return Err(Error::shape("Model::from_weights", "weights do not match config"));
        }
        Ok(Self { config, weights })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Output embedding row for `id` (tied or separate head).
    pub(crate) fn head_row(&self, id: usize, out: &mut [f64]) {
        match &self.weights.lm_head {
            None => out.copy_from_slice(self.weights.tok_emb.row(id)),
            Some(h) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = h.get(i, id);
                }
            }
        }
    }
}
