// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::{LayerWeights, Mode, Model};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, dot, layer_norm_into, softmax_in_place, vecmat_into, Matrix};
use crate::tokenizer::PAD;

/// What happens to a value vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InterventionKind {
    ZeroValue,
    /// Replacement vectors, one per head, each `head_dim` long.
    ReplaceValue(Vec<Vec<f64>>),
}

/// Edit of one token's value vector at one layer, applied after the value
/// projection and before attention-weighted mixing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub layer: usize,
    pub position: usize,
    pub kind: InterventionKind,
}

impl Intervention {
    pub fn zero(layer: usize, position: usize) -> Self {
        Self { layer, position, kind: InterventionKind::ZeroValue }
    }

    pub fn replace(layer: usize, position: usize, per_head: Vec<Vec<f64>>) -> Self {
        Self { layer, position, kind: InterventionKind::ReplaceValue(per_head) }
    }
}

/// Recorded activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// `attention[l][h]` is the `T × T` post-softmax pattern.
    pub attention: Vec<Vec<Matrix>>,
    /// `values[l]` is `T × d_model`; head `h` occupies columns `h*hd..(h+1)*hd`.
    pub values: Vec<Matrix>,
    /// `hidden[0]` is the input embedding, `hidden[l]` the output of block `l-1`.
    pub hidden: Vec<Matrix>,
    pub head_dim: usize,
}

impl ActivationTrace {
    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    pub fn seq_len(&self) -> usize {
        self.hidden[0].rows()
    }

    pub fn n_heads(&self) -> usize {
        self.attention.first().map_or(0, Vec::len)
    }

    /// Value vector of `position` for head `head` at `layer`.
    pub fn value(&self, layer: usize, head: usize, position: usize) -> &[f64] {
        let hd = self.head_dim;
        &self.values[layer].row(position)[head * hd..(head + 1) * hd]
    }

    /// Per-head value vectors of `position` at `layer`.
    pub fn value_heads(&self, layer: usize, position: usize) -> Vec<Vec<f64>> {
        (0..self.n_heads()).map(|h| self.value(layer, h, position).to_vec()).collect()
    }

    /// `H[layer][target_pos]`.
    pub fn target_representation(&self, layer: usize, target_pos: usize) -> Result<&[f64]> {
        let h = self
            .hidden
            .get(layer)
            .ok_or_else(|| Error::OutOfRange(format!("layer {layer} > {}", self.n_layers())))?;
        if target_pos >= h.rows() {
            return Err(Error::OutOfRange(format!("target position {target_pos} >= {}", h.rows())));
        }
        Ok(h.row(target_pos))
    }
}

/// Result of [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `T × vocab`. Rows not requested through
    /// [`ForwardOptions::logit_rows`] are zero.
    pub logits: Matrix,
    pub trace: Option<ActivationTrace>,
}

/// Knobs for [`Model::forward_with`].
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a> {
    pub interventions: &'a [Intervention],
    pub record: bool,
    /// Start at block `resume_layer`, taking its input and all earlier
    /// activations from `base`.
    pub base: Option<&'a ActivationTrace>,
    pub resume_layer: usize,
    /// Reuse the attention patterns of `base` at every computed layer.
    pub freeze_attention: bool,
    /// Only compute logits at these rows.
    pub logit_rows: Option<&'a [usize]>,
}

/// Per-layer state kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerState {
    pub a: Matrix,
    pub ln1: Vec<(f64, f64)>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<Matrix>,
    pub ctx: Matrix,
    pub mid: Matrix,
    pub b: Matrix,
    pub ln2: Vec<(f64, f64)>,
    pub f: Matrix,
    pub attn_mask: Option<Matrix>,
    pub mlp_mask: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardState {
    pub hidden: Vec<Matrix>,
    pub layers: Vec<LayerState>,
    pub z: Matrix,
    pub lnf: Vec<(f64, f64)>,
}

/// Scratch buffers for [`block_tail_row`].
pub(crate) struct RowScratch {
    d: Vec<f64>,
    ff: Vec<f64>,
}

impl RowScratch {
    pub fn new(d_model: usize, d_ff: usize) -> Self {
        Self { d: vec![0.0; d_model], ff: vec![0.0; d_ff] }
    }
}

/// `ctx[t] = Σ_j P[h][t][j] · v[j]` per head. Zero weights are skipped.
pub(crate) fn context_row(probs: &[Matrix], values: &Matrix, t: usize, head_dim: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (h, p) in probs.iter().enumerate() {
        let seg = h * head_dim..(h + 1) * head_dim;
        let o = &mut out[seg.clone()];
        for (j, &w) in p.row(t).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (x, &vv) in o.iter_mut().zip(&values.row(j)[seg.clone()]) {
                *x += w * vv;
            }
        }
    }
}

/// Everything after attention mixing for one row: output projection,
/// residual, LN, MLP, residual. Writes the block output to `out` and the
/// intermediates to `mid`, `b` and `f`. Returns the second LN's moments.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_tail_row(
    lw: &LayerWeights,
    eps: f64,
    x_in: &[f64],
    ctx: &[f64],
    mid: &mut [f64],
    b: &mut [f64],
    f: &mut [f64],
    masks: (Option<&[f64]>, Option<&[f64]>),
    scratch: &mut RowScratch,
    out: &mut [f64],
) -> (f64, f64) {
    let tmp = &mut scratch.d;
    vecmat_into(ctx, &lw.w_o, tmp);
    for (t, &bias) in tmp.iter_mut().zip(lw.b_o.data()) {
        *t += bias;
    }
    if let Some(m) = masks.0 {
        for (t, &mv) in tmp.iter_mut().zip(m) {
            *t *= mv;
        }
    }
    for i in 0..mid.len() {
        mid[i] = x_in[i] + tmp[i];
    }
    let stats = layer_norm_into(mid, lw.ln2_gain.data(), lw.ln2_bias.data(), eps, b);
    vecmat_into(b, &lw.w_ff1, f);
    for (fv, &bias) in f.iter_mut().zip(lw.b_ff1.data()) {
        *fv += bias;
    }
    for (g, &fv) in scratch.ff.iter_mut().zip(f.iter()) {
        *g = tensor::gelu(fv);
    }
    vecmat_into(&scratch.ff, &lw.w_ff2, tmp);
    for (t, &bias) in tmp.iter_mut().zip(lw.b_ff2.data()) {
        *t += bias;
    }
    if let Some(m) = masks.1 {
        for (t, &mv) in tmp.iter_mut().zip(m) {
            *t *= mv;
        }
    }
    for i in 0..out.len() {
        out[i] = mid[i] + tmp[i];
    }
    stats
}

impl Model {
    /// Full forward pass.
    pub fn forward(&self, tokens: &[u32], interventions: &[Intervention], record: bool) -> Result<ForwardOutput> {
        self.forward_with(tokens, &ForwardOptions { interventions, record, ..Default::default() })
    }

    pub fn forward_with(&self, tokens: &[u32], opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
        let (logits, state) = self.run(tokens, opts, None)?;
        let trace = opts.record.then(|| self.trace_from(state, opts));
        Ok(ForwardOutput { logits, trace })
    }

    /// Resume from block `layer` of `base`, reusing its attention patterns at
    /// every layer from `layer` on.
    pub fn forward_from(
        &self,
        tokens: &[u32],
        base: &ActivationTrace,
        layer: usize,
        interventions: &[Intervention],
        record: bool,
        logit_rows: Option<&[usize]>,
    ) -> Result<ForwardOutput> {
        self.forward_with(
            tokens,
            &ForwardOptions {
                interventions,
                record,
                base: Some(base),
                resume_layer: layer,
                freeze_attention: true,
                logit_rows,
            },
        )
    }

    fn trace_from(&self, state: ForwardState, opts: &ForwardOptions<'_>) -> ActivationTrace {
        let start = opts.resume_layer;
        let mut attention = Vec::with_capacity(self.config.n_layers);
        let mut values = Vec::with_capacity(self.config.n_layers);
        if let Some(base) = opts.base {
            attention.extend(base.attention[..start].iter().cloned());
            values.extend(base.values[..start].iter().cloned());
        }
        for ls in state.layers {
            attention.push(ls.probs);
            values.push(ls.v);
        }
        ActivationTrace { attention, values, hidden: state.hidden, head_dim: self.config.head_dim() }
    }

    /// Token plus position embedding.
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let mut h = Matrix::zeros(tokens.len(), d);
        for (t, &id) in tokens.iter().enumerate() {
            let e = self.weights.tok_emb.row(id as usize);
            let p = self.weights.pos_emb.row(t);
            for (o, (a, b)) in h.row_mut(t).iter_mut().zip(e.iter().zip(p)) {
                *o = a + b;
            }
        }
        Ok(h)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::OutOfRange(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::OutOfRange(format!("token id {bad} >= vocab {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn check_interventions(&self, t_len: usize, opts: &ForwardOptions<'_>) -> Result<()> {
        let hd = self.config.head_dim();
        for iv in opts.interventions {
            if iv.layer >= self.config.n_layers || iv.layer < opts.resume_layer {
                return Err(Error::OutOfRange(format!(
                    "intervention layer {} outside {}..{}",
                    iv.layer, opts.resume_layer, self.config.n_layers
                )));
            }
            if iv.position >= t_len {
                return Err(Error::OutOfRange(format!("intervention position {} >= {t_len}", iv.position)));
            }
            if let InterventionKind::ReplaceValue(vs) = &iv.kind {
                if vs.len() != self.config.n_heads || vs.iter().any(|v| v.len() != hd) {
                    return Err(Error::shape(
                        "Intervention",
                        format!("expected {} vectors of length {hd}", self.config.n_heads),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Core pass. `dropout` is only used by training.
    pub(crate) fn run(
        &self,
        tokens: &[u32],
        opts: &ForwardOptions<'_>,
        mut dropout: Option<(f64, &mut Rng)>,
    ) -> Result<(Matrix, ForwardState)> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let t_len = tokens.len();
        self.check_interventions(t_len, opts)?;
        let (d, hd, nh) = (cfg.d_model, cfg.head_dim(), cfg.n_heads);
        let start = opts.resume_layer;
        if (start > 0 || opts.freeze_attention) && opts.base.is_none() {
            return Err(Error::Invalid("resume or frozen attention needs a base trace".into()));
        }
        if start >= cfg.n_layers && start != 0 {
            return Err(Error::OutOfRange(format!("resume layer {start} >= {}", cfg.n_layers)));
        }
        if let Some(base) = opts.base {
            if base.seq_len() != t_len || base.n_layers() != cfg.n_layers {
                return Err(Error::shape("forward", "base trace does not match input"));
            }
        }

        let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
        match opts.base {
            Some(base) if start > 0 => hidden.extend(base.hidden[..=start].iter().cloned()),
            _ => hidden.push(self.embed(tokens)?),
        }

        let allowed: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut scratch = RowScratch::new(d, cfg.d_ff);
        let mut layers = Vec::with_capacity(cfg.n_layers - start);

        for l in start..cfg.n_layers {
            let lw = &self.weights.layers[l];
            let x = &hidden[l];
            let mut a = Matrix::zeros(t_len, d);
            let mut ln1 = Vec::with_capacity(t_len);
            for t in 0..t_len {
                ln1.push(layer_norm_into(x.row(t), lw.ln1_gain.data(), lw.ln1_bias.data(), cfg.ln_eps, a.row_mut(t)));
            }
            let frozen = opts.freeze_attention.then(|| &opts.base.unwrap().attention[l]);
            let (q, k) = if frozen.is_some() {
                (Matrix::zeros(0, 0), Matrix::zeros(0, 0))
            } else {
                (project(&a, &lw.w_q, &lw.b_q), project(&a, &lw.w_k, &lw.b_k))
            };
            let mut v = project(&a, &lw.w_v, &lw.b_v);
            for iv in opts.interventions.iter().filter(|iv| iv.layer == l) {
                let row = v.row_mut(iv.position);
                match &iv.kind {
                    InterventionKind::ZeroValue => row.fill(0.0),
                    InterventionKind::ReplaceValue(heads) => {
                        for (h, src) in heads.iter().enumerate() {
                            row[h * hd..(h + 1) * hd].copy_from_slice(src);
                        }
                    }
                }
            }
            let probs = match frozen {
                Some(p) => p.clone(),
                None => (0..nh)
                    .map(|h| {
                        let mut p = Matrix::zeros(t_len, t_len);
                        let seg = h * hd..(h + 1) * hd;
                        for t in 0..t_len {
                            let limit = match cfg.mode {
                                Mode::Encoder => t_len,
                                Mode::Decoder => t + 1,
                            };
                            let qt = &q.row(t)[seg.clone()];
                            let row = p.row_mut(t);
                            for j in 0..limit {
                                if allowed[j] {
                                    row[j] = dot(qt, &k.row(j)[seg.clone()]) * scale;
                                }
                            }
                            softmax_in_place(row, limit, Some(&allowed));
                        }
                        p
                    })
                    .collect(),
            };

            let (attn_mask, mlp_mask) = match dropout.as_mut() {
                Some((p, rng)) if *p > 0.0 => (
                    Some(dropout_mask(t_len, d, *p, rng)),
                    Some(dropout_mask(t_len, d, *p, rng)),
                ),
                _ => (None, None),
            };
            let mut ctx = Matrix::zeros(t_len, d);
            let mut mid = Matrix::zeros(t_len, d);
            let mut b = Matrix::zeros(t_len, d);
            let mut f = Matrix::zeros(t_len, cfg.d_ff);
            let mut out = Matrix::zeros(t_len, d);
            let mut ln2 = Vec::with_capacity(t_len);
            for t in 0..t_len {
                context_row(&probs, &v, t, hd, ctx.row_mut(t));
                let masks = (attn_mask.as_ref().map(|m| m.row(t)), mlp_mask.as_ref().map(|m| m.row(t)));
                ln2.push(block_tail_row(
                    lw,
                    cfg.ln_eps,
                    x.row(t),
                    ctx.row(t),
                    mid.row_mut(t),
                    b.row_mut(t),
                    f.row_mut(t),
                    masks,
                    &mut scratch,
                    out.row_mut(t),
                ));
            }
            hidden.push(out);
            layers.push(LayerState { a, ln1, q, k, v, probs, ctx, mid, b, ln2, f, attn_mask, mlp_mask });
        }

        let last = &hidden[cfg.n_layers];
        let mut z = Matrix::zeros(t_len, d);
        let mut lnf = Vec::with_capacity(t_len);
        for t in 0..t_len {
            lnf.push(layer_norm_into(
                last.row(t),
                self.weights.lnf_gain.data(),
                self.weights.lnf_bias.data(),
                cfg.ln_eps,
                z.row_mut(t),
            ));
        }
        let mut logits = Matrix::zeros(t_len, cfg.vocab_size);
        match opts.logit_rows {
            Some(rows) => {
                for &r in rows {
                    if r >= t_len {
                        return Err(Error::OutOfRange(format!("logit row {r} >= {t_len}")));
                    }
                    self.logits_into(z.row(r), logits.row_mut(r));
                }
            }
            None => {
                for t in 0..t_len {
                    self.logits_into(z.row(t), logits.row_mut(t));
                }
            }
        }
        Ok((logits, ForwardState { hidden, layers, z, lnf }))
    }

    /// Vocabulary logits for one final-LN output row.
    pub(crate) fn logits_into(&self, z: &[f64], out: &mut [f64]) {
        match &self.weights.lm_head {
            None => tensor::vecmat_t_into(z, &self.weights.tok_emb, out),
            Some(h) => vecmat_into(z, h, out),
        }
        for (o, &b) in out.iter_mut().zip(self.weights.lm_bias.data()) {
            *o += b;
        }
    }

    /// Recompute block `layer`'s output at row `t` from a recorded trace with
    /// substituted value vectors. Uses the same kernels as the full pass, so
    /// substituting the recorded values reproduces `trace.hidden[layer+1][t]`
    /// bit for bit.
    pub fn recompute_block_row(&self, trace: &ActivationTrace, layer: usize, values: &Matrix, t: usize) -> Result<Vec<f64>> {
        if layer >= self.config.n_layers || t >= trace.seq_len() {
            return Err(Error::OutOfRange(format!("layer {layer} / row {t}")));
        }
        if values.shape() != trace.values[layer].shape() {
            return Err(Error::shape("recompute_block_row", "values shape mismatch"));
        }
        let (d, ff) = (self.config.d_model, self.config.d_ff);
        let mut scratch = RowScratch::new(d, ff);
        let mut ctx = vec![0.0; d];
        context_row(&trace.attention[layer], values, t, self.config.head_dim(), &mut ctx);
        let (mut mid, mut b, mut f, mut out) = (vec![0.0; d], vec![0.0; d], vec![0.0; ff], vec![0.0; d]);
        block_tail_row(
            &self.weights.layers[layer],
            self.config.ln_eps,
            trace.hidden[layer].row(t),
            &ctx,
            &mut mid,
            &mut b,
            &mut f,
            (None, None),
            &mut scratch,
            &mut out,
        );
        Ok(out)
    }
}

fn project(a: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), w.cols());
    for t in 0..a.rows() {
        let row = out.row_mut(t);
        vecmat_into(a.row(t), w, row);
        for (o, &bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    out
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = if rng.bernoulli(p) { 0.0 } else { keep };
    }
    m
}

/// Probability mass of `forms` under the softmax of `logits[target_pos]`.
pub fn target_probability(logits: &Matrix, target_pos: usize, forms: &[u32]) -> Result<f64> {
    if forms.is_empty() {
        return Err(Error::Invalid("empty target form set".into()));
    }
    if target_pos >= logits.rows() {
        return Err(Error::OutOfRange(format!("target position {target_pos} >= {}", logits.rows())));
    }
    let row = logits.row(target_pos);
    let lse = tensor::log_sum_exp(row);
    let mut seen = std::collections::BTreeSet::new();
    let mut p = 0.0;
    for &f in forms {
        let f = f as usize;
        if f >= row.len() {
            return Err(Error::OutOfRange(format!("form id {f} >= vocab {}", row.len())));
        }
        if seen.insert(f) {
            p += (row[f] - lse).exp();
        }
    }
    Ok(p)
}
