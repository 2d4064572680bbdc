// SPDX-License-Identifier: MIT OR Apache-2.0

//! Naive reference transformer over plain vectors. Shares no code with the
//! library's forward pass; only the weights are read.

use cuetrace::model::{Mode, Model};
use cuetrace::tokenizer::PAD;
use cuetrace::Matrix;

type Vector = Vec<f64>;

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn layer_norm(x: &[f64], gain: &Matrix, bias: &Matrix, eps: f64) -> Vector {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) / denom * gain.get(0, i) + bias.get(0, i)).collect()
}

/// `x W + b` with `W` stored input-major.
fn affine(x: &[f64], w: &Matrix, b: &Matrix) -> Vector {
    (0..w.cols()).map(|c| b.get(0, c) + (0..w.rows()).map(|r| x[r] * w.get(r, c)).sum::<f64>()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Hidden states after every layer up to `last` (inclusive), with the value
/// vector of `zero.1` cleared at layer `zero.0`.
pub fn hidden_after(model: &Model, tokens: &[u32], last: usize, zero: Option<(usize, usize)>) -> Vec<Vector> {
    let cfg = &model.config;
    let w = &model.weights;
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let hd = d / nh;
    let t_len = tokens.len();
    let mut x: Vec<Vector> = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|i| w.tok_emb.get(id as usize, i) + w.pos_emb.get(t, i)).collect())
        .collect();
    for (l, lw) in w.layers.iter().enumerate().take(last + 1) {
        let a: Vec<Vector> = x.iter().map(|r| layer_norm(r, &lw.ln1_gain, &lw.ln1_bias, cfg.ln_eps)).collect();
        let q: Vec<Vector> = a.iter().map(|r| affine(r, &lw.w_q, &lw.b_q)).collect();
        let k: Vec<Vector> = a.iter().map(|r| affine(r, &lw.w_k, &lw.b_k)).collect();
        let mut v: Vec<Vector> = a.iter().map(|r| affine(r, &lw.w_v, &lw.b_v)).collect();
        if let Some((zl, zj)) = zero {
            if zl == l {
                v[zj] = vec![0.0; d];
            }
        }
        let mut next = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut ctx = vec![0.0; d];
            for h in 0..nh {
                let seg = h * hd..(h + 1) * hd;
                let keys: Vec<usize> = (0..t_len)
                    .filter(|&j| tokens[j] != PAD && (cfg.mode == Mode::Encoder || j <= t))
                    .collect();
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|&j| seg.clone().map(|i| q[t][i] * k[j][i]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for (&j, ej) in keys.iter().zip(&e) {
                    for i in seg.clone() {
                        ctx[i] += ej / s * v[j][i];
                    }
                }
            }
            let attn = affine(&ctx, &lw.w_o, &lw.b_o);
            let mid: Vector = x[t].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let b = layer_norm(&mid, &lw.ln2_gain, &lw.ln2_bias, cfg.ln_eps);
            let f: Vector = affine(&b, &lw.w_ff1, &lw.b_ff1).into_iter().map(gelu).collect();
            let out = affine(&f, &lw.w_ff2, &lw.b_ff2);
            next.push(mid.iter().zip(&out).map(|(a, b)| a + b).collect());
        }
        x = next;
    }
    x
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// Raw and normalized Value Zeroing by one full re-forward per cell.
pub fn value_zeroing(model: &Model, tokens: &[u32], target: usize) -> (Vec<Vector>, Vec<Vector>) {
    let layers = model.config.n_layers;
    let t_len = tokens.len();
    let mut raw = vec![vec![0.0; t_len]; layers];
    for (l, row) in raw.iter_mut().enumerate() {
        let clean = hidden_after(model, tokens, l, None);
        for (j, cell) in row.iter_mut().enumerate() {
            let zeroed = hidden_after(model, tokens, l, Some((l, j)));
            *cell = cosine_distance(&clean[target], &zeroed[target]);
        }
    }
    let domain: Vec<bool> = (0..t_len)
        .map(|j| tokens[j] != PAD && (model.config.mode == Mode::Encoder || j <= target))
        .collect();
    let n_domain = domain.iter().filter(|&&d| d).count() as f64;
    let normalized = raw
        .iter()
        .map(|row| {
            let s: f64 = row.iter().zip(&domain).filter(|(_, &d)| d).map(|(v, _)| v).sum();
            row.iter()
                .zip(&domain)
                .map(|(&v, &d)| match (d, s > 0.0) {
                    (false, _) => 0.0,
                    (true, true) => v / s,
                    (true, false) => 1.0 / n_domain,
                })
                .collect()
        })
        .collect();
    (raw, normalized)
}
