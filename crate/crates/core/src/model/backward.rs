// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients for the training losses.

use super::forward::{ForwardOptions, ForwardState};
use super::{Model, Weights};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, add_outer, vecmat_into, vecmat_t_into, Matrix};

/// One cross-entropy term: predict `gold` at row `pos`, over the full
/// vocabulary or only over `restrict`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTarget {
    pub pos: usize,
    pub gold: u32,
    pub restrict: Option<Vec<u32>>,
}

impl LossTarget {
    pub fn full(pos: usize, gold: u32) -> Self {
        Self { pos, gold, restrict: None }
    }

    pub fn restricted(pos: usize, gold: u32, ids: Vec<u32>) -> Self {
        Self { pos, gold, restrict: Some(ids) }
    }
}

impl Model {
    /// `weight · Σ CE` over `targets`, without gradients.
    pub fn loss(&self, tokens: &[u32], targets: &[LossTarget], weight: f64) -> Result<f64> {
        let (_, state) = self.run(tokens, &ForwardOptions { logit_rows: Some(&[]), ..Default::default() }, None)?;
        let mut total = 0.0;
        for tg in targets {
            let (ids, logits) = self.target_logits(&state, tg)?;
            let gi = ids.iter().position(|&i| i == tg.gold as usize).expect("checked");
            total += tensor::log_sum_exp(&logits) - logits[gi];
        }
        Ok(weight * total)
    }

    /// Candidate ids and their logits for one target.
    fn target_logits(&self, state: &ForwardState, tg: &LossTarget) -> Result<(Vec<usize>, Vec<f64>)> {
        let v = self.config.vocab_size;
        if tg.pos >= state.z.rows() {
            return Err(Error::OutOfRange(format!("loss position {} >= {}", tg.pos, state.z.rows())));
        }
        let z = state.z.row(tg.pos);
        let ids: Vec<usize> = match &tg.restrict {
            None => (0..v).collect(),
            Some(r) => {
                if r.is_empty() {
                    return Err(Error::Invalid("empty restricted vocabulary".into()));
                }
                r.iter().map(|&i| i as usize).collect()
            }
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::OutOfRange(format!("token id {bad} >= vocab {v}")));
        }
        if !ids.contains(&(tg.gold as usize)) {
            return Err(Error::Invalid(format!("gold id {} not among candidates", tg.gold)));
        }
        let logits = if tg.restrict.is_none() {
            let mut out = vec![0.0; v];
            self.logits_into(z, &mut out);
            out
        } else {
            let mut row = vec![0.0; self.config.d_model];
            ids.iter()
                .map(|&i| {
                    self.head_row(i, &mut row);
                    tensor::dot(z, &row) + self.weights.lm_bias.data()[i]
                })
                .collect()
        };
        Ok((ids, logits))
    }

    /// `weight · Σ CE` over `targets` and its gradient with respect to every
    /// weight tensor. Dropout, when given, is sampled from the RNG.
    pub fn loss_and_grad(
        &self,
        tokens: &[u32],
        targets: &[LossTarget],
        weight: f64,
        dropout: Option<(f64, &mut Rng)>,
    ) -> Result<(f64, Weights)> {
        let cfg = &self.config;
        let (t_len, d, hd) = (tokens.len(), cfg.d_model, cfg.head_dim());
        let (_, st) = self.run(tokens, &ForwardOptions { logit_rows: Some(&[]), ..Default::default() }, dropout)?;
        let w = &self.weights;
        let mut g = Weights::zeros(cfg);
        let mut dh = Matrix::zeros(t_len, d);
        let mut loss = 0.0;

        let mut dz = vec![0.0; d];
        let mut row = vec![0.0; d];
        for tg in targets {
            let (ids, logits) = self.target_logits(&st, tg)?;
            let gi = ids.iter().position(|&i| i == tg.gold as usize).expect("checked");
            let lse = tensor::log_sum_exp(&logits);
            loss += lse - logits[gi];
            let mut dl: Vec<f64> = logits.iter().map(|&x| weight * (x - lse).exp()).collect();
            dl[gi] -= weight;
            let z = st.z.row(tg.pos);
            if tg.restrict.is_none() {
                match (&w.lm_head, &mut g.lm_head) {
                    (None, _) => {
                        vecmat_into(&dl, &w.tok_emb, &mut dz);
                        add_outer(&mut g.tok_emb, &dl, z);
                    }
                    (Some(h), Some(gh)) => {
                        vecmat_t_into(&dl, h, &mut dz);
                        add_outer(gh, z, &dl);
                    }
                    _ => unreachable!(),
                }
                for (b, x) in g.lm_bias.data_mut().iter_mut().zip(&dl) {
                    *b += x;
                }
            } else {
                dz.fill(0.0);
                for (&id, &dv) in ids.iter().zip(&dl) {
                    self.head_row(id, &mut row);
                    for (a, r) in dz.iter_mut().zip(&row) {
                        *a += dv * r;
                    }
                    match &mut g.lm_head {
                        None => {
                            for (a, zv) in g.tok_emb.row_mut(id).iter_mut().zip(z) {
                                *a += dv * zv;
                            }
                        }
                        Some(gh) => {
                            for (i, zv) in z.iter().enumerate() {
                                let cur = gh.get(i, id);
                                gh.set(i, id, cur + dv * zv);
                            }
                        }
                    }
                    g.lm_bias.data_mut()[id] += dv;
                }
            }
            ln_backward(
                &dz,
                st.hidden[cfg.n_layers].row(tg.pos),
                st.lnf[tg.pos],
                w.lnf_gain.data(),
                &mut g.lnf_gain,
                &mut g.lnf_bias,
                dh.row_mut(tg.pos),
            );
        }

        let mut gelu_row = vec![0.0; cfg.d_ff];
        let mut dff = vec![0.0; cfg.d_ff];
        let mut dtmp = vec![0.0; d];
        for l in (0..cfg.n_layers).rev() {
            let ls = &st.layers[l];
            let lw = &w.layers[l];
            let gl = &mut g.layers[l];
            let x = &st.hidden[l];
            // dmid accumulates into dh (residual), attention path below.
            let mut dctx = Matrix::zeros(t_len, d);
            for t in 0..t_len {
                let dout: Vec<f64> = dh.row(t).to_vec();
                let mut dm = dout.clone();
                if let Some(m) = &ls.mlp_mask {
                    for (a, mv) in dm.iter_mut().zip(m.row(t)) {
                        *a *= mv;
                    }
                }
                for (gv, &fv) in gelu_row.iter_mut().zip(ls.f.row(t)) {
                    *gv = tensor::gelu(fv);
                }
                add_row(&mut gl.b_ff2, &dm);
                add_outer(&mut gl.w_ff2, &gelu_row, &dm);
                vecmat_t_into(&dm, &lw.w_ff2, &mut dff);
                for (df, &fv) in dff.iter_mut().zip(ls.f.row(t)) {
                    *df *= tensor::gelu_grad(fv);
                }
                add_row(&mut gl.b_ff1, &dff);
                add_outer(&mut gl.w_ff1, ls.b.row(t), &dff);
                vecmat_t_into(&dff, &lw.w_ff1, &mut dtmp);
                let mut dmid = dout;
                ln_backward(
                    &dtmp,
                    ls.mid.row(t),
                    ls.ln2[t],
                    lw.ln2_gain.data(),
                    &mut gl.ln2_gain,
                    &mut gl.ln2_bias,
                    &mut dmid,
                );
                dh.row_mut(t).copy_from_slice(&dmid);
                if let Some(m) = &ls.attn_mask {
                    for (a, mv) in dmid.iter_mut().zip(m.row(t)) {
                        *a *= mv;
                    }
                }
                add_row(&mut gl.b_o, &dmid);
                add_outer(&mut gl.w_o, ls.ctx.row(t), &dmid);
                vecmat_t_into(&dmid, &lw.w_o, dctx.row_mut(t));
            }

            let mut dq = Matrix::zeros(t_len, d);
            let mut dk = Matrix::zeros(t_len, d);
            let mut dv = Matrix::zeros(t_len, d);
            let scale = 1.0 / (hd as f64).sqrt();
            let mut dp = vec![0.0; t_len];
            for (h, p) in ls.probs.iter().enumerate() {
                let seg = h * hd..(h + 1) * hd;
                for t in 0..t_len {
                    let dc = &dctx.row(t)[seg.clone()];
                    let prow = p.row(t);
                    let mut s = 0.0;
                    for j in 0..t_len {
                        if prow[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        dp[j] = tensor::dot(dc, &ls.v.row(j)[seg.clone()]);
                        s += prow[j] * dp[j];
                        for (a, &c) in dv.row_mut(j)[seg.clone()].iter_mut().zip(dc) {
                            *a += prow[j] * c;
                        }
                    }
                    for j in 0..t_len {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - s) * scale;
                        let kj = &ls.k.row(j)[seg.clone()];
                        for (a, &kv) in dq.row_mut(t)[seg.clone()].iter_mut().zip(kj) {
                            *a += ds * kv;
                        }
                        let qt = &ls.q.row(t)[seg.clone()];
                        for (a, &qv) in dk.row_mut(j)[seg.clone()].iter_mut().zip(qt) {
                            *a += ds * qv;
                        }
                    }
                }
            }

            let mut da = vec![0.0; d];
            for t in 0..t_len {
                let a = ls.a.row(t);
                da.fill(0.0);
                for (dm, wm, gw, gb) in [
                    (&dq, &lw.w_q, &mut gl.w_q, &mut gl.b_q),
                    (&dk, &lw.w_k, &mut gl.w_k, &mut gl.b_k),
                    (&dv, &lw.w_v, &mut gl.w_v, &mut gl.b_v),
                ] {
                    add_row(gb, dm.row(t));
                    add_outer(gw, a, dm.row(t));
                    vecmat_t_into(dm.row(t), wm, &mut dtmp);
                    for (x, y) in da.iter_mut().zip(&dtmp) {
                        *x += y;
                    }
                }
                ln_backward(
                    &da,
                    x.row(t),
                    ls.ln1[t],
                    lw.ln1_gain.data(),
                    &mut gl.ln1_gain,
                    &mut gl.ln1_bias,
                    dh.row_mut(t),
                );
            }
        }

        for (t, &id) in tokens.iter().enumerate() {
            add_row_at(&mut g.tok_emb, id as usize, dh.row(t));
            add_row_at(&mut g.pos_emb, t, dh.row(t));
        }
        Ok((weight * loss, g))
    }
}

fn add_row(acc: &mut Matrix, v: &[f64]) {
    add_row_at(acc, 0, v);
}

fn add_row_at(acc: &mut Matrix, r: usize, v: &[f64]) {
    for (a, x) in acc.row_mut(r).iter_mut().zip(v) {
        *a += x;
    }
}

/// Backward of `y = (x − μ)·r·g + b`. Accumulates parameter gradients and
/// adds the input gradient to `dx`.
fn ln_backward(
    dy: &[f64],
    x: &[f64],
    (mean, rstd): (f64, f64),
    gain: &[f64],
    dgain: &mut Matrix,
    dbias: &mut Matrix,
    dx: &mut [f64],
) {
    let n = x.len() as f64;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    let dg = dgain.data_mut();
    let db = dbias.data_mut();
    for i in 0..x.len() {
        let xh = (x[i] - mean) * rstd;
        dg[i] += dy[i] * xh;
        db[i] += dy[i];
        let dxh = dy[i] * gain[i];
        m1 += dxh;
        m2 += dxh * xh;
    }
    m1 /= n;
    m2 /= n;
    for i in 0..x.len() {
        let xh = (x[i] - mean) * rstd;
        dx[i] += rstd * (dy[i] * gain[i] - m1 - xh * m2);
    }
}
