// SPDX-License-Identifier: MIT OR Apache-2.0

//! Context-mixing scores of every context token for one target position:
//! Value Zeroing, raw attention, attention rollout and attention-norm.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedExample;
use crate::error::{Error, Result};
use crate::model::{ActivationTrace, Intervention, Mode, Model};
use crate::report::format_real;
use crate::tensor::{cosine_distance, Matrix};
use crate::tokenizer::{TokenSpan, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ValueZeroing,
    Attention,
    Rollout,
    AttentionNorm,
    ValuePatching,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ValueZeroing,
        Method::Attention,
        Method::Rollout,
        Method::AttentionNorm,
        Method::ValuePatching,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ValueZeroing => "value-zeroing",
            Method::Attention => "attention",
            Method::Rollout => "rollout",
            Method::AttentionNorm => "attention-norm",
            Method::ValuePatching => "value-patching",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
            Error::Invalid(format!("unknown method {s:?}; valid methods: {}", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Token,
    Word,
}

/// `layers × positions` scores for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub method: Method,
    pub unit: Unit,
    /// Target token position, or target word index for word-level scores.
    pub target: usize,
    /// Scores before normalization.
    pub raw: Matrix,
    /// Reported scores: `raw` normalized per layer when `normalized` is set.
    pub scores: Matrix,
    pub normalized: bool,
}

impl ScoreMatrix {
    /// Wrap raw scores, normalizing each row over `domain` when asked.
    pub fn new(method: Method, unit: Unit, target: usize, raw: Matrix, domain: Option<&[bool]>) -> Self {
        let (scores, normalized) = match domain {
            Some(d) => (normalize_rows(&raw, d), true),
            None => (raw.clone(), false),
        };
        Self { method, unit, target, raw, scores, normalized }
    }

    pub fn n_layers(&self) -> usize {
        self.scores.rows()
    }

    pub fn len(&self) -> usize {
        self.scores.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.cols() == 0
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        self.scores.row(layer)
    }

    pub fn get(&self, layer: usize, pos: usize) -> f64 {
        self.scores.get(layer, pos)
    }

    /// Write as CSV: a metadata line, then one row per layer and series.
    pub fn write_csv<W: Write>(&self, out: W, example_id: &str, labels: &[String]) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::shape("ScoreMatrix::write_csv", "one label per column expected"));
        }
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record(["method", "example_id", "target", "unit", "normalized"])?;
        w.write_record([
            self.method.as_str(),
            example_id,
            &self.target.to_string(),
            if self.unit == Unit::Token { "token" } else { "word" },
            if self.normalized { "true" } else { "false" },
        ])?;
        let mut header = vec!["layer".to_string(), "series".to_string()];
        header.extend(labels.iter().cloned());
        w.write_record(&header)?;
        let series: &[(&str, &Matrix)] = if self.normalized {
            &[("normalized", &self.scores), ("raw", &self.raw)]
        } else {
            &[("raw", &self.raw)]
        };
        for l in 0..self.n_layers() {
            for (name, m) in series {
                let mut rec = vec![(l + 1).to_string(), name.to_string()];
                rec.extend(m.row(l).iter().map(|&v| format_real(v)));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Parse [`write_csv`](Self::write_csv) output. Returns the matrix, the
    /// example id and the column labels.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<(Self, String, Vec<String>)> {
        let mut r = csv::ReaderBuilder::new().flexible(true).has_headers(false).from_reader(input);
        let recs: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
        let bad = |m: &str| Error::Format(format!("score csv: {m}"));
        if recs.len() < 3 || &recs[0][0] != "method" || &recs[2][0] != "layer" {
            return Err(bad("missing header"));
        }
        let meta = &recs[1];
        if meta.len() != 5 {
            return Err(bad("metadata row needs five fields"));
        }
        let method: Method = meta[0].parse()?;
        let example_id = meta[1].to_string();
        let target = meta[2].parse::<usize>().map_err(|_| bad("target"))?;
        let unit = match &meta[3] {
            "token" => Unit::Token,
            "word" => Unit::Word,
            _ => return Err(bad("unit")),
        };
        let normalized = &meta[4] == "true";
        let labels: Vec<String> = recs[2].iter().skip(2).map(str::to_string).collect();
        let mut raw_rows = Vec::new();
        let mut norm_rows = Vec::new();
        for rec in &recs[3..] {
            if rec.len() != labels.len() + 2 {
                return Err(bad("row width"));
            }
            let vals: Vec<f64> = rec.iter().skip(2).map(|v| v.parse::<f64>().map_err(|_| bad("number"))).collect::<Result<_>>()?;
            match &rec[1] {
                "raw" => raw_rows.push(vals),
                "normalized" => norm_rows.push(vals),
                _ => return Err(bad("series")),
            }
        }
        let to_matrix = |rows: &[Vec<f64>]| -> Result<Matrix> {
            if rows.is_empty() {
                Ok(Matrix::zeros(0, labels.len()))
            } else {
                Matrix::from_rows(rows)
            }
        };
        let raw = to_matrix(&raw_rows)?;
        let scores = if normalized {
            if norm_rows.len() != raw_rows.len() {
                return Err(bad("normalized and raw rows differ"));
            }
            to_matrix(&norm_rows)?
        } else {
            raw.clone()
        };
        Ok((Self { method, unit, target, raw, scores, normalized }, example_id, labels))
    }

    pub fn save_csv(&self, path: &Path, example_id: &str, labels: &[String]) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f), example_id, labels)
    }
}

/// Row-wise normalization to unit sum over the positions where `domain` is
/// true; other entries become 0. A row with zero mass is spread uniformly.
pub fn normalize_rows(m: &Matrix, domain: &[bool]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let n = domain.iter().filter(|&&d| d).count();
    for l in 0..m.rows() {
        let sum: f64 = m.row(l).iter().zip(domain).filter(|(_, &d)| d).map(|(v, _)| v).sum();
        for (j, o) in out.row_mut(l).iter_mut().enumerate() {
            if !domain[j] {
                continue;
            }
            *o = if sum > 0.0 { m.get(l, j) / sum } else { 1.0 / n as f64 };
        }
    }
    out
}

/// Positions that may receive mass: non-PAD, and for decoders not after the
/// target.
pub fn score_domain(tokens: &[u32], mode: Mode, target_pos: usize) -> Vec<bool> {
    tokens
        .iter()
        .enumerate()
        .map(|(j, &t)| t != PAD && (mode == Mode::Encoder || j <= target_pos))
        .collect()
}

fn check_target(trace: &ActivationTrace, target_pos: usize) -> Result<()> {
    if target_pos >= trace.seq_len() {
        return Err(Error::OutOfRange(format!("target position {target_pos} >= {}", trace.seq_len())));
    }
    Ok(())
}

/// Raw Value Zeroing distances from a recorded clean trace. Only the
/// intervened layer's target row is recomputed.
pub fn value_zeroing_raw(model: &Model, trace: &ActivationTrace, target_pos: usize) -> Result<Matrix> {
    check_target(trace, target_pos)?;
    let (n_layers, t_len) = (trace.n_layers(), trace.seq_len());
    let mut raw = Matrix::zeros(n_layers, t_len);
    for l in 0..n_layers {
        let clean = trace.hidden[l + 1].row(target_pos);
        let mut values = trace.values[l].clone();
        for j in 0..t_len {
            let saved = values.row(j).to_vec();
            values.row_mut(j).fill(0.0);
            let zeroed = model.recompute_block_row(trace, l, &values, target_pos)?;
            raw.set(l, j, cosine_distance(clean, &zeroed)?);
            values.row_mut(j).copy_from_slice(&saved);
        }
    }
    Ok(raw)
}

/// Normalized Value Zeroing scores.
pub fn value_zeroing(model: &Model, tokens: &[u32], target_pos: usize) -> Result<ScoreMatrix> {
    let trace = model.forward(tokens, &[], true)?.trace.expect("recorded");
    value_zeroing_from_trace(model, tokens, &trace, target_pos)
}

pub fn value_zeroing_from_trace(
    model: &Model,
    tokens: &[u32],
    trace: &ActivationTrace,
    target_pos: usize,
) -> Result<ScoreMatrix> {
    let raw = value_zeroing_raw(model, trace, target_pos)?;
    let domain = score_domain(tokens, model.mode(), target_pos);
    Ok(ScoreMatrix::new(Method::ValueZeroing, Unit::Token, target_pos, raw, Some(&domain)))
}

/// Raw Value Zeroing with one full intervened forward pass per
/// `(layer, token)`. Slow; used to cross-check [`value_zeroing_raw`].
pub fn value_zeroing_by_forward(model: &Model, tokens: &[u32], target_pos: usize) -> Result<Matrix> {
    let clean = model.forward(tokens, &[], true)?.trace.expect("recorded");
    check_target(&clean, target_pos)?;
    let n_layers = clean.n_layers();
    let mut raw = Matrix::zeros(n_layers, tokens.len());
    for l in 0..n_layers {
        for j in 0..tokens.len() {
            let tr = model.forward(tokens, &[Intervention::zero(l, j)], true)?.trace.expect("recorded");
            raw.set(l, j, cosine_distance(clean.hidden[l + 1].row(target_pos), tr.hidden[l + 1].row(target_pos))?);
        }
    }
    Ok(raw)
}

fn head_mean(trace: &ActivationTrace, layer: usize) -> Matrix {
    let heads = &trace.attention[layer];
    let t = trace.seq_len();
    let mut m = Matrix::zeros(t, t);
    for p in heads {
        for (a, b) in m.data_mut().iter_mut().zip(p.data()) {
            *a += b;
        }
    }
    m.scale(1.0 / heads.len() as f64);
    m
}

/// Head-averaged attention of the target row.
pub fn raw_attention(trace: &ActivationTrace, target_pos: usize) -> Result<ScoreMatrix> {
    check_target(trace, target_pos)?;
    let mut raw = Matrix::zeros(trace.n_layers(), trace.seq_len());
    for l in 0..trace.n_layers() {
        raw.row_mut(l).copy_from_slice(head_mean(trace, l).row(target_pos));
    }
    let scores = raw.clone();
    Ok(ScoreMatrix { method: Method::Attention, unit: Unit::Token, target: target_pos, raw, scores, normalized: true })
}

/// Rollout matrices `R[l] = Ã[l] · R[l−1]` with
/// `Ã = rownorm(0.5·mean_h A + 0.5·I)`.
pub fn rollout_matrices(trace: &ActivationTrace) -> Vec<Matrix> {
    let t = trace.seq_len();
    let mut out: Vec<Matrix> = Vec::with_capacity(trace.n_layers());
    for l in 0..trace.n_layers() {
        let mut a = head_mean(trace, l);
        a.scale(0.5);
        for i in 0..t {
            let row = a.row_mut(i);
            row[i] += 0.5;
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let r = match out.last() {
            None => a,
            Some(prev) => a.matmul(prev).expect("square"),
        };
        out.push(r);
    }
    out
}

pub fn attention_rollout(trace: &ActivationTrace, target_pos: usize) -> Result<ScoreMatrix> {
    check_target(trace, target_pos)?;
    let mut raw = Matrix::zeros(trace.n_layers(), trace.seq_len());
    for (l, r) in rollout_matrices(trace).iter().enumerate() {
        raw.row_mut(l).copy_from_slice(r.row(target_pos));
    }
    let scores = raw.clone();
    Ok(ScoreMatrix { method: Method::Rollout, unit: Unit::Token, target: target_pos, raw, scores, normalized: true })
}

/// `‖Σ_h A[l][h][t][j] · v_h[j] W_o[h]‖` per layer and token, normalized.
pub fn attention_norm(model: &Model, tokens: &[u32], trace: &ActivationTrace, target_pos: usize) -> Result<ScoreMatrix> {
    check_target(trace, target_pos)?;
    let hd = trace.head_dim;
    let d = model.config.d_model;
    let mut raw = Matrix::zeros(trace.n_layers(), trace.seq_len());
    let mut acc = vec![0.0; d];
    for l in 0..trace.n_layers() {
        let w_o = &model.weights.layers[l].w_o;
        for j in 0..trace.seq_len() {
            acc.fill(0.0);
            for (h, p) in trace.attention[l].iter().enumerate() {
                let a = p.get(target_pos, j);
                if a == 0.0 {
                    continue;
                }
                for (i, &v) in trace.value(l, h, j).iter().enumerate() {
                    let coef = a * v;
                    for (o, &w) in acc.iter_mut().zip(w_o.row(h * hd + i)) {
                        *o += coef * w;
                    }
                }
            }
            raw.set(l, j, acc.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
    }
    let domain = score_domain(tokens, model.mode(), target_pos);
    Ok(ScoreMatrix::new(Method::AttentionNorm, Unit::Token, target_pos, raw, Some(&domain)))
}

/// Check that `spans` cover `0..n_tokens` contiguously and in order.
pub fn check_partition(spans: &[TokenSpan], n_tokens: usize) -> Result<()> {
    let mut next = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.first_token != next || s.token_count == 0 || s.word_index != i {
            return Err(Error::Invalid(format!("spans do not partition the sequence at word {i}")));
        }
        next += s.token_count;
    }
    if next != n_tokens {
        return Err(Error::Invalid(format!("spans cover {next} of {n_tokens} tokens")));
    }
    Ok(())
}

fn target_word(spans: &[TokenSpan], target_pos: usize) -> usize {
    spans
        .iter()
        .position(|s| s.tokens().contains(&target_pos))
        .unwrap_or(spans.len().saturating_sub(1))
}

/// Word-level scores: the maximum over each word's tokens, renormalized
/// over words when the input was normalized.
pub fn aggregate_subwords(scores: &ScoreMatrix, spans: &[TokenSpan]) -> Result<ScoreMatrix> {
    check_partition(spans, scores.len())?;
    let mut raw = Matrix::zeros(scores.n_layers(), spans.len());
    for l in 0..scores.n_layers() {
        let row = scores.scores.row(l);
        for (w, s) in spans.iter().enumerate() {
            raw.set(l, w, s.tokens().map(|t| row[t]).fold(f64::NEG_INFINITY, f64::max));
        }
    }
    let domain = vec![true; spans.len()];
    let target = target_word(spans, scores.target);
    Ok(ScoreMatrix::new(scores.method, Unit::Word, target, raw, scores.normalized.then_some(&domain[..])))
}

/// Word-level signed scores: the member with the largest magnitude keeps
/// its sign. No normalization.
pub fn aggregate_subwords_signed(scores: &ScoreMatrix, spans: &[TokenSpan]) -> Result<ScoreMatrix> {
    check_partition(spans, scores.len())?;
    let mut raw = Matrix::zeros(scores.n_layers(), spans.len());
    for l in 0..scores.n_layers() {
        let row = scores.scores.row(l);
        for (w, s) in spans.iter().enumerate() {
            let mut best = 0.0f64;
            for t in s.tokens() {
                if row[t].abs() > best.abs() {
                    best = row[t];
                }
            }
            raw.set(l, w, best);
        }
    }
    let target = target_word(spans, scores.target);
    Ok(ScoreMatrix::new(scores.method, Unit::Word, target, raw, None))
}

/// Per-layer scores of each cue word in order, plus the mean over all other
/// non-target words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueProfile {
    pub method: Method,
    pub cue_count: usize,
    /// `layers × (cue_count + 1)` when Others is included, else
    /// `layers × cue_count`.
    pub values: Matrix,
    pub include_others: bool,
}

impl CueProfile {
    pub fn series_labels(&self) -> Vec<String> {
        let mut v: Vec<String> = (1..=self.cue_count).map(|i| format!("cue {i}")).collect();
        if self.include_others {
            v.push("Others".into());
        }
        v
    }

    pub fn others(&self, layer: usize) -> Option<f64> {
        self.include_others.then(|| self.values.get(layer, self.cue_count))
    }

    /// Mean over the cue entries of one layer.
    pub fn cue_mean(&self, layer: usize) -> f64 {
        let row = &self.values.row(layer)[..self.cue_count];
        row.iter().sum::<f64>() / self.cue_count as f64
    }
}

/// Build the cue profile of an example from its word-level scores. Words
/// missing from the scores (after a decoder prefix) are ignored. Others is 0
/// when no other word is present.
pub fn cue_profile(word_scores: &ScoreMatrix, example: &AnnotatedExample, include_others: bool) -> Result<CueProfile> {
    if word_scores.unit != Unit::Word {
        return Err(Error::Invalid("cue_profile expects word-level scores".into()));
    }
    let n_words = word_scores.len();
    if let Some(&c) = example.cue_spans.iter().find(|&&c| c >= n_words) {
        return Err(Error::OutOfRange(format!("cue word {c} beyond {n_words} scored words")));
    }
    let k = example.cue_count();
    let cols = k + include_others as usize;
    let mut values = Matrix::zeros(word_scores.n_layers(), cols);
    let others: Vec<usize> = (0..n_words).filter(|&w| !example.is_cue(w) && w != example.target).collect();
    for l in 0..word_scores.n_layers() {
        for (i, &c) in example.cue_spans.iter().enumerate() {
            values.set(l, i, word_scores.get(l, c));
        }
        if include_others {
            let mean = if others.is_empty() {
                0.0
            } else {
                others.iter().map(|&w| word_scores.get(l, w)).sum::<f64>() / others.len() as f64
            };
            values.set(l, k, mean);
        }
    }
    Ok(CueProfile { method: word_scores.method, cue_count: k, values, include_others })
}
