// SPDX-License-Identifier: MIT OR Apache-2.0

//! Value patching: cache value vectors from a gender-swapped run and splice
//! them into the clean run one `(layer, token)` at a time.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{Method, ScoreMatrix, Unit};
use crate::corpus::{AnnotatedExample, Gender};
use crate::error::{Error, Result};
use crate::model::{target_probability, ActivationTrace, ForwardOptions, Intervention, Model};
use crate::report::format_real;
use crate::tensor::Matrix;
use crate::tokenizer::TokenSpan;

/// Value vectors of the corrupted run: `values[l]` is `T × d_model`, head
/// `h` in columns `h*hd..(h+1)*hd`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedCache {
    pub values: Vec<Matrix>,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl CorruptedCache {
    /// `(n_layers, T, n_heads, head_dim)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.values.len(), self.values.first().map_or(0, Matrix::rows), self.n_heads, self.head_dim)
    }

    pub fn value(&self, layer: usize, position: usize, head: usize) -> &[f64] {
        &self.values[layer].row(position)[head * self.head_dim..(head + 1) * self.head_dim]
    }

    pub fn heads(&self, layer: usize, position: usize) -> Vec<Vec<f64>> {
        (0..self.n_heads).map(|h| self.value(layer, position, h).to_vec()).collect()
    }
}

/// Run the corrupted input and keep every layer's value vectors.
pub fn build_cache(model: &Model, clean: &[u32], corrupted: &[u32]) -> Result<CorruptedCache> {
    if clean.len() != corrupted.len() {
        return Err(Error::shape(
            "build_cache",
            format!("clean has {} tokens, corrupted {}", clean.len(), corrupted.len()),
        ));
    }
    let trace = model.forward(corrupted, &[], true)?.trace.expect("recorded");
    Ok(CorruptedCache { values: trace.values, n_heads: model.config.n_heads, head_dim: model.config.head_dim() })
}

/// Clean run state shared by every patch of one example.
#[derive(Debug, Clone)]
pub struct PatchContext {
    pub tokens: Vec<u32>,
    pub target_pos: usize,
    pub forms: Vec<u32>,
    pub trace: ActivationTrace,
    pub clean_logits: Vec<f64>,
    pub clean_probability: f64,
}

impl PatchContext {
    pub fn new(model: &Model, tokens: &[u32], target_pos: usize, forms: &[u32]) -> Result<Self> {
        if target_pos >= tokens.len() {
            return Err(Error::OutOfRange(format!("target position {target_pos} >= {}", tokens.len())));
        }
        let out = model.forward(tokens, &[], true)?;
        let clean_probability = target_probability(&out.logits, target_pos, forms)?;
        Ok(Self {
            tokens: tokens.to_vec(),
            target_pos,
            forms: forms.to_vec(),
            clean_logits: out.logits.row(target_pos).to_vec(),
            trace: out.trace.expect("recorded"),
            clean_probability,
        })
    }

    fn check_cache(&self, cache: &CorruptedCache) -> Result<()> {
        let (l, t, _, _) = cache.shape();
        if t != self.tokens.len() || l != self.trace.n_layers() {
            return Err(Error::shape("patch", "cache does not match the clean run"));
        }
        Ok(())
    }

    /// Target-row logits after applying `interventions` (all at layers
    /// `>= from_layer`) with clean attention held fixed.
    fn patched_logits(
        &self,
        model: &Model,
        from_layer: usize,
        interventions: &[Intervention],
        record: bool,
    ) -> Result<(Vec<f64>, Option<ActivationTrace>)> {
        let rows = [self.target_pos];
        let out = model.forward_with(
            &self.tokens,
            &ForwardOptions {
                interventions,
                record,
                base: Some(&self.trace),
                resume_layer: from_layer,
                freeze_attention: true,
                logit_rows: Some(&rows),
            },
        )?;
        Ok((out.logits.row(self.target_pos).to_vec(), out.trace))
    }

    fn probability(&self, logits: &[f64]) -> Result<f64> {
        let m = Matrix::row_vector(logits.to_vec());
        target_probability(&m, 0, &self.forms)
    }

    /// `p_t − p_t^{¬j}` for one replaced value vector.
    pub fn patch_score(&self, model: &Model, cache: &CorruptedCache, layer: usize, position: usize) -> Result<f64> {
        Ok(self.patch_traced(model, cache, layer, position, false)?.0)
    }

    /// Like [`patch_score`](Self::patch_score), optionally returning the
    /// patched run's trace.
    pub fn patch_traced(
        &self,
        model: &Model,
        cache: &CorruptedCache,
        layer: usize,
        position: usize,
        record: bool,
    ) -> Result<(f64, Option<ActivationTrace>)> {
        self.check_cache(cache)?;
        if layer >= self.trace.n_layers() || position >= self.tokens.len() {
            return Err(Error::OutOfRange(format!("patch at layer {layer}, position {position}")));
        }
        let iv = Intervention::replace(layer, position, cache.heads(layer, position));
        let (logits, trace) = self.patched_logits(model, layer, &[iv], record)?;
        Ok((self.clean_probability - self.probability(&logits)?, trace))
    }

    /// Every single `(layer, position)` patch, evaluated in parallel and
    /// collected in order.
    pub fn sweep(&self, model: &Model, cache: &CorruptedCache) -> Result<PatchScoreMatrix> {
        self.check_cache(cache)?;
        let (l_n, t_n) = (self.trace.n_layers(), self.tokens.len());
        let cells: Vec<(usize, usize)> = (0..l_n).flat_map(|l| (0..t_n).map(move |j| (l, j))).collect();
        let scores: Vec<f64> = cells
            .par_iter()
            .map(|&(l, j)| self.patch_score(model, cache, l, j))
            .collect::<Result<_>>()?;
        let raw = Matrix::from_vec(l_n, t_n, scores)?;
        Ok(PatchScoreMatrix {
            scores: ScoreMatrix::new(Method::ValuePatching, Unit::Token, self.target_pos, raw, None),
            clean_probability: self.clean_probability,
            forms: self.forms.clone(),
        })
    }

    /// Diagnostic compound patch: replace the values at every listed
    /// position at every layer at once. Returns the target-row logits.
    pub fn patch_all(&self, model: &Model, cache: &CorruptedCache, positions: &[usize]) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        let mut ivs = Vec::new();
        for l in 0..self.trace.n_layers() {
            for &p in positions {
                if p >= self.tokens.len() {
                    return Err(Error::OutOfRange(format!("patch position {p}")));
                }
                ivs.push(Intervention::replace(l, p, cache.heads(l, p)));
            }
        }
        Ok(self.patched_logits(model, 0, &ivs, false)?.0)
    }
}

/// `layers × T` probability drops for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchScoreMatrix {
    pub scores: ScoreMatrix,
    pub clean_probability: f64,
    pub forms: Vec<u32>,
}

impl PatchScoreMatrix {
    pub fn get(&self, layer: usize, position: usize) -> f64 {
        self.scores.get(layer, position)
    }

    /// Long-format CSV: one row per `(layer, token)`.
    pub fn write_csv<W: Write>(&self, out: W, example: &AnnotatedExample, spans: &[TokenSpan], labels: &[String]) -> Result<()> {
        let t_n = self.scores.len();
        if labels.len() != t_n {
            return Err(Error::shape("PatchScoreMatrix::write_csv", "one label per token expected"));
        }
        let mut word_of = vec![usize::MAX; t_n];
        for s in spans {
            for t in s.tokens() {
                if t < t_n {
                    word_of[t] = s.word_index;
                }
            }
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "token_index", "token", "word", "is_cue", "cue_ordinal", "score"])?;
        for l in 0..self.scores.n_layers() {
            for j in 0..t_n {
                let wi = word_of[j];
                let (word, ord) = if wi == usize::MAX {
                    (String::new(), None)
                } else {
                    (example.words[wi].clone(), example.cue_ordinal(wi))
                };
                w.write_record([
                    (l + 1).to_string(),
                    j.to_string(),
                    labels[j].clone(),
                    word,
                    ord.is_some().to_string(),
                    ord.map(|o| o.to_string()).unwrap_or_default(),
                    format_real(self.get(l, j)),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Per-example facts written next to a patch CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSidecar {
    pub example_id: String,
    pub target_pos: usize,
    pub target_word: String,
    pub clean_probability: f64,
    pub corrupted_probability: f64,
    pub clean_prediction: Option<Gender>,
    pub corrupted_prediction: Option<Gender>,
}

/// Token positions of the example's cue words.
pub fn cue_token_positions(example: &AnnotatedExample, spans: &[TokenSpan]) -> Vec<usize> {
    example
        .cue_spans
        .iter()
        .filter_map(|&c| spans.get(c))
        .flat_map(|s| s.tokens())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mode, ModelConfig};
    use crate::rng::Rng;
    use crate::tokenizer::{MASK, PAD};

    fn model(mode: Mode) -> Model {
        let mut cfg = ModelConfig::new(mode, 2, 4, 32, 30);
        cfg.d_ff = 64;
        let mut m = Model::new(cfg, &mut Rng::new(31)).unwrap();
        let mut rng = Rng::new(32);
        for t in m.weights.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.2 * rng.normal();
            }
        }
        m
    }

    const CLEAN: [u32; 7] = [5, 9, 17, MASK, 22, 3, 11];
    const CORRUPT: [u32; 7] = [6, 9, 18, MASK, 22, 4, 11];

    #[test]
    fn cache_shape_and_self_identity() {
        let m = model(Mode::Encoder);
        let cache = build_cache(&m, &CLEAN, &CLEAN).unwrap();
        assert_eq!(cache.shape(), (2, 7, 4, 8));
        let tr = m.forward(&CLEAN, &[], true).unwrap().trace.unwrap();
        assert_eq!(cache.values, tr.values);
        assert_eq!(build_cache(&m, &CLEAN, &CLEAN).unwrap(), cache);
        assert!(build_cache(&m, &CLEAN, &CORRUPT[..6]).is_err());
    }

    #[test]
    fn self_patch_is_zero_everywhere() {
        for mode in [Mode::Encoder, Mode::Decoder] {
            let m = model(mode);
            let t = if mode == Mode::Encoder { 3 } else { 6 };
            let ctx = PatchContext::new(&m, &CLEAN, t, &[7]).unwrap();
            let cache = build_cache(&m, &CLEAN, &CLEAN).unwrap();
            let s = ctx.sweep(&m, &cache).unwrap();
            assert!(s.scores.scores.data().iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn sweep_matches_single_patches_and_keeps_attention() {
        let m = model(Mode::Encoder);
        let ctx = PatchContext::new(&m, &CLEAN, 3, &[7, 8]).unwrap();
        let cache = build_cache(&m, &CLEAN, &CORRUPT).unwrap();
        let s = ctx.sweep(&m, &cache).unwrap();
        let mut nonzero = 0;
        for l in 0..2 {
            for j in 0..7 {
                let (v, tr) = ctx.patch_traced(&m, &cache, l, j, true).unwrap();
                assert_eq!(v, s.get(l, j));
                assert_eq!(tr.unwrap().attention, ctx.trace.attention);
                assert!(v.abs() < 1.0);
                nonzero += (v != 0.0) as usize;
            }
        }
        assert!(nonzero > 0);
        assert!(ctx.patch_score(&m, &cache, 2, 0).is_err());
        assert!(ctx.patch_score(&m, &cache, 0, 7).is_err());
    }

    #[test]
    fn padded_positions_have_no_effect() {
        let m = model(Mode::Encoder);
        let mut clean = CLEAN.to_vec();
        clean.extend([PAD, PAD]);
        let mut corrupt = CORRUPT.to_vec();
        corrupt.extend([PAD, PAD]);
        let ctx = PatchContext::new(&m, &clean, 3, &[7]).unwrap();
        let mut cache = build_cache(&m, &clean, &corrupt).unwrap();
        // Even arbitrary values at PAD positions are ignored.
        for v in &mut cache.values {
            v.row_mut(8).fill(3.0);
        }
        for l in 0..2 {
            assert_eq!(ctx.patch_score(&m, &cache, l, 7).unwrap(), 0.0);
            assert_eq!(ctx.patch_score(&m, &cache, l, 8).unwrap(), 0.0);
        }
    }

    #[test]
    fn decoder_patches_after_target_are_zero() {
        let m = model(Mode::Decoder);
        let ctx = PatchContext::new(&m, &CLEAN, 3, &[7]).unwrap();
        let cache = build_cache(&m, &CLEAN, &CORRUPT).unwrap();
        let s = ctx.sweep(&m, &cache).unwrap();
        for l in 0..2 {
            assert!(s.scores.row(l)[4..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn compound_patch_of_everything_matches_corrupted_values_run() {
        let m = model(Mode::Encoder);
        let ctx = PatchContext::new(&m, &CLEAN, 3, &[7]).unwrap();
        let cache = build_cache(&m, &CLEAN, &CLEAN).unwrap();
        let logits = ctx.patch_all(&m, &cache, &(0..7).collect::<Vec<_>>()).unwrap();
        assert_eq!(logits, ctx.clean_logits);
    }

    #[test]
    fn csv_rows() {
        let m = model(Mode::Encoder);
        let ctx = PatchContext::new(&m, &CLEAN, 3, &[7]).unwrap();
        let cache = build_cache(&m, &CLEAN, &CORRUPT).unwrap();
        let s = ctx.sweep(&m, &cache).unwrap();
        let ex = AnnotatedExample {
            words: ["ron", "is", "an", "his", "actor", "x"].iter().map(|s| s.to_string()).collect(),
            gender: Gender::Male,
            cue_spans: vec![0],
            target: 3,
        };
        let spans: Vec<TokenSpan> = [(0, 0, 2), (1, 2, 1), (2, 3, 1), (3, 4, 1), (4, 5, 1), (5, 6, 1)]
            .iter()
            .map(|&(w, f, c)| TokenSpan { word_index: w, first_token: f, token_count: c })
            .collect();
        let labels: Vec<String> = (0..7).map(|i| format!("t{i}")).collect();
        let mut buf = Vec::new();
        s.write_csv(&mut buf, &ex, &spans, &labels).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 14);
        assert!(text.lines().nth(2).unwrap().starts_with("1,1,t1,ron,true,1,"));
        assert_eq!(cue_token_positions(&ex, &spans), vec![0, 1]);
    }
}
