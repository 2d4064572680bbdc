// SPDX-License-Identifier: MIT OR Apache-2.0

//! Glue shared by the command-line tool, the Python bindings and the
//! end-to-end tests: vocabulary construction, input preparation and
//! per-example analysis.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{self, CueProfile, Method, ScoreMatrix};
use crate::corpus::{corrupt, model_input, name_pools, AnnotatedExample, CueLexicon, ModelInput, NameSubstitutionTable};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::patching::{build_cache, PatchContext, PatchSidecar};
use crate::tokenizer::{Vocab, VocabBuilder};
use crate::training::{ModelPredictor, PredictionRule, PronounSet};

/// Lexicon and name table used for annotation and corruption.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Resources {
    pub lexicon: CueLexicon,
    pub names: NameSubstitutionTable,
}

/// Vocabulary over `examples` in which every lexicon word and single-token
/// name is one token and every two-token name splits into exactly two.
pub fn workbench_vocab(examples: &[AnnotatedExample], res: &Resources, min_frequency: usize) -> Result<Vocab> {
    let texts: Vec<String> = examples.iter().map(AnnotatedExample::text).collect();
    let by_count = |k: usize| -> Vec<String> {
        res.names.entries().filter(|(c, _)| *c == k).map(|(_, n)| n.to_string()).collect()
    };
    let vocab = VocabBuilder::new(min_frequency)
        .whole_words(res.lexicon.all_words())
        .whole_words(name_pools().single_token())
        .whole_words(by_count(1))
        .split_words(name_pools().double_token())
        .split_words(by_count(2))
        .build(&texts)?;
    res.names.validate(&vocab)?;
    Ok(vocab)
}

/// Full-text token ids of every example (pre-training data).
pub fn token_sequences(examples: &[AnnotatedExample], vocab: &Vocab) -> Vec<Vec<u32>> {
    examples.iter().map(|e| vocab.encode_words(&e.words).0).collect()
}

pub fn model_inputs(examples: &[AnnotatedExample], vocab: &Vocab, mode: crate::model::Mode) -> Result<Vec<ModelInput>> {
    examples.iter().map(|e| model_input(e, vocab, mode)).collect()
}

/// Vocabulary strings for `tokens`.
pub fn token_labels(vocab: &Vocab, tokens: &[u32]) -> Vec<String> {
    tokens.iter().map(|&t| vocab.token(t).unwrap_or("?").to_string()).collect()
}

/// Length of the longest encoded example.
pub fn longest_sequence(examples: &[AnnotatedExample], vocab: &Vocab) -> usize {
    examples.iter().map(|e| vocab.encode_words(&e.words).0.len()).max().unwrap_or(0)
}

/// Everything computed for one example under one method.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleAnalysis {
    pub input: ModelInput,
    pub token_scores: ScoreMatrix,
    pub word_scores: ScoreMatrix,
    pub profile: CueProfile,
    /// Value patching only.
    pub sidecar: Option<PatchSidecar>,
}

impl ExampleAnalysis {
    /// Words covered by the scored input (a decoder prefix stops before the
    /// target).
    pub fn word_labels(&self, example: &AnnotatedExample) -> Vec<String> {
        example.words[..self.word_scores.len()].to_vec()
    }
}

/// Score one example with `method`.
pub fn analyze_example(
    model: &Model,
    vocab: &Vocab,
    res: &Resources,
    restricted: &PronounSet,
    example: &AnnotatedExample,
    example_id: &str,
    method: Method,
) -> Result<ExampleAnalysis> {
    let mode = model.mode();
    let input = model_input(example, vocab, mode)?;
    let t = input.target_pos;
    let mut sidecar = None;
    let token_scores = match method {
        Method::ValueZeroing => attribution::value_zeroing(model, &input.tokens, t)?,
        Method::Attention | Method::Rollout | Method::AttentionNorm => {
            let trace = model.forward(&input.tokens, &[], true)?.trace.expect("recorded");
            match method {
                Method::Attention => attribution::raw_attention(&trace, t)?,
                Method::Rollout => attribution::attention_rollout(&trace, t)?,
                _ => attribution::attention_norm(model, &input.tokens, &trace, t)?,
            }
        }
        Method::ValuePatching => {
            let corrupted = corrupt(example, &res.lexicon, &res.names, vocab)?;
            let c_input = model_input(&corrupted, vocab, mode)?;
            let ctx = PatchContext::new(model, &input.tokens, t, &[input.target_id])?;
            let cache = build_cache(model, &input.tokens, &c_input.tokens)?;
            let sweep = ctx.sweep(model, &cache)?;
            let forms = PronounSet::all_targets(vocab, &res.lexicon)?;
            let predictor = ModelPredictor { model, restricted, forms: &forms, rule: PredictionRule::Restricted };
            let c_out = model.forward(&c_input.tokens, &[], false)?;
            let clean_id = predictor.pick(&ctx.clean_logits);
            let corrupted_id = predictor.pick(c_out.logits.row(c_input.target_pos));
            sidecar = Some(PatchSidecar {
                example_id: example_id.to_string(),
                target_pos: t,
                target_word: example.target_word().to_string(),
                clean_probability: ctx.clean_probability,
                corrupted_probability: crate::model::target_probability(
                    &c_out.logits,
                    c_input.target_pos,
                    &[input.target_id],
                )?,
                clean_prediction: predictor.gender_of_id(clean_id),
                corrupted_prediction: predictor.gender_of_id(corrupted_id),
            });
            sweep.scores
        }
    };
    let word_scores = if method == Method::ValuePatching {
        attribution::aggregate_subwords_signed(&token_scores, &input.spans)?
    } else {
        attribution::aggregate_subwords(&token_scores, &input.spans)?
    };
    let profile = attribution::cue_profile(&word_scores, example, true)?;
    Ok(ExampleAnalysis { input, token_scores, word_scores, profile, sidecar })
}

/// [`analyze_example`] over many examples, in parallel, results in order.
/// `ids[i]` names example `i`.
pub fn analyze_all(
    model: &Model,
    vocab: &Vocab,
    res: &Resources,
    restricted: &PronounSet,
    examples: &[AnnotatedExample],
    ids: &[String],
    method: Method,
) -> Result<Vec<ExampleAnalysis>> {
    if ids.len() != examples.len() {
        return Err(Error::shape("analyze_all", "one id per example expected"));
    }
    examples
        .par_iter()
        .zip(ids)
        .map(|(e, id)| analyze_example(model, vocab, res, restricted, e, id, method))
        .collect()
}

/// Outcome of the full-corruption check for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipCheck {
    pub clean_correct: bool,
    /// Prediction on the fully corrupted input is the opposite gender.
    pub corrupted_flips: bool,
    /// Prediction after patching every cue position at every layer is the
    /// opposite gender.
    pub patched_flips: bool,
}

/// Compare clean, fully corrupted and all-cue-patched predictions.
pub fn flip_check(
    model: &Model,
    vocab: &Vocab,
    res: &Resources,
    restricted: &PronounSet,
    example: &AnnotatedExample,
) -> Result<FlipCheck> {
    let mode = model.mode();
    let forms = PronounSet::all_targets(vocab, &res.lexicon)?;
    let predictor = ModelPredictor { model, restricted, forms: &forms, rule: PredictionRule::Restricted };
    let input = model_input(example, vocab, mode)?;
    let corrupted = corrupt(example, &res.lexicon, &res.names, vocab)?;
    let c_input = model_input(&corrupted, vocab, mode)?;
    let gold = example.gender;
    let ctx = PatchContext::new(model, &input.tokens, input.target_pos, &[input.target_id])?;
    let clean = predictor.gender_of_id(predictor.pick(&ctx.clean_logits));
    let corrupted_pred = predictor.gender_of_id(predictor.predict_id(&c_input.tokens, c_input.target_pos)?);
    let cache = build_cache(model, &input.tokens, &c_input.tokens)?;
    let cues = crate::patching::cue_token_positions(example, &input.spans);
    let patched_logits = ctx.patch_all(model, &cache, &cues)?;
    let patched = predictor.gender_of_id(predictor.pick(&patched_logits));
    Ok(FlipCheck {
        clean_correct: clean == Some(gold),
        corrupted_flips: corrupted_pred == Some(gold.opposite()),
        patched_flips: patched == Some(gold.opposite()),
    })
}
