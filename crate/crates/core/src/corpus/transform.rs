// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{AnnotatedExample, CueLexicon, NameSubstitutionTable};
use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

/// Builds the gender-swapped counterfactual of `example`.
///
/// Lexicon cues and the target pronoun go through `opposite_of`; the leading
/// first and last name are replaced by constant names of the opposite
/// gender with the same token count, so the token length is unchanged.
pub fn corrupt(
    example: &AnnotatedExample,
    lexicon: &CueLexicon,
    names: &NameSubstitutionTable,
    vocab: &Vocab,
) -> Result<AnnotatedExample> {
    let flipped = example.gender.opposite();
    let name_cues = example.name_cue_count(lexicon);
    let mut words = example.words.clone();
    for (ordinal, &w) in example.cue_spans.iter().enumerate() {
        let original = &example.words[w];
        words[w] = if ordinal < name_cues {
            let count = vocab.token_count_of(original);
            if !(1..=2).contains(&count) {
                return Err(Error::Invalid(format!(
                    "name {original:?} encodes to {count} tokens; substitutes exist for 1 or 2"
                )));
            }
            let sub = if ordinal == 0 {
                names.first_name(flipped, count)?
            } else {
                names.last_name(count)?
            };
            sub.to_string()
        } else {
            swap(lexicon, original)?
        };
    }
    words[example.target] = swap(lexicon, example.target_word())?;

    let before: usize = example.words.iter().map(|w| vocab.token_count_of(w)).sum();
    let after: usize = words.iter().map(|w| vocab.token_count_of(w)).sum();
    if before != after {
        return Err(Error::Invalid(format!(
            "corruption changed token count from {before} to {after}"
        )));
    }
    Ok(AnnotatedExample {
        words,
        gender: flipped,
        cue_spans: example.cue_spans.clone(),
        target: example.target,
    })
}

fn swap(lexicon: &CueLexicon, word: &str) -> Result<String> {
    lexicon
        .opposite_of(word)
        .map(str::to_string)
        .ok_or_else(|| Error::Invalid(format!("cue {word:?} has no counterpart")))
}

/// Drops the last name and replaces the first name with the subject pronoun
/// of the example's gender. The example loses one cue.
pub fn ablate_names(example: &AnnotatedExample, lexicon: &CueLexicon) -> Result<AnnotatedExample> {
    if example.name_cue_count(lexicon) != 2 {
        return Err(Error::Invalid(
            "first two cues are not a first and last name".into(),
        ));
    }
    let mut words = example.words.clone();
    words.remove(1);
    words[0] = example.gender.subject_pronoun().to_string();
    let cue_spans = std::iter::once(0)
        .chain(example.cue_spans[2..].iter().map(|&c| c - 1))
        .collect();
    Ok(AnnotatedExample {
        words,
        gender: example.gender,
        cue_spans,
        target: example.target - 1,
    })
}
