// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{AnnotatedExample, CueLexicon, PRONOUN_TARGETS};
use crate::tokenizer::normalize;

pub const MIN_CUES: usize = 2;
pub const MAX_CUES: usize = 6;

/// Why a text did not become an [`AnnotatedExample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    NoTarget,
    GenderConflict,
    CueCount(usize),
}

/// Function words that never start a personal name.
const NOT_A_NAME: &[&str] = &[
    "a", "an", "the", "is", "was", "in", "on", "at", "of", "and", "as", "to", "for", "by", "with",
    "from", "this", "that", "it", "its", "there", "they", "their", "born", "later", "today",
    "much", "critics", "after", "before", "during", "when", "while", "one", "many", "some",
];

fn could_be_name(word: &str, lexicon: &CueLexicon) -> bool {
    word.chars().next().is_some_and(char::is_alphabetic)
        && word.chars().all(|c| c.is_alphabetic() || c == '\'' || c == '-')
        && !lexicon.contains(word)
        && !NOT_A_NAME.contains(&word)
}

/// Annotates raw text. See [`annotate_words`].
pub fn annotate(text: &str, lexicon: &CueLexicon) -> Result<AnnotatedExample, Rejection> {
    annotate_words(normalize(text), lexicon)
}

/// Marks cues and the target in a normalized word list.
///
/// The target is the last gendered pronoun. Cues are the leading first and
/// last name (when the text opens with name-like words) followed by every
/// lexicon word before the target.
pub fn annotate_words(words: Vec<String>, lexicon: &CueLexicon) -> Result<AnnotatedExample, Rejection> {
    let target = words
        .iter()
        .rposition(|w| PRONOUN_TARGETS.contains(&w.as_str()))
        .ok_or(Rejection::NoTarget)?;
    let gender = lexicon
        .gender_of(&words[target])
        .ok_or(Rejection::NoTarget)?;

    let mut cue_spans = Vec::new();
    for (i, w) in words.iter().enumerate().take(2.min(target)) {
        if could_be_name(w, lexicon) && cue_spans.len() == i {
            cue_spans.push(i);
        }
    }
    for (i, w) in words.iter().enumerate().take(target) {
        if let Some(g) = lexicon.gender_of(w) {
            if g != gender {
                return Err(Rejection::GenderConflict);
            }
            cue_spans.push(i);
        }
    }
    if !(MIN_CUES..=MAX_CUES).contains(&cue_spans.len()) {
        return Err(Rejection::CueCount(cue_spans.len()));
    }
    Ok(AnnotatedExample {
        words,
        gender,
        cue_spans,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Gender;

    const RON: &str = "Ron Masak is an American actor. He began as a stage performer, and much of his work is in theater.";

    #[test]
    fn worked_example() {
        let ex = annotate(RON, &CueLexicon::default()).unwrap();
        let cues: Vec<&str> = ex.cue_spans.iter().map(|&i| ex.words[i].as_str()).collect();
        assert_eq!(cues, ["ron", "masak", "actor", "he"]);
        assert_eq!(ex.target_word(), "his");
        assert_eq!(ex.gender, Gender::Male);
        assert_eq!(ex.cue_count(), 4);
        ex.validate(&CueLexicon::default()).unwrap();
    }

    #[test]
    fn rejections() {
        let lex = CueLexicon::default();
        assert_eq!(annotate("ron masak is an actor .", &lex), Err(Rejection::NoTarget));
        assert_eq!(
            annotate("ron masak met her . he smiled .", &lex),
            Err(Rejection::GenderConflict)
        );
        assert_eq!(annotate("the work is his .", &lex), Err(Rejection::CueCount(0)));
        assert_eq!(
            annotate("ron masak is an actor . he is a king . he is a son . he is a man . his", &lex),
            Err(Rejection::CueCount(9))
        );
    }

    #[test]
    fn leading_pronoun_is_a_lexicon_cue_not_a_name() {
        let ex = annotate("he is an american actor . he began , and much of his work is in theater .", &CueLexicon::default()).unwrap();
        assert_eq!(ex.cue_spans, vec![0, 4, 6]);
        assert_eq!(ex.name_cue_count(&CueLexicon::default()), 0);
    }
}
