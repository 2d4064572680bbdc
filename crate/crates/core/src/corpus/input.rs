// SPDX-License-Identifier: MIT OR Apache-2.0

use super::AnnotatedExample;
use crate::error::{Error, Result};
use crate::model::Mode;
use crate::tokenizer::{TokenSpan, Vocab, MASK};

/// Token sequence fed to a model together with the bookkeeping needed to
/// read its output back at the word level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub tokens: Vec<u32>,
    /// One span per example word present in `tokens`.
    pub spans: Vec<TokenSpan>,
    /// Position whose representation and prediction are analysed.
    pub target_pos: usize,
    /// Id of the gold target pronoun.
    pub target_id: u32,
}

fn target_id(example: &AnnotatedExample, vocab: &Vocab) -> Result<u32> {
    vocab.word_id(example.target_word()).ok_or_else(|| {
        Error::Invalid(format!(
            "target {:?} is not a single vocabulary token",
            example.target_word()
        ))
    })
}

/// Full sequence with the target word replaced by one `[MASK]` token.
pub fn encoder_input(example: &AnnotatedExample, vocab: &Vocab) -> Result<ModelInput> {
    let target_id = target_id(example, vocab)?;
    let (ids, spans) = vocab.encode_words(&example.words);
    let t = spans[example.target];
    let mut tokens = Vec::with_capacity(ids.len());
    tokens.extend_from_slice(&ids[..t.first_token]);
    tokens.push(MASK);
    tokens.extend_from_slice(&ids[t.first_token + t.token_count..]);
    let shift = t.token_count - 1;
    let spans = spans
        .into_iter()
        .map(|s| match s.word_index.cmp(&example.target) {
            std::cmp::Ordering::Less => s,
            std::cmp::Ordering::Equal => TokenSpan { token_count: 1, ..s },
            std::cmp::Ordering::Greater => TokenSpan {
                first_token: s.first_token - shift,
                ..s
            },
        })
        .collect();
    Ok(ModelInput {
        tokens,
        spans,
        target_pos: t.first_token,
        target_id,
    })
}

/// Prefix ending at the token just before the target word.
pub fn decoder_input(example: &AnnotatedExample, vocab: &Vocab) -> Result<ModelInput> {
    let target_id = target_id(example, vocab)?;
    if example.target == 0 {
        return Err(Error::Invalid("target is the first word; the prefix is empty".into()));
    }
    let (ids, spans) = vocab.encode_words(&example.words[..example.target]);
    Ok(ModelInput {
        target_pos: ids.len() - 1,
        tokens: ids,
        spans,
        target_id,
    })
}

/// [`encoder_input`] or [`decoder_input`] depending on `mode`.
pub fn model_input(example: &AnnotatedExample, vocab: &Vocab, mode: Mode) -> Result<ModelInput> {
    match mode {
        Mode::Encoder => encoder_input(example, vocab),
        Mode::Decoder => decoder_input(example, vocab),
    }
}
