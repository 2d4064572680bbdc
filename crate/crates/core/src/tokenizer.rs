// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level tokenizer with greedy longest-match subword fallback.
//!
//! Frequent words are whole tokens. Rare words (and words registered with
//! [`VocabBuilder::split_words`]) contribute a prefix piece and a `##`
//! continuation piece to the inventory, so every rare word seen at build
//! time encodes to exactly two tokens. Single characters are always present
//! as pieces, which makes coverage total for the ASCII alphabet.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;

const RESERVED: [&str; 3] = ["[PAD]", "[MASK]", "[UNK]"];
const CONTINUATION: &str = "##";
const BASE_CHARS: &str = "abcdefghijklmnopqrstuvwxyz0123456789'-";

/// Location of one word inside a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub word_index: usize,
    pub first_token: usize,
    pub token_count: usize,
}

impl TokenSpan {
    pub fn tokens(&self) -> std::ops::Range<usize> {
        self.first_token..self.first_token + self.token_count
    }
}

/// Lowercases, folds common Latin-1 letters to ASCII and splits into words.
/// Punctuation marks are standalone words; an apostrophe or hyphen between
/// two alphanumeric characters stays inside its word.
pub fn normalize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().flat_map(fold_char).collect();
    let mut words = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            flush(&mut current, &mut words);
        } else if c.is_alphanumeric() {
            current.push(c);
        } else if (c == '\'' || c == '-')
            && !current.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            current.push(c);
        } else {
            flush(&mut current, &mut words);
            words.push(c.to_string());
        }
    }
    flush(&mut current, &mut words);
    words
}

fn flush(current: &mut String, words: &mut Vec<String>) {
    if !current.is_empty() {
        words.push(std::mem::take(current));
    }
}

fn fold_char(c: char) -> Vec<char> {
    let folded = match c {
        'à' | 'á' | 'â' | 'ã' | 'ä' | 'å' | 'À' | 'Á' | 'Â' | 'Ã' | 'Ä' | 'Å' => 'a',
        'ç' | 'Ç' => 'c',
        'è' | 'é' | 'ê' | 'ë' | 'È' | 'É' | 'Ê' | 'Ë' => 'e',
        'ì' | 'í' | 'î' | 'ï' | 'Ì' | 'Í' | 'Î' | 'Ï' => 'i',
        'ñ' | 'Ñ' => 'n',
        'ò' | 'ó' | 'ô' | 'õ' | 'ö' | 'ø' | 'Ò' | 'Ó' | 'Ô' | 'Õ' | 'Ö' | 'Ø' => 'o',
        'ù' | 'ú' | 'û' | 'ü' | 'Ù' | 'Ú' | 'Û' | 'Ü' => 'u',
        'ý' | 'ÿ' | 'Ý' => 'y',
        '\u{2019}' | '\u{2018}' => '\'',
        _ => return c.to_lowercase().collect(),
    };
    vec![folded]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    /// Ids that may encode a complete word on their own.
    whole: BTreeSet<u32>,
    /// Piece strings in insertion order (initial pieces bare, continuation
    /// pieces with the `##` marker).
    pieces: Vec<String>,
    initial: HashMap<String, u32>,
    continuation: HashMap<String, u32>,
    max_piece_len: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    pieces: Vec<String>,
    reserved: BTreeMap<String, u32>,
}

impl Vocab {
    fn from_parts(words: Vec<String>, pieces: Vec<String>) -> Result<Self> {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
            whole: BTreeSet::new(),
            pieces: Vec::new(),
            initial: HashMap::new(),
            continuation: HashMap::new(),
            max_piece_len: 0,
        };
        for (i, r) in RESERVED.iter().enumerate() {
            vocab.tokens.push((*r).to_string());
            vocab.index.insert((*r).to_string(), i as u32);
        }
        for w in words {
            if RESERVED.contains(&w.as_str()) || w.starts_with(CONTINUATION) || w.is_empty() {
                return Err(Error::Format(format!("invalid vocabulary word {w:?}")));
            }
            let id = vocab.intern(&w);
            vocab.whole.insert(id);
        }
        for p in pieces {
            vocab.add_piece(p)?;
        }
        Ok(vocab)
    }

    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.index.get(s) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(s.to_string());
        self.index.insert(s.to_string(), id);
        id
    }

    fn add_piece(&mut self, piece: String) -> Result<()> {
        let known = match piece.strip_prefix(CONTINUATION) {
            Some(body) => self.continuation.contains_key(body),
            None => self.initial.contains_key(&piece),
        };
        if known {
            return Ok(());
        }
        let id = self.intern(&piece);
        if let Some(body) = piece.strip_prefix(CONTINUATION) {
            if body.is_empty() {
                return Err(Error::Format("empty continuation piece".into()));
            }
            self.max_piece_len = self.max_piece_len.max(body.chars().count());
            self.continuation.insert(body.to_string(), id);
        } else {
            if piece.is_empty() || RESERVED.contains(&piece.as_str()) {
                return Err(Error::Format(format!("invalid piece {piece:?}")));
            }
            self.max_piece_len = self.max_piece_len.max(piece.chars().count());
            self.initial.insert(piece.clone(), id);
        }
        self.pieces.push(piece);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `word` when it is encoded as a single whole token.
    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.id(word).filter(|id| self.whole.contains(id))
    }

    pub fn is_whole_word(&self, word: &str) -> bool {
        self.word_id(word).is_some()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Encodes one normalized word.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        if let Some(id) = self.word_id(word) {
            return vec![id];
        }
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let remaining = chars.len() - start;
            // the first piece of a non-whole word never covers the whole word
            let cap = if start == 0 && chars.len() > 1 {
                remaining - 1
            } else {
                remaining
            };
            let table = if start == 0 { &self.initial } else { &self.continuation };
            let mut matched = None;
            for len in (1..=cap.min(self.max_piece_len)).rev() {
                let piece: String = chars[start..start + len].iter().collect();
                if let Some(&id) = table.get(&piece) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    start += len;
                }
                None => {
                    out.push(UNK);
                    start += 1;
                }
            }
        }
        out
    }

    pub fn token_count_of(&self, word: &str) -> usize {
        self.encode_word(word).len()
    }

    /// Encodes a sequence of already-normalized words.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> (Vec<u32>, Vec<TokenSpan>) {
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(words.len());
        for (word_index, w) in words.iter().enumerate() {
            let pieces = self.encode_word(w.as_ref());
            spans.push(TokenSpan {
                word_index,
                first_token: ids.len(),
                token_count: pieces.len(),
            });
            ids.extend(pieces);
        }
        (ids, spans)
    }

    /// Normalizes and encodes raw text.
    pub fn encode(&self, text: &str) -> (Vec<u32>, Vec<TokenSpan>) {
        self.encode_words(&normalize(text))
    }

    /// Joins tokens back into normalized text; continuation pieces attach to
    /// the preceding token.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or("[UNK]");
            match tok.strip_prefix(CONTINUATION) {
                Some(body) if !out.is_empty() && !self.whole.contains(&id) => out.push_str(body),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }

    fn to_file(&self) -> VocabFile {
        let tokens = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| *i < RESERVED.len() || self.whole.contains(&(*i as u32)))
            .map(|(_, t)| t.clone())
            .collect();
        let reserved = [("pad", PAD), ("mask", MASK), ("unk", UNK)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        VocabFile {
            tokens,
            pieces: self.pieces.clone(),
            reserved,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json)?;
        let expected = [("pad", PAD), ("mask", MASK), ("unk", UNK)];
        for (name, id) in expected {
            if file.reserved.get(name) != Some(&id) {
                return Err(Error::Format(format!("reserved id {name} must be {id}")));
            }
        }
        if file.tokens.len() < RESERVED.len() || file.tokens[..3] != RESERVED.map(String::from) {
            return Err(Error::Format("vocabulary must start with [PAD] [MASK] [UNK]".into()));
        }
        let vocab = Vocab::from_parts(file.tokens[3..].to_vec(), file.pieces)?;
        if vocab.tokens.len() != vocab.index.len() {
            return Err(Error::Format("duplicate tokens in vocabulary".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds a [`Vocab`] from a corpus.
#[derive(Debug, Clone)]
pub struct VocabBuilder {
    min_frequency: usize,
    forced_whole: BTreeSet<String>,
    forced_split: BTreeSet<String>,
}

impl VocabBuilder {
    pub fn new(min_frequency: usize) -> Self {
        Self {
            min_frequency: min_frequency.max(1),
            forced_whole: BTreeSet::new(),
            forced_split: BTreeSet::new(),
        }
    }

    /// Words that become whole tokens regardless of frequency.
    pub fn whole_words<I, S>(mut self, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.forced_whole
            .extend(words.into_iter().flat_map(|w| normalize(w.as_ref())));
        self
    }

    /// Words that are always covered by two subword pieces, never by a
    /// whole token. Takes precedence over [`whole_words`](Self::whole_words).
    pub fn split_words<I, S>(mut self, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.forced_split
            .extend(words.into_iter().flat_map(|w| normalize(w.as_ref())));
        self
    }

    pub fn build<S: AsRef<str>>(&self, corpus_texts: &[S]) -> Result<Vocab> {
        if corpus_texts.is_empty() {
            return Err(Error::Invalid("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus_texts {
            for w in normalize(text.as_ref()) {
                *freq.entry(w).or_default() += 1;
            }
        }
        let mut whole: BTreeSet<String> = freq
            .iter()
            .filter(|(_, &n)| n >= self.min_frequency)
            .map(|(w, _)| w.clone())
            .collect();
        whole.extend(self.forced_whole.iter().cloned());
        let mut rare: BTreeSet<String> = freq
            .iter()
            .filter(|(_, &n)| n < self.min_frequency)
            .map(|(w, _)| w.clone())
            .collect();
        rare.retain(|w| !self.forced_whole.contains(w));
        for w in &self.forced_split {
            whole.remove(w);
            rare.insert(w.clone());
        }
        // single punctuation marks stay whole even when rare
        let (punct, rare): (BTreeSet<String>, BTreeSet<String>) = rare
            .into_iter()
            .partition(|w| w.chars().count() == 1 && !w.chars().all(char::is_alphanumeric));
        whole.extend(punct);

        let mut pieces: Vec<String> = Vec::new();
        for c in BASE_CHARS.chars() {
            pieces.push(c.to_string());
            pieces.push(format!("{CONTINUATION}{c}"));
        }
        let rare_chars: Vec<Vec<char>> = rare
            .iter()
            .map(|w| w.chars().collect::<Vec<char>>())
            .filter(|c| c.len() >= 2)
            .collect();
        for chars in &rare_chars {
            let mid = chars.len().div_ceil(2);
            pieces.push(chars[..mid].iter().collect());
        }
        let mut vocab = Vocab::from_parts(whole.into_iter().collect(), pieces)?;
        // the first piece is chosen greedily, so register whatever remainder
        // each rare word actually leaves.
        for chars in &rare_chars {
            let first = (1..chars.len())
                .rev()
                .find(|&len| {
                    let p: String = chars[..len].iter().collect();
                    vocab.initial.contains_key(&p)
                });
            if let Some(len) = first {
                let rest: String = chars[len..].iter().collect();
                vocab.add_piece(format!("{CONTINUATION}{rest}"))?;
            }
        }
        Ok(vocab)
    }
}

/// [`VocabBuilder`] with no forced entries.
pub fn build_vocab<S: AsRef<str>>(corpus_texts: &[S], min_frequency: usize) -> Result<Vocab> {
    VocabBuilder::new(min_frequency).build(corpus_texts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RON: &str = "Ron Masak is an American actor. He began as a stage performer, and much of his work is in theater.";

    #[test]
    fn normalize_splits_punctuation() {
        assert_eq!(
            normalize("Mr. Smith's son, aged-ten!"),
            vec!["mr", ".", "smith's", "son", ",", "aged-ten", "!"]
        );
        assert_eq!(normalize("ma'am"), vec!["ma'am"]);
        assert!(normalize("").is_empty());
        assert_eq!(normalize("José"), vec!["jose"]);
    }

    #[test]
    fn frequent_words_are_whole() {
        let v = build_vocab(&["he is he"], 1).unwrap();
        assert!(v.is_whole_word("he"));
        assert!(v.is_whole_word("is"));
        assert_eq!(v.id("[PAD]"), Some(PAD));
        assert_eq!(v.id("[MASK]"), Some(MASK));
        assert_eq!(v.id("[UNK]"), Some(UNK));
    }

    #[test]
    fn rare_word_splits_into_two_pieces() {
        let v = build_vocab(&["ron masak is here . ron is here ."], 2).unwrap();
        assert!(v.is_whole_word("ron"));
        assert_eq!(v.token_count_of("masak"), 2);
        let (ids, spans) = v.encode("masak");
        assert_eq!(ids.len(), 2);
        assert_eq!(spans[0].token_count, 2);
    }

    #[test]
    fn unseen_long_word_takes_several_tokens() {
        let v = build_vocab(&["he is he"], 1).unwrap();
        assert!(v.token_count_of("bartholomew") >= 2);
        assert_eq!(v.token_count_of("he"), 1);
        let word = "zyxwvutsrq";
        assert_eq!(v.token_count_of(word), v.encode(word).1[0].token_count);
    }

    #[test]
    fn forced_split_and_whole() {
        let v = VocabBuilder::new(1)
            .whole_words(["walker"])
            .split_words(["willinsky", "john", "noora"])
            .build(&["john willinsky met noora . john left ."])
            .unwrap();
        assert_eq!(v.token_count_of("walker"), 1);
        assert_eq!(v.token_count_of("willinsky"), 2);
        assert_eq!(v.token_count_of("john"), 2);
        assert_eq!(v.token_count_of("noora"), 2);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: [&str; 0] = [];
        assert!(build_vocab(&empty, 1).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let corpus = [RON, "she is an actress .", "zanzibar qwerty"];
        let a = build_vocab(&corpus, 2).unwrap();
        let b = build_vocab(&corpus, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn worked_example_round_trips() {
        let v = build_vocab(&[RON], 2).unwrap();
        let text = "ron masak is an american actor .";
        let (ids, spans) = v.encode(text);
        assert_eq!(spans.len(), 7);
        let mut next = 0;
        for s in &spans {
            assert_eq!(s.first_token, next);
            assert!(s.token_count >= 1);
            next += s.token_count;
        }
        assert_eq!(next, ids.len());
        assert_eq!(v.decode(&ids), text);
        let (ids, spans) = v.encode("");
        assert!(ids.is_empty() && spans.is_empty());
        let v = build_vocab(&[RON], 1).unwrap();
        let (ids, spans) = v.encode("he is");
        assert_eq!((ids.len(), spans.len()), (2, 2));
    }

    #[test]
    fn json_round_trip() {
        let v = VocabBuilder::new(2)
            .split_words(["masak"])
            .build(&[RON, RON])
            .unwrap();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
        let mut file: serde_json::Value = serde_json::from_str(&v.to_json()).unwrap();
        file["reserved"]["mask"] = 5.into();
        assert!(Vocab::from_json(&file.to_string()).is_err());
    }

    #[test]
    fn unencodable_character_is_unk() {
        let v = build_vocab(&["he"], 1).unwrap();
        assert_eq!(v.encode_word("h\u{4e2d}"), vec![v.initial["h"], UNK]);
    }

    proptest! {
        #[test]
        fn spans_partition_and_round_trip(words in proptest::collection::vec("[a-z]{1,9}|[.,]", 0..12)) {
            let text = words.join(" ");
            let v = build_vocab(&[text.as_str(), "a b c"], 2).unwrap();
            let (ids, spans) = v.encode(&text);
            let mut next = 0;
            for (i, s) in spans.iter().enumerate() {
                prop_assert_eq!(s.word_index, i);
                prop_assert_eq!(s.first_token, next);
                next += s.token_count;
            }
            prop_assert_eq!(next, ids.len());
            prop_assert_eq!(v.decode(&ids), normalize(&text).join(" "));
        }
    }
}
