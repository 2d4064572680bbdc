// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cue-annotated biography corpus: generation, ingestion, annotation,
//! balancing, counterfactual corruption and model-input construction.

mod annotate;
mod generate;
mod ingest;
mod input;
mod lexicon;
mod names;
mod split;
mod transform;

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use annotate::{annotate, annotate_words, Rejection, MAX_CUES, MIN_CUES};
pub use generate::{generate_corpus, name_pools, GeneratorConfig, NamePools};
pub use ingest::{ingest_wikibio, strip_html, IngestReport};
pub use input::{decoder_input, encoder_input, model_input, ModelInput};
pub use lexicon::{CueLexicon, PRONOUN_TARGETS};
pub use names::NameSubstitutionTable;
pub use split::{balance_and_split, BalanceConfig, DatasetSplit};
pub use transform::{ablate_names, corrupt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn opposite(self) -> Self {
        match self {
            Gender::Male => Gender::Female,
            Gender::Female => Gender::Male,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }

    /// Subject pronoun for this gender.
    pub fn subject_pronoun(self) -> &'static str {
        match self {
            Gender::Male => "he",
            Gender::Female => "she",
        }
    }
}

/// One biography with its cue words and target pronoun marked.
///
/// `cue_spans` holds word indices (in position order) of every cue strictly
/// before `target`. The first two cues of generated examples are the first
/// and last name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub words: Vec<String>,
    pub gender: Gender,
    pub cue_spans: Vec<usize>,
    pub target: usize,
}

impl AnnotatedExample {
    pub fn cue_count(&self) -> usize {
        self.cue_spans.len()
    }

    pub fn target_word(&self) -> &str {
        &self.words[self.target]
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    pub fn is_cue(&self, word_index: usize) -> bool {
        self.cue_spans.contains(&word_index)
    }

    /// 1-based cue ordinal of a word, if it is a cue.
    pub fn cue_ordinal(&self, word_index: usize) -> Option<usize> {
        self.cue_spans
            .iter()
            .position(|&c| c == word_index)
            .map(|p| p + 1)
    }

    /// Number of leading cues that are personal names rather than lexicon
    /// words (0, 1 or 2).
    pub fn name_cue_count(&self, lexicon: &CueLexicon) -> usize {
        self.cue_spans
            .iter()
            .take(2)
            .enumerate()
            .take_while(|&(i, &w)| w == i && !lexicon.contains(&self.words[w]))
            .count()
    }

    /// Checks the structural invariants; `Err` carries a description.
    pub fn validate(&self, lexicon: &CueLexicon) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.target >= self.words.len() {
            return bad(format!("target {} outside {} words", self.target, self.words.len()));
        }
        if !PRONOUN_TARGETS.contains(&self.target_word()) {
            return bad(format!("target word {:?} is not a pronoun", self.target_word()));
        }
        if lexicon.gender_of(self.target_word()) != Some(self.gender) {
            return bad("target pronoun disagrees with gender label".into());
        }
        if self.cue_spans.windows(2).any(|w| w[0] >= w[1]) {
            return bad("cue spans not strictly increasing".into());
        }
        if self.cue_spans.iter().any(|&c| c >= self.target) {
            return bad("cue at or after target".into());
        }
        let names = self.name_cue_count(lexicon);
        for &c in &self.cue_spans[names..] {
            match lexicon.gender_of(&self.words[c]) {
                Some(g) if g == self.gender => {}
                _ => return bad(format!("cue {:?} does not match gender", self.words[c])),
            }
        }
        Ok(())
    }
}

/// Writes examples as JSONL, one object per line.
pub fn write_jsonl(path: &Path, examples: &[AnnotatedExample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<AnnotatedExample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: AnnotatedExample = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(ex);
    }
    Ok(out)
}
