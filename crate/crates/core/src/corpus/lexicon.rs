// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Gender;
use crate::error::{Error, Result};

/// Pronouns that may serve as the prediction target.
pub const PRONOUN_TARGETS: [&str; 6] = ["he", "she", "his", "her", "him", "hers"];

const MALE_ROWS: [&[&str]; 4] = [
    &["he", "his", "him", "himself"],
    &["master", "mister", "mr", "sir", "sire", "gentleman", "lord"],
    &["man", "actor", "prince", "waiter", "king"],
    &["father", "dad", "husband", "brother", "nephew", "boy", "uncle", "son", "grandfather"],
];

const FEMALE_ROWS: [&[&str]; 4] = [
    &["she", "her", "hers", "herself"],
    &["miss", "ms", "mrs", "mistress", "madam", "ma'am", "dame"],
    &["woman", "actress", "princess", "waitress", "queen"],
    &["mother", "mom", "wife", "sister", "niece", "girl", "aunt", "daughter", "grandmother"],
];

/// Two-way pairs. Rows three and four pair by position; the pronoun and
/// title rows pair by meaning.
const PAIRS: [(&str, &str); 24] = [
    ("he", "she"),
    ("his", "her"),
    ("himself", "herself"),
    ("master", "mistress"),
    ("mister", "miss"),
    ("mr", "mrs"),
    ("sir", "madam"),
    ("lord", "dame"),
    ("man", "woman"),
    ("actor", "actress"),
    ("prince", "princess"),
    ("waiter", "waitress"),
    ("king", "queen"),
    ("father", "mother"),
    ("dad", "mom"),
    ("husband", "wife"),
    ("brother", "sister"),
    ("nephew", "niece"),
    ("boy", "girl"),
    ("uncle", "aunt"),
    ("son", "daughter"),
    ("grandfather", "grandmother"),
    ("gentleman", "madam"),
    ("sire", "madam"),
];

/// Words without a partner of their own; they map one way only.
const ONE_WAY: [(&str, &str); 4] = [("him", "her"), ("hers", "his"), ("ms", "mr"), ("ma'am", "sir")];

/// Gendered cue words and their opposite-gender counterparts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueLexicon {
    male: BTreeSet<String>,
    female: BTreeSet<String>,
    opposite: BTreeMap<String, String>,
}

impl Default for CueLexicon {
    fn default() -> Self {
        let male = MALE_ROWS.iter().flat_map(|r| r.iter()).map(|w| w.to_string()).collect();
        let female = FEMALE_ROWS.iter().flat_map(|r| r.iter()).map(|w| w.to_string()).collect();
        let mut opposite = BTreeMap::new();
        for (m, f) in PAIRS {
            opposite.insert(m.to_string(), f.to_string());
            // residual entries point at an existing partner and must not
            // overwrite its reverse mapping
            opposite.entry(f.to_string()).or_insert_with(|| m.to_string());
        }
        for (a, b) in ONE_WAY {
            opposite.insert(a.to_string(), b.to_string());
        }
        CueLexicon::new(male, female, opposite).expect("default lexicon is valid")
    }
}

impl CueLexicon {
    pub fn new(
        male: BTreeSet<String>,
        female: BTreeSet<String>,
        opposite: BTreeMap<String, String>,
    ) -> Result<Self> {
        let lex = CueLexicon { male, female, opposite };
        lex.check()?;
        Ok(lex)
    }

    fn check(&self) -> Result<()> {
        if let Some(w) = self.male.intersection(&self.female).next() {
            return Err(Error::Invalid(format!("{w:?} is listed as both male and female")));
        }
        for w in self.male.iter().chain(&self.female) {
            let Some(o) = self.opposite.get(w) else {
                return Err(Error::Invalid(format!("cue word {w:?} has no opposite")));
            };
            if self.gender_of(o) != self.gender_of(w).map(Gender::opposite) {
                return Err(Error::Invalid(format!("opposite of {w:?} is {o:?}, not of the other gender")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lex: CueLexicon = serde_json::from_str(&text)?;
        lex.check()?;
        Ok(lex)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.male.contains(word) || self.female.contains(word)
    }

    pub fn gender_of(&self, word: &str) -> Option<Gender> {
        if self.male.contains(word) {
            Some(Gender::Male)
        } else if self.female.contains(word) {
            Some(Gender::Female)
        } else {
            None
        }
    }

    pub fn opposite_of(&self, word: &str) -> Option<&str> {
        self.opposite.get(word).map(String::as_str)
    }

    /// True when `opposite_of` maps the word back to itself in two steps.
    pub fn is_paired(&self, word: &str) -> bool {
        self.opposite_of(word)
            .and_then(|o| self.opposite_of(o))
            .is_some_and(|back| back == word)
    }

    pub fn words(&self, gender: Gender) -> &BTreeSet<String> {
        match gender {
            Gender::Male => &self.male,
            Gender::Female => &self.female,
        }
    }

    pub fn all_words(&self) -> impl Iterator<Item = &str> {
        self.male.iter().chain(&self.female).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_partitions_and_pairs() {
        let lex = CueLexicon::default();
        assert_eq!(lex.words(Gender::Male).len(), 25);
        assert_eq!(lex.words(Gender::Female).len(), 25);
        for (m, f) in [("he", "she"), ("his", "her"), ("actor", "actress"), ("mr", "mrs"), ("king", "queen"), ("son", "daughter")] {
            assert_eq!(lex.opposite_of(m), Some(f));
            assert_eq!(lex.opposite_of(f), Some(m));
        }
        assert_eq!(lex.opposite_of("him"), Some("her"));
        assert_eq!(lex.opposite_of("sire"), Some("madam"));
        assert_eq!(lex.opposite_of("madam"), Some("sir"));
    }

    #[test]
    fn opposite_is_an_involution_on_paired_words() {
        let lex = CueLexicon::default();
        let paired: Vec<&str> = lex.all_words().filter(|w| lex.is_paired(w)).collect();
        assert!(paired.len() >= 40);
        for w in paired {
            let o = lex.opposite_of(w).unwrap();
            assert_eq!(lex.opposite_of(o), Some(w));
            assert_ne!(lex.gender_of(w), lex.gender_of(o));
        }
    }

    #[test]
    fn overlapping_sets_rejected() {
        let male: BTreeSet<String> = ["he".to_string()].into();
        let female: BTreeSet<String> = ["he".to_string()].into();
        let opp = BTreeMap::from([("he".to_string(), "he".to_string())]);
        assert!(CueLexicon::new(male, female, opp).is_err());
    }

    #[test]
    fn json_round_trip() {
        let lex = CueLexicon::default();
        let json = serde_json::to_string(&lex).unwrap();
        let back: CueLexicon = serde_json::from_str(&json).unwrap();
        assert_eq!(lex, back);
    }
}
