// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Gender;
use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

/// Constant replacement names used when corrupting first and last names,
/// keyed by the token count of the name being replaced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameSubstitutionTable {
    first: BTreeMap<Gender, BTreeMap<usize, String>>,
    last: BTreeMap<usize, String>,
}

impl Default for NameSubstitutionTable {
    fn default() -> Self {
        let first = BTreeMap::from([
            (Gender::Male, BTreeMap::from([(1, "bob".to_string()), (2, "john".to_string())])),
            (Gender::Female, BTreeMap::from([(1, "amy".to_string()), (2, "noora".to_string())])),
        ]);
        let last = BTreeMap::from([(1, "walker".to_string()), (2, "willinsky".to_string())]);
        Self { first, last }
    }
}

impl NameSubstitutionTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Replacement first name of the given gender for a name of `token_count` tokens.
    pub fn first_name(&self, gender: Gender, token_count: usize) -> Result<&str> {
        self.first
            .get(&gender)
            .and_then(|m| m.get(&token_count))
            .map(String::as_str)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "no {} first name with {token_count} tokens",
                    gender.as_str()
                ))
            })
    }

    pub fn last_name(&self, token_count: usize) -> Result<&str> {
        self.last
            .get(&token_count)
            .map(String::as_str)
            .ok_or_else(|| Error::Invalid(format!("no last name with {token_count} tokens")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &str)> {
        self.first
            .values()
            .flat_map(|m| m.iter())
            .chain(self.last.iter())
            .map(|(k, v)| (*k, v.as_str()))
    }

    /// Rejects the table if any substitute does not encode to its key's
    /// token count under `vocab`.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        for (count, name) in self.entries() {
            let actual = vocab.token_count_of(name);
            if actual != count {
                return Err(Error::Invalid(format!(
                    "substitute name {name:?} is filed under {count} tokens but encodes to {actual}"
                )));
            }
        }
        Ok(())
    }
}
