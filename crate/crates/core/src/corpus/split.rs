// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use super::{AnnotatedExample, MAX_CUES, MIN_CUES};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceConfig {
    /// Inclusive cue-count range; every count in it must have examples.
    pub cue_range: (usize, usize),
    /// Fraction of each balanced group assigned to the test split, in `[0, 1)`.
    pub test_fraction: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            cue_range: (MIN_CUES, MAX_CUES),
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<AnnotatedExample>,
    pub test: Vec<AnnotatedExample>,
    /// Balanced examples per cue count (train + test).
    pub histogram: BTreeMap<usize, usize>,
}

impl DatasetSplit {
    pub fn histogram_of(examples: &[AnnotatedExample]) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for e in examples {
            *h.entry(e.cue_count()).or_default() += 1;
        }
        h
    }
}

/// Undersamples every cue-count group to the size of the smallest one, then
/// splits each group into train and test.
pub fn balance_and_split(
    examples: Vec<AnnotatedExample>,
    rng: &mut Rng,
    cfg: &BalanceConfig,
) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::Invalid(format!("test fraction {} not in [0, 1)", cfg.test_fraction)));
    }
    let (lo, hi) = cfg.cue_range;
    let mut groups: BTreeMap<usize, Vec<AnnotatedExample>> = (lo..=hi).map(|k| (k, Vec::new())).collect();
    for ex in examples {
        match groups.get_mut(&ex.cue_count()) {
            Some(g) => g.push(ex),
            None => {
                return Err(Error::Invalid(format!(
                    "example with {} cues outside range {lo}..={hi}",
                    ex.cue_count()
                )))
            }
        }
    }
    if let Some((&k, _)) = groups.iter().find(|(_, g)| g.is_empty()) {
        return Err(Error::EmptyGroup(k));
    }
    let size = groups.values().map(Vec::len).min().unwrap_or(0);
    let n_test = (size as f64 * cfg.test_fraction).round() as usize;

    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        histogram: BTreeMap::new(),
    };
    for (k, mut group) in groups {
        rng.shuffle(&mut group);
        group.truncate(size);
        split.histogram.insert(k, group.len());
        let train = group.split_off(n_test);
        split.test.extend(group);
        split.train.extend(train);
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Gender;

    fn fake(cues: usize, tag: usize) -> AnnotatedExample {
        let mut words: Vec<String> = (0..cues).map(|i| format!("w{tag}_{i}")).collect();
        words.push("his".into());
        AnnotatedExample {
            words,
            gender: Gender::Male,
            cue_spans: (0..cues).collect(),
            target: cues,
        }
    }

    fn groups(sizes: &[(usize, usize)]) -> Vec<AnnotatedExample> {
        sizes
            .iter()
            .flat_map(|&(k, n)| (0..n).map(move |i| fake(k, i)))
            .collect()
    }

    #[test]
    fn undersamples_to_smallest_group() {
        let data = groups(&[(2, 2480), (3, 1439), (4, 921), (5, 638), (6, 505)]);
        let cfg = BalanceConfig {
            test_fraction: 0.0,
            ..BalanceConfig::default()
        };
        let split = balance_and_split(data.clone(), &mut Rng::new(3), &cfg).unwrap();
        assert!(split.histogram.values().all(|&n| n == 505));
        assert_eq!(split.train.len(), 5 * 505);
        let again = balance_and_split(data, &mut Rng::new(3), &cfg).unwrap();
        assert_eq!(split, again);
    }

    #[test]
    fn uniform_groups_keep_sizes_and_split_disjointly() {
        let data = groups(&[(2, 10), (3, 10), (4, 10), (5, 10), (6, 10)]);
        let split = balance_and_split(data, &mut Rng::new(1), &BalanceConfig::default()).unwrap();
        assert!(split.histogram.values().all(|&n| n == 10));
        assert_eq!(split.test.len(), 10);
        assert!(DatasetSplit::histogram_of(&split.test).values().all(|&n| n == 2));
        for t in &split.test {
            assert!(!split.train.contains(t));
        }
    }

    #[test]
    fn empty_group_named_in_error() {
        let data = groups(&[(2, 5), (3, 5), (5, 5), (6, 5)]);
        let err = balance_and_split(data, &mut Rng::new(1), &BalanceConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyGroup(4)));
    }
}
