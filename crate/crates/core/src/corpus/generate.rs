// SPDX-License-Identifier: MIT OR Apache-2.0

//! Template-composed synthetic biographies.
//!
//! Every example opens with a first and last name, optionally names a
//! gendered role, adds pronoun-bearing and neutral sentences, and ends with
//! a sentence holding the target pronoun. Cue counts are controlled exactly.

use serde::{Deserialize, Serialize};

use super::{AnnotatedExample, CueLexicon, Gender, MAX_CUES, MIN_CUES};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Inclusive cue-count range; clamped to 2..=6.
    pub cue_range: (usize, usize),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            cue_range: (MIN_CUES, MAX_CUES),
        }
    }
}

/// Name pools grouped by intended token count.
#[derive(Debug, Clone, Copy)]
pub struct NamePools {
    pub male_single: &'static [&'static str],
    pub male_double: &'static [&'static str],
    pub female_single: &'static [&'static str],
    pub female_double: &'static [&'static str],
    pub last_single: &'static [&'static str],
    pub last_double: &'static [&'static str],
}

impl NamePools {
    /// Names that must encode to a single token.
    pub fn single_token(&self) -> impl Iterator<Item = &'static str> {
        self.male_single
            .iter()
            .chain(self.female_single)
            .chain(self.last_single)
            .copied()
    }

    /// Names that must encode to exactly two tokens.
    pub fn double_token(&self) -> impl Iterator<Item = &'static str> {
        self.male_double
            .iter()
            .chain(self.female_double)
            .chain(self.last_double)
            .copied()
    }
}

const POOLS: NamePools = NamePools {
    male_single: &[
        "ron", "bob", "tom", "jack", "paul", "mark", "james", "david", "peter", "george", "frank",
        "henry", "sam", "max", "leo", "carl",
    ],
    male_double: &["john", "oskar", "dorian", "elmar", "ferris", "gideon", "hamish", "isidor"],
    female_single: &[
        "amy", "mary", "anna", "emma", "lucy", "kate", "jane", "sara", "rose", "nina", "lily",
        "grace", "helen", "julia", "alice", "clara",
    ],
    female_double: &["noora", "leonie", "mirela", "odette", "priya", "saskia", "tamsin", "yvette"],
    last_single: &[
        "walker", "smith", "brown", "jones", "miller", "taylor", "clark", "lewis", "young", "hall",
        "wright", "baker",
    ],
    last_double: &["willinsky", "masak", "okafor", "lindqvist", "petrov", "nakamura", "oyelaran", "brzezinski"],
};

pub fn name_pools() -> &'static NamePools {
    &POOLS
}

const NATIONALITIES: &[&str] = &[
    "american", "british", "canadian", "french", "german", "italian", "irish", "australian", "swedish", "indian",
];
const JOBS: &[&str] = &[
    "writer", "painter", "singer", "politician", "engineer", "scientist", "teacher", "journalist",
    "architect", "composer", "lawyer", "photographer", "footballer", "historian", "chef", "pilot",
];
/// Gendered role nouns for the opening sentence (male forms; the female
/// form comes from the lexicon).
const ROLES: &[&str] = &["actor", "waiter", "prince", "king", "man"];
const CITIES: &[&str] = &[
    "london", "paris", "boston", "chicago", "dublin", "sydney", "toronto", "berlin", "rome", "madrid", "oslo", "vienna",
];
const SUBJECTS: &[&str] = &["law", "music", "physics", "history", "medicine", "art", "chemistry", "economics"];
const WORKS: &[&str] = &["novel", "album", "film", "book", "painting", "play"];
const FIELDS: &[&str] = &["theater", "film", "television", "music", "politics", "science", "literature", "radio"];
const SKILLS: &[&str] = &["paint", "sing", "cook", "read", "write", "swim"];

/// Template tokens. `Cue` slots hold the male form of a lexicon word.
#[derive(Clone, Copy)]
enum Slot {
    Lit(&'static str),
    Cue(&'static str),
    Pick(&'static [&'static str]),
}
use Slot::{Cue, Lit, Pick};

const CUE_SENTENCES: &[&[Slot]] = &[
    &[Cue("he"), Lit("began"), Lit("as"), Lit("a"), Lit("stage"), Lit("performer"), Lit(".")],
    &[Cue("he"), Lit("was"), Lit("born"), Lit("in"), Pick(CITIES), Lit(".")],
    &[Cue("he"), Lit("studied"), Pick(SUBJECTS), Lit("at"), Lit("the"), Lit("university"), Lit("of"), Pick(CITIES), Lit(".")],
    &[Lit("later"), Lit(","), Cue("he"), Lit("moved"), Lit("to"), Pick(CITIES), Lit(".")],
    &[Cue("his"), Lit("first"), Pick(WORKS), Lit("was"), Lit("published"), Lit("in"), Pick(CITIES), Lit(".")],
    &[Cue("he"), Lit("is"), Lit("the"), Cue("son"), Lit("of"), Lit("a"), Pick(JOBS), Lit(".")],
    &[Lit("as"), Lit("a"), Cue("boy"), Lit(","), Cue("he"), Lit("lived"), Lit("in"), Pick(CITIES), Lit(".")],
    &[Cue("he"), Lit("taught"), Cue("himself"), Lit("to"), Pick(SKILLS), Lit(".")],
    &[Cue("he"), Lit("became"), Lit("a"), Cue("father"), Lit("in"), Pick(CITIES), Lit(".")],
    &[Cue("he"), Lit("worked"), Lit("as"), Lit("a"), Cue("waiter"), Lit("in"), Pick(CITIES), Lit(".")],
    &[Cue("he"), Lit("was"), Lit("known"), Lit("as"), Lit("a"), Lit("kind"), Cue("man"), Lit(".")],
];

const FILLER_SENTENCES: &[&[Slot]] = &[
    &[Lit("the"), Lit("family"), Lit("lived"), Lit("in"), Pick(CITIES), Lit(".")],
    &[Lit("the"), Lit("early"), Lit("years"), Lit("were"), Lit("spent"), Lit("in"), Pick(CITIES), Lit(".")],
    &[Lit("critics"), Lit("praised"), Lit("the"), Pick(WORKS), Lit(".")],
];

/// Final sentences; each holds exactly one pronoun, the target.
const TARGET_SENTENCES: &[&[Slot]] = &[
    &[Lit("much"), Lit("of"), Cue("his"), Lit("work"), Lit("is"), Lit("in"), Pick(FIELDS), Lit(".")],
    &[Lit("today"), Cue("he"), Lit("lives"), Lit("in"), Pick(CITIES), Lit(".")],
    &[Lit("critics"), Lit("praised"), Cue("his"), Pick(WORKS), Lit(".")],
    &[Lit("in"), Pick(CITIES), Lit(","), Cue("he"), Lit("retired"), Lit(".")],
];

fn article(next: &str) -> &'static str {
    if next.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

struct Builder<'a> {
    words: Vec<String>,
    cues: Vec<usize>,
    gender: Gender,
    lexicon: &'a CueLexicon,
}

impl Builder<'_> {
    fn cue(&mut self, male_form: &str) {
        let w = match self.gender {
            Gender::Male => male_form,
            Gender::Female => self
                .lexicon
                .opposite_of(male_form)
                .expect("template cue words are in the lexicon"),
        };
        self.cues.push(self.words.len());
        self.words.push(w.to_string());
    }

    fn sentence(&mut self, rng: &mut Rng, slots: &[Slot]) {
        for slot in slots {
            match *slot {
                Lit(w) => self.words.push(w.to_string()),
                Cue(w) => self.cue(w),
                Pick(pool) => self.words.push(rng.choose(pool).to_string()),
            }
        }
    }
}

fn cue_slots(slots: &[Slot]) -> usize {
    slots.iter().filter(|s| matches!(s, Cue(_))).count()
}

fn pick_name(rng: &mut Rng, single: &[&'static str], double: &[&'static str]) -> &'static str {
    if rng.below(3) == 0 {
        rng.choose(double)
    } else {
        rng.choose(single)
    }
}

fn generate_one(rng: &mut Rng, cfg: &GeneratorConfig, lexicon: &CueLexicon) -> AnnotatedExample {
    let lo = cfg.cue_range.0.clamp(MIN_CUES, MAX_CUES);
    let hi = cfg.cue_range.1.clamp(lo, MAX_CUES);
    let cue_count = lo + rng.below(hi - lo + 1);
    let gender = if rng.bernoulli(0.5) { Gender::Male } else { Gender::Female };
    let mut b = Builder {
        words: Vec::new(),
        cues: Vec::new(),
        gender,
        lexicon,
    };

    let first = match gender {
        Gender::Male => pick_name(rng, POOLS.male_single, POOLS.male_double),
        Gender::Female => pick_name(rng, POOLS.female_single, POOLS.female_double),
    };
    let last = pick_name(rng, POOLS.last_single, POOLS.last_double);
    b.cues.extend([0, 1]);
    b.words.extend([first.to_string(), last.to_string()]);

    let mut remaining = cue_count - 2;
    let nationality = *rng.choose(NATIONALITIES);
    b.words.push("is".into());
    b.words.push("a".into());
    b.words.push(nationality.into());
    if remaining > 0 && rng.bernoulli(0.5) {
        let role = *rng.choose(ROLES);
        b.cue(role);
        remaining -= 1;
    } else {
        b.words.push(rng.choose(JOBS).to_string());
    }
    b.words.push(".".into());

    let mut body: Vec<&[Slot]> = Vec::new();
    while remaining > 0 {
        let options: Vec<&[Slot]> = CUE_SENTENCES
            .iter()
            .copied()
            .filter(|s| cue_slots(s) <= remaining)
            .collect();
        let s = *rng.choose(&options);
        remaining -= cue_slots(s);
        body.push(s);
    }
    for _ in 0..rng.below(3) {
        let at = rng.below(body.len() + 1);
        body.insert(at, rng.choose(FILLER_SENTENCES));
    }
    for s in body {
        b.sentence(rng, s);
    }

    let target_slots = *rng.choose(TARGET_SENTENCES);
    // "..., and much of his work ..." joins onto the previous sentence
    if matches!(target_slots[0], Lit("much")) && b.words.len() > 6 && rng.bernoulli(0.5) {
        b.words.pop();
        b.words.push(",".into());
        b.words.push("and".into());
    }
    let before = b.cues.len();
    b.sentence(rng, target_slots);
    let target = b.cues.pop().expect("target sentence has a pronoun");
    debug_assert_eq!(b.cues.len(), before);

    let mut words = b.words;
    for i in 0..words.len().saturating_sub(1) {
        if words[i] == "a" {
            words[i] = article(&words[i + 1]).to_string();
        }
    }
    AnnotatedExample {
        words,
        gender,
        cue_spans: b.cues,
        target,
    }
}

/// Generates `n` examples with cue counts drawn uniformly from the range.
pub fn generate_corpus(
    rng: &mut Rng,
    n: usize,
    cfg: &GeneratorConfig,
    lexicon: &CueLexicon,
) -> Vec<AnnotatedExample> {
    (0..n).map(|_| generate_one(rng, cfg, lexicon)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::annotate_words;

    #[test]
    fn deterministic_under_seed() {
        let lex = CueLexicon::default();
        let a = generate_corpus(&mut Rng::new(5), 20, &GeneratorConfig::default(), &lex);
        let b = generate_corpus(&mut Rng::new(5), 20, &GeneratorConfig::default(), &lex);
        assert_eq!(a, b);
        let one = generate_corpus(&mut Rng::new(5), 1, &GeneratorConfig::default(), &lex);
        assert!((2..=6).contains(&one[0].cue_count()));
    }

    #[test]
    fn thousand_examples_satisfy_invariants() {
        let lex = CueLexicon::default();
        let exs = generate_corpus(&mut Rng::new(1), 1000, &GeneratorConfig::default(), &lex);
        let mut seen = [0usize; 7];
        for ex in &exs {
            ex.validate(&lex).unwrap();
            assert!((2..=6).contains(&ex.cue_count()));
            assert_eq!(ex.name_cue_count(&lex), 2);
            seen[ex.cue_count()] += 1;
            let other = lex.words(ex.gender.opposite());
            assert!(ex.words.iter().all(|w| !other.contains(w)), "{}", ex.text());
            // re-annotation reproduces the generator's bookkeeping
            let again = annotate_words(ex.words.clone(), &lex).unwrap();
            assert_eq!(&again, ex);
        }
        assert!(seen[2..].iter().all(|&n| n > 150));
    }

    #[test]
    fn cue_range_respected() {
        let lex = CueLexicon::default();
        let cfg = GeneratorConfig { cue_range: (4, 4) };
        let exs = generate_corpus(&mut Rng::new(2), 50, &cfg, &lex);
        assert!(exs.iter().all(|e| e.cue_count() == 4));
    }

    #[test]
    fn pool_names_are_not_lexicon_or_stop_words() {
        let lex = CueLexicon::default();
        for n in POOLS.single_token().chain(POOLS.double_token()) {
            assert!(!lex.contains(n));
        }
    }
}
