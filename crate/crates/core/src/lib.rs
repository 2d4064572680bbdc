// SPDX-License-Identifier: MIT OR Apache-2.0

//! # cuetrace
//!
//! A desk-scale workbench for asking which gender-cue words a small
//! transformer relies on when it resolves a pronoun.
//!
//! The crate trains miniature encoder-mode (masked-LM) and decoder-mode
//! (causal-LM) transformers on a cue-annotated synthetic biography corpus,
//! then scores every context token at every layer with
//!
//! - **Value Zeroing**: zero one token's value vector and measure the cosine
//!   distance it induces in the target token's layer output;
//! - raw attention, attention rollout, and attention-norm baselines;
//! - **value patching**: splice value vectors cached from a gender-swapped
//!   run into the clean run and record the drop in target probability.
//!
//! ```no_run
//! use cuetrace::corpus::{generate_corpus, CueLexicon, GeneratorConfig};
//! use cuetrace::rng::Rng;
//!
//! let lexicon = CueLexicon::default();
//! let examples = generate_corpus(&mut Rng::new(42), 100, &GeneratorConfig::default(), &lexicon);
//! assert_eq!(examples.len(), 100);
//! ```

pub mod attribution;
pub mod corpus;
pub mod error;
pub mod model;
pub mod patching;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Matrix;
pub use tokenizer::{TokenSpan, Vocab, VocabBuilder};
