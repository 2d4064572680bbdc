// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings: corpus tools, models, attribution and patching.

use std::path::PathBuf;

use cuetrace::attribution::{self, Method};
use cuetrace::corpus::{self, AnnotatedExample, GeneratorConfig};
use cuetrace::model::{self, Mode, ModelConfig};
use cuetrace::patching::{build_cache, PatchContext};
use cuetrace::pipeline::{self, Resources};
use cuetrace::training::{PronounSet, DEFAULT_RESTRICTED};
use cuetrace::{Matrix, Rng};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(cuetrace_py, CuetraceError, PyException);

fn err(e: cuetrace::Error) -> PyErr {
    CuetraceError::new_err(e.to_string())
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn parse<T: std::str::FromStr<Err = cuetrace::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// An annotated biography.
#[pyclass(name = "Example", module = "cuetrace_py", from_py_object)]
#[derive(Clone)]
pub struct PyExample {
    inner: AnnotatedExample,
}

#[pymethods]
impl PyExample {
    #[getter]
    fn words(&self) -> Vec<String> {
        self.inner.words.clone()
    }

    #[getter]
    fn gender(&self) -> &'static str {
        self.inner.gender.as_str()
    }

    #[getter]
    fn cue_spans(&self) -> Vec<usize> {
        self.inner.cue_spans.clone()
    }

    #[getter]
    fn target(&self) -> usize {
        self.inner.target
    }

    #[getter]
    fn cue_count(&self) -> usize {
        self.inner.cue_count()
    }

    fn text(&self) -> String {
        self.inner.text()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| err(e.into()))
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        serde_json::from_str(s).map(|inner| Self { inner }).map_err(|e| err(e.into()))
    }

    fn __repr__(&self) -> String {
        format!("Example({:?}, cues={})", self.inner.text(), self.inner.cue_count())
    }
}

#[pyclass(name = "Vocab", module = "cuetrace_py", from_py_object)]
#[derive(Clone)]
pub struct PyVocab {
    inner: cuetrace::Vocab,
}

#[pymethods]
impl PyVocab {
    /// Workbench vocabulary over `examples` with the built-in name table.
    #[staticmethod]
    #[pyo3(signature = (examples, min_frequency = 2))]
    fn build(examples: Vec<PyExample>, min_frequency: usize) -> PyResult<Self> {
        let ex: Vec<AnnotatedExample> = examples.into_iter().map(|e| e.inner).collect();
        pipeline::workbench_vocab(&ex, &Resources::default(), min_frequency).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        cuetrace::Vocab::load(&path).map(|inner| Self { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Token ids and, per word, its `(start, end)` token range.
    fn encode(&self, text: &str) -> (Vec<u32>, Vec<(usize, usize)>) {
        let (ids, spans) = self.inner.encode(text);
        (ids, spans.iter().map(|s| (s.tokens().start, s.tokens().end)).collect())
    }

    fn decode(&self, ids: Vec<u32>) -> String {
        self.inner.decode(&ids)
    }

    fn token(&self, id: u32) -> Option<String> {
        self.inner.token(id).map(str::to_string)
    }

    fn id(&self, token: &str) -> Option<u32> {
        self.inner.id(token)
    }

    /// Model input for an example: `(tokens, target_pos, target_id)`.
    fn model_input(&self, example: &PyExample, mode: &str) -> PyResult<(Vec<u32>, usize, u32)> {
        let input = corpus::model_input(&example.inner, &self.inner, parse(mode)?).map_err(err)?;
        Ok((input.tokens, input.target_pos, input.target_id))
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }
}

#[pyclass(name = "Model", module = "cuetrace_py")]
pub struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (mode, n_layers, n_heads, d_model, vocab_size, seed = 0, d_ff = None, max_len = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        mode: &str,
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        vocab_size: usize,
        seed: u64,
        d_ff: Option<usize>,
        max_len: Option<usize>,
    ) -> PyResult<Self> {
        let mut cfg = ModelConfig::new(parse::<Mode>(mode)?, n_layers, n_heads, d_model, vocab_size);
        if let Some(d) = d_ff {
            cfg.d_ff = d;
        }
        if let Some(t) = max_len {
            cfg.max_len = t;
        }
        model::Model::new(cfg, &mut Rng::new(seed)).map(|inner| Self { inner }).map_err(err)
    }

    /// Load a checkpoint; returns the model and its vocabulary hash.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, String)> {
        model::load_checkpoint(&path).map(|(inner, h)| (Self { inner }, h)).map_err(err)
    }

    fn save(&self, path: PathBuf, vocab_hash: &str) -> PyResult<()> {
        model::save_checkpoint(&self.inner, vocab_hash, &path).map_err(err)
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode().as_str()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.config.n_layers
    }

    fn parameter_count(&self) -> usize {
        self.inner.weights.parameter_count()
    }

    /// `T × V` logits.
    fn logits(&self, py: Python<'_>, tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let out = py.detach(|| self.inner.forward(&tokens, &[], false)).map_err(err)?;
        Ok(rows(&out.logits))
    }

    /// Attention probabilities indexed `[layer][head][query][key]`.
    fn attention(&self, py: Python<'_>, tokens: Vec<u32>) -> PyResult<Vec<Vec<Vec<Vec<f64>>>>> {
        let out = py.detach(|| self.inner.forward(&tokens, &[], true)).map_err(err)?;
        let trace = out.trace.expect("recorded");
        Ok(trace.attention.iter().map(|heads| heads.iter().map(rows).collect()).collect())
    }

    /// Per-layer normalized scores of every token for `target_pos`.
    fn scores(&self, py: Python<'_>, method: &str, tokens: Vec<u32>, target_pos: usize) -> PyResult<Vec<Vec<f64>>> {
        let method: Method = parse(method)?;
        let m = &self.inner;
        let s = py
            .detach(|| -> cuetrace::Result<_> {
                if method == Method::ValueZeroing {
                    return attribution::value_zeroing(m, &tokens, target_pos);
                }
                let trace = m.forward(&tokens, &[], true)?.trace.expect("recorded");
                match method {
                    Method::Attention => attribution::raw_attention(&trace, target_pos),
                    Method::Rollout => attribution::attention_rollout(&trace, target_pos),
                    Method::AttentionNorm => attribution::attention_norm(m, &tokens, &trace, target_pos),
                    _ => Err(cuetrace::Error::Invalid("use patch_sweep for value patching".into())),
                }
            })
            .map_err(err)?;
        Ok(rows(&s.scores))
    }

    /// `L × T` drops in the probability of `forms` at `target_pos` when one
    /// value vector is taken from the corrupted run.
    fn patch_sweep(
        &self,
        py: Python<'_>,
        clean: Vec<u32>,
        corrupted: Vec<u32>,
        target_pos: usize,
        forms: Vec<u32>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let m = &self.inner;
        let sweep = py
            .detach(|| -> cuetrace::Result<_> {
                let ctx = PatchContext::new(m, &clean, target_pos, &forms)?;
                let cache = build_cache(m, &clean, &corrupted)?;
                ctx.sweep(m, &cache)
            })
            .map_err(err)?;
        Ok(rows(&sweep.scores.scores))
    }

    /// Cue profile (`layers × (cues + Others)`) of one example.
    fn cue_profile(&self, py: Python<'_>, vocab: &PyVocab, example: &PyExample, method: &str) -> PyResult<Vec<Vec<f64>>> {
        let method: Method = parse(method)?;
        let (m, v, ex) = (&self.inner, &vocab.inner, &example.inner);
        let a = py
            .detach(|| -> cuetrace::Result<_> {
                let res = Resources::default();
                let restricted = PronounSet::new(&DEFAULT_RESTRICTED, v, &res.lexicon)?;
                pipeline::analyze_example(m, v, &res, &restricted, ex, "py", method)
            })
            .map_err(err)?;
        Ok(rows(&a.profile.values))
    }
}

/// Generate `n` synthetic examples.
#[pyfunction]
#[pyo3(signature = (n, seed = 42, cue_range = (2, 6)))]
fn generate(n: usize, seed: u64, cue_range: (usize, usize)) -> Vec<PyExample> {
    let lexicon = corpus::CueLexicon::default();
    corpus::generate_corpus(&mut Rng::new(seed), n, &GeneratorConfig { cue_range }, &lexicon)
        .into_iter()
        .map(|inner| PyExample { inner })
        .collect()
}

/// Annotate raw text; `None` when it has no usable target or cue count.
#[pyfunction]
fn annotate(text: &str) -> Option<PyExample> {
    corpus::annotate(text, &corpus::CueLexicon::default()).ok().map(|inner| PyExample { inner })
}

/// Gender-swapped counterfactual with the built-in name table.
#[pyfunction]
fn corrupt(example: &PyExample, vocab: &PyVocab) -> PyResult<PyExample> {
    let res = Resources::default();
    corpus::corrupt(&example.inner, &res.lexicon, &res.names, &vocab.inner).map(|inner| PyExample { inner }).map_err(err)
}

/// Balance by cue count and split; returns `(train, test)`.
#[pyfunction]
#[pyo3(signature = (examples, seed = 42, cue_range = (2, 6), test_fraction = 0.2))]
fn balance_and_split(
    examples: Vec<PyExample>,
    seed: u64,
    cue_range: (usize, usize),
    test_fraction: f64,
) -> PyResult<(Vec<PyExample>, Vec<PyExample>)> {
    let ex = examples.into_iter().map(|e| e.inner).collect();
    let cfg = corpus::BalanceConfig { cue_range, test_fraction };
    let split = corpus::balance_and_split(ex, &mut Rng::new(seed), &cfg).map_err(err)?;
    let wrap = |v: Vec<AnnotatedExample>| v.into_iter().map(|inner| PyExample { inner }).collect();
    Ok((wrap(split.train), wrap(split.test)))
}

#[pyfunction]
fn read_jsonl(path: PathBuf) -> PyResult<Vec<PyExample>> {
    corpus::read_jsonl(&path).map(|v| v.into_iter().map(|inner| PyExample { inner }).collect()).map_err(err)
}

#[pyfunction]
fn write_jsonl(path: PathBuf, examples: Vec<PyExample>) -> PyResult<()> {
    let ex: Vec<AnnotatedExample> = examples.into_iter().map(|e| e.inner).collect();
    corpus::write_jsonl(&path, &ex).map_err(err)
}

/// Valid attribution method names.
#[pyfunction]
fn methods() -> Vec<&'static str> {
    Method::ALL.iter().map(|m| m.as_str()).collect()
}

/// Run the command-line tool in-process; returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> u8 {
    let argv: Vec<String> = std::iter::once("cuetrace".to_string()).chain(args).collect();
    py.detach(|| cuetrace_cli::main_with(argv))
}

#[pymodule]
fn cuetrace_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CuetraceError", m.py().get_type::<CuetraceError>())?;
    m.add_class::<PyExample>()?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(annotate, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    m.add_function(wrap_pyfunction!(balance_and_split, m)?)?;
    m.add_function(wrap_pyfunction!(read_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(write_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(methods, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
