// SPDX-License-Identifier: MIT OR Apache-2.0

//! Resolved command plans. A plan holds every setting a command needs, is
//! stored in the command's manifest, and can be executed again from there.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cuetrace::attribution::{CueProfile, Method, ScoreMatrix};
use cuetrace::corpus::{
    ablate_names, annotate, balance_and_split, generate_corpus, ingest_wikibio, read_jsonl, write_jsonl,
    AnnotatedExample, BalanceConfig, CueLexicon, DatasetSplit, Gender, GeneratorConfig, NameSubstitutionTable,
    Rejection,
};
use cuetrace::model::{load_checkpoint, save_checkpoint, Mode, Model, ModelConfig};
use cuetrace::patching::PatchScoreMatrix;
use cuetrace::pipeline::{self, Resources};
use cuetrace::report::{self, write_file};
use cuetrace::training::{
    evaluate, filter_correct, pretrain, prompt_finetune, ModelPredictor, PredictionRule, PronounSet, TrainConfig,
    TrainReport,
};
use cuetrace::{Error, Rng, Vocab};
use serde::{Deserialize, Serialize};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{ModelSection, PipelineConfig};
use crate::manifest::RunManifest;
use crate::{CliError, Command, ReplayArgs, ResourceArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MODEL_INFO_FILE: &str = "model.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROFILES_FILE: &str = "profiles.jsonl";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourcePaths {
    pub lexicon: Option<PathBuf>,
    pub names: Option<PathBuf>,
}

impl From<ResourceArgs> for ResourcePaths {
    fn from(a: ResourceArgs) -> Self {
        Self { lexicon: a.lexicon, names: a.names }
    }
}

impl ResourcePaths {
    fn load(&self, wd: &Path, m: &mut RunManifest) -> Result<Resources, CliError> {
        let lexicon = match &self.lexicon {
            Some(p) => {
                m.add_input(p, &wd.join(p))?;
                CueLexicon::load(&wd.join(p))?
            }
            None => CueLexicon::default(),
        };
        let names = match &self.names {
            Some(p) => {
                m.add_input(p, &wd.join(p))?;
                NameSubstitutionTable::load(&wd.join(p))?
            }
            None => NameSubstitutionTable::default(),
        };
        Ok(Resources { lexicon, names })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenPlan {
    pub n: usize,
    pub seed: u64,
    pub cue_range: (usize, usize),
    pub resources: ResourcePaths,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestPlan {
    pub input: PathBuf,
    pub resources: ResourcePaths,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub corpus: PathBuf,
    pub seed: u64,
    pub cue_range: (usize, usize),
    pub test_fraction: f64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub mode: Mode,
    pub corpus: PathBuf,
    /// Seeds weight initialization; `train.seed` drives batching and masks.
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub resources: ResourcePaths,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetunePlan {
    pub mode: Option<Mode>,
    pub from: PathBuf,
    pub corpus: PathBuf,
    pub train: TrainConfig,
    pub resources: ResourcePaths,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub model: PathBuf,
    pub split: PathBuf,
    pub rule: PredictionRule,
    pub resources: ResourcePaths,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzePlan {
    pub method: Method,
    pub model: PathBuf,
    pub split: PathBuf,
    pub ablate_names: bool,
    pub heatmaps: usize,
    pub resources: ResourcePaths,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPlan {
    pub run: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Plan {
    Gen(GenPlan),
    Ingest(IngestPlan),
    Split(SplitPlan),
    Train(TrainPlan),
    Finetune(FinetunePlan),
    Eval(EvalPlan),
    Analyze(AnalyzePlan),
    Report(ReportPlan),
}

/// What a stored model directory was produced by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub stage: Stage,
    pub mode: Mode,
    pub vocab_hash: String,
    /// Restricted target vocabulary of the last fine-tuning run.
    pub restricted: Option<Vec<String>>,
}

/// A model directory loaded into memory.
pub struct StoredModel {
    pub model: Model,
    pub vocab: Vocab,
    pub info: ModelInfo,
}

impl StoredModel {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let ckpt = dir.join(CHECKPOINT_FILE);
        if !ckpt.is_file() {
            return Err(Error::Invalid(format!("no model checkpoint in {}", dir.display())).into());
        }
        let (model, hash) = load_checkpoint(&ckpt)?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        if vocab.hash() != hash {
            return Err(Error::Invalid(format!("vocabulary in {} does not match the checkpoint", dir.display())).into());
        }
        let info_path = dir.join(MODEL_INFO_FILE);
        let text = std::fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
        let info: ModelInfo = serde_json::from_str(&text).map_err(Error::from)?;
        Ok(Self { model, vocab, info })
    }

    fn save(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = [dir.join(CHECKPOINT_FILE), dir.join(VOCAB_FILE), dir.join(MODEL_INFO_FILE)];
        save_checkpoint(&self.model, &self.vocab.hash(), &paths[0])?;
        self.vocab.save(&paths[1])?;
        write_file(&paths[2], pretty(&self.info)?.as_bytes())?;
        Ok(paths.to_vec())
    }

    fn restricted(&self, lexicon: &CueLexicon) -> Result<PronounSet, CliError> {
        let words = self.info.restricted.clone().unwrap_or_else(|| TrainConfig::default().restricted);
        Ok(PronounSet::new(&words, &self.vocab, lexicon)?)
    }
}

fn pretty<T: Serialize>(value: &T) -> Result<String, CliError> {
    Ok(format!("{}\n", serde_json::to_string_pretty(value).map_err(Error::from)?))
}

fn ms(since: Instant) -> u64 {
    since.elapsed().as_millis() as u64
}

/// `<file>.manifest.json` for single-file outputs.
fn file_manifest(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn shown(wd: &Path, paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.strip_prefix(wd).unwrap_or(p).display().to_string()).collect()
}

fn read_corpus(wd: &Path, path: &Path, m: &mut RunManifest) -> Result<Vec<AnnotatedExample>, CliError> {
    let full = wd.join(path);
    if !full.is_file() {
        return Err(CliError::Usage(format!("corpus {} does not exist", full.display())));
    }
    m.add_input(path, &full)?;
    Ok(read_jsonl(&full)?)
}

fn load_model(wd: &Path, dir: &Path, m: &mut RunManifest) -> Result<StoredModel, CliError> {
    let full = wd.join(dir);
    let stored = StoredModel::load(&full)?;
    m.add_input(dir, &full)?;
    Ok(stored)
}

fn loss_csv(report: &TrainReport) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"]).map_err(Error::from)?;
    for (i, l) in report.step_losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), report::format_real(*l)]).map_err(Error::from)?;
    }
    Ok(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

impl Plan {
    /// Merge flags over the file configuration.
    pub fn resolve(cmd: Command, cfg: &PipelineConfig) -> Result<Self, CliError> {
        Ok(match cmd {
            Command::Gen(a) => Plan::Gen(GenPlan {
                n: a.n.unwrap_or(cfg.generate.n),
                seed: cfg.resolve_seed(a.seed)?,
                cue_range: a.cue_range.unwrap_or(cfg.generate.cue_range),
                resources: a.resources.into(),
                out: a.out,
            }),
            Command::Ingest(a) => Plan::Ingest(IngestPlan { input: a.input, resources: a.resources.into(), out: a.out }),
            Command::Split(a) => Plan::Split(SplitPlan {
                corpus: a.corpus,
                seed: cfg.resolve_seed(a.seed)?,
                cue_range: a.cue_range.unwrap_or(cfg.split.cue_range),
                test_fraction: a.test_fraction.unwrap_or(cfg.split.test_fraction),
                out: a.out,
            }),
            Command::Train(a) => {
                let seed = cfg.resolve_seed(a.seed)?;
                let mut train = cfg.pretrain.0.clone();
                train.seed = seed;
                if let Some(e) = a.epochs {
                    train.epochs = e;
                }
                train.validate()?;
                Plan::Train(TrainPlan {
                    mode: a.mode,
                    corpus: a.corpus,
                    seed,
                    model: cfg.model.clone(),
                    train,
                    resources: a.resources.into(),
                    out: a.out,
                })
            }
            Command::Finetune(a) => {
                let mut train = cfg.finetune.0.clone();
                train.seed = cfg.resolve_seed(a.seed)?;
                if let Some(e) = a.epochs {
                    train.epochs = e;
                }
                if let Some(r) = a.restricted {
                    train.restricted = r;
                }
                train.validate()?;
                Plan::Finetune(FinetunePlan {
                    mode: a.mode,
                    from: a.from,
                    corpus: a.corpus,
                    train,
                    resources: a.resources.into(),
                    out: a.out,
                })
            }
            Command::Eval(a) => Plan::Eval(EvalPlan {
                model: a.model,
                split: a.split,
                rule: if a.full_vocab { PredictionRule::FullVocab } else { PredictionRule::Restricted },
                resources: a.resources.into(),
                out: a.out,
            }),
            Command::Analyze(a) => Plan::Analyze(AnalyzePlan {
                method: a.method,
                model: a.model,
                split: a.split,
                ablate_names: a.ablate_names,
                heatmaps: a.heatmaps.unwrap_or(cfg.analysis.heatmaps),
                resources: a.resources.into(),
                out: a.out,
            }),
            Command::Report(a) => Plan::Report(ReportPlan { run: a.run, out: a.out }),
            Command::Replay(_) => return Err(CliError::Usage("replay has no plan of its own".into())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Plan::Gen(_) => "gen",
            Plan::Ingest(_) => "ingest",
            Plan::Split(_) => "split",
            Plan::Train(_) => "train",
            Plan::Finetune(_) => "finetune",
            Plan::Eval(_) => "eval",
            Plan::Analyze(_) => "analyze",
            Plan::Report(_) => "report",
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            Plan::Gen(p) => p.out = out,
            Plan::Ingest(p) => p.out = out,
            Plan::Split(p) => p.out = out,
            Plan::Train(p) => p.out = out,
            Plan::Finetune(p) => p.out = out,
            Plan::Eval(p) => p.out = Some(out),
            Plan::Analyze(p) => p.out = out,
            Plan::Report(p) => p.out = out,
        }
    }

    /// Run the plan and write its manifest. Returns the manifest path
    /// (`None` for an evaluation without `--out`).
    pub fn execute(&self, wd: &Path) -> Result<Option<PathBuf>, CliError> {
        let start = Instant::now();
        let plan_json = serde_json::to_value(self).map_err(Error::from)?;
        let mut m = RunManifest::new(self.name(), wd, plan_json);
        let (path, outputs) = match self {
            Plan::Gen(p) => p.run(wd, &mut m)?,
            Plan::Ingest(p) => p.run(wd, &mut m)?,
            Plan::Split(p) => p.run(wd, &mut m)?,
            Plan::Train(p) => p.run(wd, &mut m)?,
            Plan::Finetune(p) => p.run(wd, &mut m)?,
            Plan::Eval(p) => match p.run(wd, &mut m)? {
                Some(r) => r,
                None => return Ok(None),
            },
            Plan::Analyze(p) => p.run(wd, &mut m)?,
            Plan::Report(p) => p.run(wd, &mut m)?,
        };
        m.outputs = shown(wd, &outputs);
        m.timings_ms.insert("total".into(), ms(start));
        m.write(&path)?;
        log::info!("{} finished in {:.1}s; manifest {}", self.name(), start.elapsed().as_secs_f64(), path.display());
        Ok(Some(path))
    }
}

type Written = (PathBuf, Vec<PathBuf>);

impl GenPlan {
    fn run(&self, wd: &Path, m: &mut RunManifest) -> Result<Written, CliError> {
        let res = self.resources.load(wd, m)?;
        m.seeds.insert("seed".into(), self.seed);
        let cfg = GeneratorConfig { cue_range: self.cue_range };
        let examples = generate_corpus(&mut Rng::new(self.seed), self.n, &cfg, &res.lexicon);
        let out = wd.join(&self.out);
        ensure_parent(&out)?;
        write_jsonl(&out, &examples)?;
        m.metrics = json!({ "examples": examples.len(), "histogram": DatasetSplit::histogram_of(&examples) });
        Ok((file_manifest(&out), vec![out]))
    }
}

impl IngestPlan {
    fn run(&self, wd: &Path, m: &mut RunManifest) -> Result<Written, CliError> {
        let res = self.resources.load(wd, m)?;
        let input = wd.join(&self.input);
        if !input.is_file() {
            return Err(CliError::Usage(format!("input {} does not exist", input.display())));
        }
        m.add_input(&self.input, &input)?;
        let report = ingest_wikibio(&input)?;
        let mut examples = Vec::new();
        let mut rejected: BTreeMap<&str, usize> = BTreeMap::new();
        for text in &report.texts {
            match annotate(text, &res.lexicon) {
                Ok(e) => examples.push(e),
                Err(r) => {
                    let key = match r {
                        Rejection::NoTarget => "no_target",
                        Rejection::GenderConflict => "gender_conflict",
                        Rejection::CueCount(_) => "cue_count",
                    };
                    *rejected.entry(key).or_default() += 1;
                }
            }
        }
        let out = wd.join(&self.out);
        ensure_parent(&out)?;
        write_jsonl(&out, &examples)?;
        m.metrics = json!({
            "lines_skipped": report.warnings,
            "texts": report.texts.len(),
            "kept": examples.len(),
            "rejected": rejected,
            "histogram": DatasetSplit::histogram_of(&examples),
        });
        Ok((file_manifest(&out), vec![out]))
    }
}

impl SplitPlan {
    fn run(&self, wd: &Path, m: &mut RunManifest) -> Result<Written, CliError> {
        let examples = read_corpus(wd, &self.corpus, m)?;
        m.seeds.insert("seed".into(), self.seed);
        let (lo, hi) = self.cue_range;
        let before = examples.len();
        let examples: Vec<_> = examples.into_iter().filter(|e| (lo..=hi).contains(&e.cue_count())).collect();
        if examples.len() < before {
            log::info!("dropped {} examples outside cue range {lo}..{hi}", before - examples.len());
        }
        let cfg = BalanceConfig { cue_range: self.cue_range, test_fraction: self.test_fraction };
        let split = balance_and_split(examples, &mut Rng::new(self.seed), &cfg)?;
        let dir = wd.join(&self.out);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (train, test) = (dir.join("train.jsonl"), dir.join("test.jsonl"));
        write_jsonl(&train, &split.train)?;
        write_jsonl(&test, &split.test)?;
        m.metrics = json!({
            "per_group": split.histogram,
            "train": DatasetSplit::histogram_of(&split.train),
            "test": DatasetSplit::histogram_of(&split.test),
        });
        Ok((dir.join(MANIFEST_FILE), vec![train, test]))
    }
}

impl TrainPlan {
    fn run(&self, wd: &Path, m: &mut RunManifest) -> Result<Written, CliError> {
        let res = self.resources.load(wd, m)?;
        let examples = read_corpus(wd, &self.corpus, m)?;
        m.seeds.insert("init".into(), self.seed);
        m.seeds.insert("train".into(), self.train.seed);
        let vocab = pipeline::workbench_vocab(&examples, &res, self.model.min_frequency)?;
        let longest = pipeline::longest_sequence(&examples, &vocab);
        let mut cfg = ModelConfig::new(self.mode, self.model.n_layers, self.model.n_heads, self.model.d_model, vocab.len());
        cfg.d_ff = self.model.d_ff;
        cfg.max_len = self.model.max_len.max(longest);
        cfg.tied_head = self.model.tied_head;
        let mut model = Model::new(cfg, &mut Rng::new(self.seed).fork(1))?;
        log::info!(
            "pre-training {} model: {} parameters, vocabulary {}, {} sequences",
            self.mode.as_str(),
            model.weights.parameter_count(),
            vocab.len(),
            examples.len()
        );
        let t = Instant::now();
        let sequences = pipeline::token_sequences(&examples, &vocab);
        let report = pretrain(&mut model, &sequences, &self.train)?;
        m.timings_ms.insert("train".into(), ms(t));
        let stored = StoredModel {
            info: ModelInfo { stage: Stage::Pretrained, mode: self.mode, vocab_hash: vocab.hash(), restricted: None },
            model,
            vocab,
        };
        let dir = wd.join(&self.out);
        let mut outputs = stored.save(&dir)?;
        let loss = dir.join("loss.csv");
        write_file(&loss, &loss_csv(&report)?)?;
        outputs.push(loss);
        m.metrics = json!({
            "parameters": stored.model.weights.parameter_count(),
            "vocab_size": stored.vocab.len(),
            "max_len": stored.model.config.max_len,
            "epoch_losses": report.epoch_losses,
        });
        Ok((dir.join(MANIFEST_FILE), outputs))
    }
}

impl FinetunePlan {
    fn run(&self, wd: &Path, m: &mut RunManifest) -> Result<Written, CliError> {
        let res = self.resources.load(wd, m)?;
        let from = wd.join(&self.from);
        if !from.join(CHECKPOINT_FILE).is_file() {
            return Err(Error::Invalid(format!(
                "fine-tuning needs a pre-trained checkpoint; none found in {}",
                from.display()
            ))
            .into());
        }
        let mut stored = load_model(wd, &self.from, m)?;
        let mode = stored.model.mode();
        if let Some(want) = self.mode.filter(|&w| w != mode) {
            return Err(CliError::Usage(format!(
                "--mode {} does not match the {} checkpoint",
                want.as_str(),
                mode.as_str()
            )));
        }
        let examples = read_corpus(wd, &self.corpus, m)?;
        m.seeds.insert("train".into(), self.train.seed);
        let inputs = pipeline::model_inputs(&examples, &stored.vocab, mode)?;
        let set = PronounSet::new(&self.train.restricted, &stored.vocab, &res.lexicon)?;
        let t = Instant::now();
        let report = prompt_finetune(&mut stored.model, &inputs, &set, &self.train)?;
        m.timings_ms.insert("finetune".into(), ms(t));
        stored.info.stage = Stage::Finetuned;
        stored.info.restricted = Some(self.train.restricted.clone());
        let dir = wd.join(&self.out);
        let mut outputs = stored.save(&dir)?;
        let loss = dir.join("loss.csv");
        write_file(&loss, &loss_csv(&report)?)?;
        outputs.push(loss);
        m.metrics = json!({ "restricted": set.words, "epoch_losses": report.epoch_losses });
        Ok((dir.join(MANIFEST_FILE), outputs))
    }
}

/// Accuracy overall and per cue count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rule: PredictionRule,
    pub n: usize,
    pub accuracy: f64,
    pub per_bucket: BTreeMap<usize, f64>,
    /// Restricted rule only: how corruption moves correct predictions.
    pub flips: Option<FlipSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipSummary {
    pub correct: usize,
    /// Correct examples whose fully corrupted input predicts the other gender.
    pub corrupted_flips: usize,
    /// Of those, examples that also flip when every cue value is patched.
    pub patched_flips: usize,
}

impl EvalPlan {
    fn run(&self, wd: &Path, m: &mut RunManifest) -> Result<Option<Written>, CliError> {
        let res = self.resources.load(wd, m)?;
        let stored = load_model(wd, &self.model, m)?;
        let examples = read_corpus(wd, &self.split, m)?;
        let summary = evaluate_stored(&stored, &res, &examples, self.rule)?;
        println!("accuracy {:.4} on {} examples ({:?})", summary.accuracy, summary.n, self.rule);
        if let Some(f) = summary.flips {
            println!("corruption flips {}/{}, of which {} also flip under the all-cue patch", f.corrupted_flips, f.correct, f.patched_flips);
        }
        let Some(out) = &self.out else { return Ok(None) };
        let out = wd.join(out);
        write_file(&out, pretty(&summary)?.as_bytes())?;
        m.metrics = serde_json::to_value(&summary).map_err(Error::from)?;
        Ok(Some((file_manifest(&out), vec![out])))
    }
}

/// Accuracy of a stored model on annotated examples.
pub fn evaluate_stored(
    stored: &StoredModel,
    res: &Resources,
    examples: &[AnnotatedExample],
    rule: PredictionRule,
) -> Result<EvalSummary, CliError> {
    let inputs = pipeline::model_inputs(examples, &stored.vocab, stored.model.mode())?;
    let restricted = stored.restricted(&res.lexicon)?;
    let forms = PronounSet::all_targets(&stored.vocab, &res.lexicon)?;
    let predictor = ModelPredictor { model: &stored.model, restricted: &restricted, forms: &forms, rule };
    let golds: Vec<Gender> = examples.iter().map(|e| e.gender).collect();
    let eval = evaluate(&predictor, &inputs, &golds)?;
    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (e, &ok) in examples.iter().zip(&eval.correct) {
        let b = buckets.entry(e.cue_count()).or_default();
        b.0 += ok as usize;
        b.1 += 1;
    }
    let flips = if rule == PredictionRule::Restricted {
        let checks: Vec<pipeline::FlipCheck> = examples
            .par_iter()
            .zip(&eval.correct)
            .filter(|(_, &ok)| ok)
            .map(|(e, _)| pipeline::flip_check(&stored.model, &stored.vocab, res, &restricted, e))
            .collect::<Result<_, _>>()?;
        Some(FlipSummary {
            correct: checks.len(),
            corrupted_flips: checks.iter().filter(|c| c.corrupted_flips).count(),
            patched_flips: checks.iter().filter(|c| c.corrupted_flips && c.patched_flips).count(),
        })
    } else {
        None
    };
    Ok(EvalSummary {
        flips,
        rule,
        n: examples.len(),
        accuracy: eval.accuracy,
        per_bucket: buckets.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect(),
    })
}

/// One line of `profiles.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub example_id: String,
    pub profile: CueProfile,
}

impl AnalyzePlan {
    fn run(&self, wd: &Path, m: &mut RunManifest) -> Result<Written, CliError> {
        let res = self.resources.load(wd, m)?;
        let stored = load_model(wd, &self.model, m)?;
        let all = read_corpus(wd, &self.split, m)?;
        let (vocab, model) = (&stored.vocab, &stored.model);

        let mut ids = Vec::new();
        let mut examples = Vec::new();
        for (i, e) in all.iter().enumerate() {
            if !self.ablate_names {
                ids.push(format!("{i:05}"));
                examples.push(e.clone());
            } else if e.name_cue_count(&res.lexicon) == 2 {
                ids.push(format!("{i:05}"));
                examples.push(ablate_names(e, &res.lexicon)?);
            }
        }
        let inputs = pipeline::model_inputs(&examples, vocab, model.mode())?;
        let restricted = stored.restricted(&res.lexicon)?;
        let forms = PronounSet::all_targets(vocab, &res.lexicon)?;
        let predictor =
            ModelPredictor { model, restricted: &restricted, forms: &forms, rule: PredictionRule::Restricted };
        let filter = filter_correct(&predictor, &examples, &inputs)?;
        let kept: Vec<AnnotatedExample> = filter.kept.iter().map(|&i| examples[i].clone()).collect();
        let kept_ids: Vec<String> = filter.kept.iter().map(|&i| ids[i].clone()).collect();
        log::info!("{}: analysing {} of {} examples", self.method, kept.len(), examples.len());

        let t = Instant::now();
        let analyses = pipeline::analyze_all(model, vocab, &res, &restricted, &kept, &kept_ids, self.method)?;
        m.timings_ms.insert("analysis".into(), ms(t));

        let root = wd.join(&self.out);
        let method_dir = root.join(self.method.as_str());
        std::fs::create_dir_all(&method_dir).map_err(|e| Error::io(&method_dir, e))?;
        let mut outputs = Vec::new();

        let profiles_path = method_dir.join(PROFILES_FILE);
        let mut lines = Vec::new();
        for (a, id) in analyses.iter().zip(&kept_ids) {
            let rec = ProfileRecord { example_id: id.clone(), profile: a.profile.clone() };
            lines.push(serde_json::to_string(&rec).map_err(Error::from)?);
        }
        write_file(&profiles_path, jsonl(&lines).as_bytes())?;
        outputs.push(profiles_path);

        if self.method == Method::ValuePatching {
            let path = method_dir.join("sidecars.jsonl");
            let lines: Vec<String> = analyses
                .iter()
                .filter_map(|a| a.sidecar.as_ref())
                .map(|s| serde_json::to_string(s).map_err(Error::from))
                .collect::<Result<_, _>>()?;
            write_file(&path, jsonl(&lines).as_bytes())?;
            outputs.push(path);
        }

        let examples_dir = root.join("examples");
        for ((a, id), ex) in analyses.iter().zip(&kept_ids).zip(&kept).take(self.heatmaps) {
            let stem = format!("{id}.{}", self.method);
            let tok_path = examples_dir.join(format!("{stem}.tokens.csv"));
            let word_path = examples_dir.join(format!("{stem}.words.csv"));
            let mut buf = Vec::new();
            a.token_scores.write_csv(&mut buf, id, &pipeline::token_labels(vocab, &a.input.tokens))?;
            write_file(&tok_path, &buf)?;
            let mut buf = Vec::new();
            a.word_scores.write_csv(&mut buf, id, &a.word_labels(ex))?;
            write_file(&word_path, &buf)?;
            outputs.push(tok_path);
            outputs.push(word_path);
            if let Some(side) = &a.sidecar {
                let patch = PatchScoreMatrix {
                    scores: a.token_scores.clone(),
                    clean_probability: side.clean_probability,
                    forms: vec![a.input.target_id],
                };
                let patch_path = examples_dir.join(format!("{stem}.patch.csv"));
                let mut buf = Vec::new();
                patch.write_csv(&mut buf, ex, &a.input.spans, &pipeline::token_labels(vocab, &a.input.tokens))?;
                write_file(&patch_path, &buf)?;
                let side_path = examples_dir.join(format!("{stem}.json"));
                write_file(&side_path, pretty(side)?.as_bytes())?;
                outputs.push(patch_path);
                outputs.push(side_path);
            }
        }

        let subset_path = method_dir.join("subset.json");
        let subset = json!({
            "ablate_names": self.ablate_names,
            "candidates": examples.len(),
            "kept": kept.len(),
            "per_bucket": filter.per_bucket,
        });
        write_file(&subset_path, pretty(&subset)?.as_bytes())?;
        outputs.push(subset_path);
        m.metrics = subset;
        Ok((method_dir.join(MANIFEST_FILE), outputs))
    }
}

fn jsonl(lines: &[String]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

/// Read the cue profiles written by `analyze`.
pub fn read_profiles(path: &Path) -> Result<Vec<ProfileRecord>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)).into())
        })
        .collect()
}

/// Final-layer facts of one bucket, for the report summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub n: usize,
    pub final_layer_cues: Vec<f64>,
    pub final_layer_others: f64,
    pub cue_mean_exceeds_others: bool,
    /// 1-based ordinal of the highest-scoring cue at the final layer.
    pub dominant_cue: usize,
}

impl ReportPlan {
    fn run(&self, wd: &Path, m: &mut RunManifest) -> Result<Written, CliError> {
        let run = wd.join(&self.run);
        if !run.is_dir() {
            return Err(CliError::Usage(format!("run directory {} does not exist", run.display())));
        }
        let out = wd.join(&self.out);
        let mut outputs = Vec::new();
        let mut summary: BTreeMap<String, BTreeMap<usize, BucketSummary>> = BTreeMap::new();
        for method in Method::ALL {
            let path = run.join(method.as_str()).join(PROFILES_FILE);
            if !path.is_file() {
                continue;
            }
            m.add_input(&self.run.join(method.as_str()).join(PROFILES_FILE), &path)?;
            let profiles: Vec<CueProfile> = read_profiles(&path)?.into_iter().map(|r| r.profile).collect();
            if profiles.is_empty() {
                log::warn!("{}: no profiles to report", method);
                continue;
            }
            let aggs = report::aggregate_by_bucket(&profiles)?;
            outputs.extend(report::emit_tree(&out, &aggs)?);
            let per_bucket = summary.entry(method.as_str().to_string()).or_default();
            for (&k, agg) in &aggs {
                let last = agg.n_layers() - 1;
                let cues: Vec<f64> = (0..k).map(|i| agg.mean.get(last, i)).collect();
                let others = agg.mean.get(last, k);
                let cue_mean = cues.iter().sum::<f64>() / k as f64;
                let dominant = cues
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0;
                per_bucket.insert(
                    k,
                    BucketSummary {
                        n: agg.n,
                        final_layer_cues: cues,
                        final_layer_others: others,
                        cue_mean_exceeds_others: cue_mean > others,
                        dominant_cue: dominant + 1,
                    },
                );
            }
        }
        if summary.is_empty() {
            return Err(CliError::Usage(format!("no analysis profiles under {}", run.display())));
        }

        let examples_dir = run.join("examples");
        if examples_dir.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&examples_dir)
                .map_err(|e| Error::io(&examples_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.to_string_lossy().ends_with(".words.csv"))
                .collect();
            files.sort();
            for f in files {
                m.add_input(f.strip_prefix(wd).unwrap_or(&f), &f)?;
                let reader = File::open(&f).map_err(|e| Error::io(&f, e))?;
                let (scores, id, labels) = ScoreMatrix::read_csv(std::io::BufReader::new(reader))?;
                let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let stem = name.trim_end_matches(".words.csv");
                let svg = report::heatmap_svg(&scores, &labels, &format!("{id} {}", scores.method))?;
                let svg_path = out.join("examples").join(format!("{stem}.svg"));
                write_file(&svg_path, svg.as_bytes())?;
                outputs.push(svg_path);
            }
        }

        let summary_path = out.join("summary.json");
        write_file(&summary_path, pretty(&summary)?.as_bytes())?;
        outputs.push(summary_path);
        m.metrics = serde_json::to_value(&summary).map_err(Error::from)?;
        Ok((out.join(MANIFEST_FILE), outputs))
    }
}

/// Re-run the command recorded in a manifest. Paths resolve against
/// `workdir` when given, else against the recorded working directory.
pub fn replay(workdir: Option<&Path>, args: &ReplayArgs) -> Result<PathBuf, CliError> {
    let base = workdir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let manifest = RunManifest::load(&base.join(&args.manifest))?;
    let mut plan: Plan = serde_json::from_value(manifest.plan.clone())
        .map_err(|e| CliError::Usage(format!("manifest plan is not replayable: {e}")))?;
    if plan.name() != manifest.command {
        return Err(CliError::Usage(format!(
            "manifest command {:?} does not match its plan ({})",
            manifest.command,
            plan.name()
        )));
    }
    if let Some(out) = &args.out {
        plan.set_out(out.clone());
    }
    let wd = workdir.map(Path::to_path_buf).unwrap_or(manifest.workdir);
    if !wd.is_dir() {
        return Err(CliError::Usage(format!("recorded workdir {} does not exist", wd.display())));
    }
    log::info!("replaying {} in {}", plan.name(), wd.display());
    plan.execute(&wd)?.ok_or_else(|| CliError::Usage("replayed command wrote no artifacts".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_manifest_appends_suffix() {
        assert_eq!(file_manifest(Path::new("a/corpus.jsonl")), PathBuf::from("a/corpus.jsonl.manifest.json"));
    }

    #[test]
    fn plan_json_round_trips() {
        let plan = Plan::Split(SplitPlan {
            corpus: "c.jsonl".into(),
            seed: 3,
            cue_range: (2, 6),
            test_fraction: 0.25,
            out: "split".into(),
        });
        let v = serde_json::to_value(&plan).unwrap();
        assert_eq!(v["command"], "split");
        assert_eq!(serde_json::from_value::<Plan>(v).unwrap(), plan);
    }
}
