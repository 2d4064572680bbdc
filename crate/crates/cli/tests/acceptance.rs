// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p cuetrace-cli --test acceptance`.

mod oracle;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cuetrace::attribution::{self, Method};
use cuetrace::corpus::{
    annotate, balance_and_split, corrupt, generate_corpus, model_input, AnnotatedExample, BalanceConfig,
    GeneratorConfig,
};
use cuetrace::model::{LossTarget, Mode, Model, ModelConfig};
use cuetrace::patching::{build_cache, PatchContext};
use cuetrace::pipeline::{self, Resources};
use cuetrace::report::AggregateProfile;
use cuetrace::tokenizer::MASK;
use cuetrace::training::{PronounSet, DEFAULT_RESTRICTED};
use cuetrace::{Rng, Vocab};
use cuetrace_cli::stages::{evaluate_stored, StoredModel};
use cuetrace_cli::RunManifest;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    check(
        elapsed.as_secs_f64() < limit_s,
        format!("{what} took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn core(e: cuetrace::Error) -> String {
    e.to_string()
}

struct Fixture {
    res: Resources,
    examples: Vec<AnnotatedExample>,
    vocab: Vocab,
}

fn fixture(n: usize, seed: u64) -> Fixture {
    let res = Resources::default();
    let examples = generate_corpus(&mut Rng::new(seed), n, &GeneratorConfig::default(), &res.lexicon);
    let vocab = pipeline::workbench_vocab(&examples, &res, 1).expect("vocab");
    Fixture { res, examples, vocab }
}

fn small_model(mode: Mode, layers: usize, d: usize, vocab: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(mode, layers, 4.min(d / 4), d, vocab);
    cfg.max_len = 96;
    Model::new(cfg, &mut Rng::new(seed)).expect("model")
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let fx = fixture(20, 11);
    let mut worst: f64 = 0.0;
    for mode in [Mode::Encoder, Mode::Decoder] {
        let model = small_model(mode, 2, 32, fx.vocab.len(), 5);
        for ex in &fx.examples {
            let input = model_input(ex, &fx.vocab, mode).map_err(core)?;
            let t = input.target_pos;
            let hooked = attribution::value_zeroing(&model, &input.tokens, t).map_err(core)?;
            let (raw, norm) = oracle::value_zeroing(&model, &input.tokens, t);
            for l in 0..raw.len() {
                for j in 0..raw[l].len() {
                    worst = worst.max((hooked.raw.get(l, j) - raw[l][j]).abs());
                    worst = worst.max((hooked.scores.get(l, j) - norm[l][j]).abs());
                }
            }
        }
    }
    check(worst <= 1e-6, format!("max |hook - oracle| = {worst:.3e} > 1e-6"))?;
    within(start.elapsed(), 10.0, "criterion 1")?;
    Ok(format!("max |hook - oracle| = {worst:.2e} over 2 modes x 20 examples ({:.1}s)", start.elapsed().as_secs_f64()))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let fx = fixture(100, 12);
    let restricted = PronounSet::new(&DEFAULT_RESTRICTED, &fx.vocab, &fx.res.lexicon).map_err(core)?;
    let methods = [Method::ValueZeroing, Method::Attention, Method::Rollout, Method::AttentionNorm];
    let (mut worst, mut rows) = (0.0f64, 0usize);
    let mut worst_patch = 0.0f64;
    for mode in [Mode::Encoder, Mode::Decoder] {
        let model = small_model(mode, 2, 32, fx.vocab.len(), 6);
        for (i, ex) in fx.examples.iter().enumerate() {
            for m in methods {
                let a = pipeline::analyze_example(&model, &fx.vocab, &fx.res, &restricted, ex, &i.to_string(), m)
                    .map_err(core)?;
                for s in [&a.token_scores, &a.word_scores] {
                    for l in 0..s.n_layers() {
                        worst = worst.max((s.row(l).iter().sum::<f64>() - 1.0).abs());
                        rows += 1;
                    }
                }
            }
            let input = model_input(ex, &fx.vocab, mode).map_err(core)?;
            let ctx = PatchContext::new(&model, &input.tokens, input.target_pos, &[input.target_id]).map_err(core)?;
            let cache = build_cache(&model, &input.tokens, &input.tokens).map_err(core)?;
            let sweep = ctx.sweep(&model, &cache).map_err(core)?;
            worst_patch = sweep.scores.scores.data().iter().fold(worst_patch, |w, v| w.max(v.abs()));
        }
    }
    check(worst <= 1e-6, format!("row sum off by {worst:.3e}"))?;
    check(worst_patch < 1e-12, format!("self-patch score {worst_patch:.3e}"))?;
    within(start.elapsed(), 60.0, "criterion 2")?;
    Ok(format!(
        "{rows} rows, max |sum - 1| = {worst:.2e}; max self-patch |score| = {worst_patch:.1e} ({:.1}s)",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let fx = fixture(20, 13);
    let mut patches = 0usize;
    for mode in [Mode::Encoder, Mode::Decoder] {
        let model = small_model(mode, 2, 32, fx.vocab.len(), 7);
        for ex in &fx.examples {
            let input = model_input(ex, &fx.vocab, mode).map_err(core)?;
            let bad = corrupt(ex, &fx.res.lexicon, &fx.res.names, &fx.vocab).map_err(core)?;
            let c_input = model_input(&bad, &fx.vocab, mode).map_err(core)?;
            let ctx = PatchContext::new(&model, &input.tokens, input.target_pos, &[input.target_id]).map_err(core)?;
            let cache = build_cache(&model, &input.tokens, &c_input.tokens).map_err(core)?;
            for l in 0..model.config.n_layers {
                for j in 0..input.tokens.len() {
                    let (_, trace) = ctx.patch_traced(&model, &cache, l, j, true).map_err(core)?;
                    let trace = trace.expect("recorded");
                    for (layer, (a, b)) in trace.attention.iter().zip(&ctx.trace.attention).enumerate() {
                        for (h, (pa, pb)) in a.iter().zip(b).enumerate() {
                            let same = pa.data().iter().zip(pb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                            check(same, format!("patch ({l},{j}) changed attention at layer {layer} head {h}"))?;
                        }
                    }
                    patches += 1;
                }
            }
        }
    }
    within(start.elapsed(), 60.0, "criterion 3")?;
    Ok(format!("{patches} patched runs bitwise equal to clean attention ({:.1}s)", start.elapsed().as_secs_f64()))
}

fn criterion_4() -> Outcome {
    let fx = fixture(50, 14);
    let model = small_model(Mode::Decoder, 2, 32, fx.vocab.len(), 8);
    let mut checked = 0usize;
    for ex in &fx.examples {
        // Full sequences, so positions after the target exist.
        let (tokens, spans) = fx.vocab.encode_words(&ex.words);
        let t = spans[ex.target].first_token;
        let bad = corrupt(ex, &fx.res.lexicon, &fx.res.names, &fx.vocab).map_err(core)?;
        let (c_tokens, _) = fx.vocab.encode_words(&bad.words);
        let target_id = tokens[t];

        let vz = attribution::value_zeroing(&model, &tokens, t).map_err(core)?;
        let ctx = PatchContext::new(&model, &tokens, t, &[target_id]).map_err(core)?;
        let cache = build_cache(&model, &tokens, &c_tokens).map_err(core)?;
        let sweep = ctx.sweep(&model, &cache).map_err(core)?;
        for l in 0..model.config.n_layers {
            for j in t + 1..tokens.len() {
                check(vz.raw.get(l, j) == 0.0 && vz.scores.get(l, j) == 0.0, format!("value zeroing nonzero at ({l},{j})"))?;
                check(sweep.get(l, j) == 0.0, format!("patch score nonzero at ({l},{j})"))?;
                checked += 1;
            }
        }
    }
    check(checked > 0, "no position after a target was checked")?;
    Ok(format!("{checked} (layer, later position) cells exactly 0 for both methods"))
}

fn criterion_5() -> Outcome {
    let fx = fixture(4, 15);
    let h = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut tensors = 0usize;
    let mut zero = Vec::new();
    for mode in [Mode::Encoder, Mode::Decoder] {
        let mut cfg = ModelConfig::new(mode, 2, 2, 16, fx.vocab.len());
        cfg.tied_head = mode == Mode::Decoder;
        let mut model = Model::new(cfg, &mut Rng::new(9)).map_err(core)?;
        let mut rng = Rng::new(10);
        let batch: Vec<(Vec<u32>, Vec<LossTarget>)> = fx
            .examples
            .iter()
            .map(|ex| {
                let (mut tokens, _) = fx.vocab.encode_words(&ex.words);
                let targets = match mode {
                    Mode::Decoder => (0..tokens.len() - 1).map(|p| LossTarget::full(p, tokens[p + 1])).collect(),
                    Mode::Encoder => {
                        let mut ts = Vec::new();
                        for p in 0..tokens.len() {
                            if rng.bernoulli(0.3) || p == 1 {
                                ts.push(LossTarget::full(p, tokens[p]));
                                tokens[p] = MASK;
                            }
                        }
                        ts
                    }
                };
                (tokens, targets)
            })
            .collect();
        let w = 1.0 / batch.len() as f64;
        let batch_loss = |m: &Model| -> f64 { batch.iter().map(|(t, tg)| m.loss(t, tg, w).expect("loss")).sum() };
        let mut grad = cuetrace::model::Weights::zeros(&model.config);
        for (t, tg) in &batch {
            let (_, g) = model.loss_and_grad(t, tg, w, None).map_err(core)?;
            grad.add_scaled(&g, 1.0);
        }
        let names: Vec<String> = model.weights.tensors().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, m)| m.data().to_vec()).collect();
        for (ti, name) in names.iter().enumerate() {
            let n = analytic[ti].len();
            let mut numeric = vec![0.0; n];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = model.weights.tensors_mut()[ti].data()[i];
                model.weights.tensors_mut()[ti].data_mut()[i] = orig + h;
                let up = batch_loss(&model);
                model.weights.tensors_mut()[ti].data_mut()[i] = orig - h;
                let down = batch_loss(&model);
                model.weights.tensors_mut()[ti].data_mut()[i] = orig;
                *slot = (up - down) / (2.0 * h);
            }
            let diff = analytic[ti].iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = oracle::norm(&analytic[ti]).max(oracle::norm(&numeric));
            tensors += 1;
            // Key biases shift every logit of a softmax row equally, so their
            // true gradient is exactly zero and a ratio is meaningless.
            if scale < 1e-8 {
                check(diff < 1e-8, format!("{} {name}: zero-gradient tensor differs by {diff:.3e}", mode.as_str()))?;
                zero.push(format!("{}:{name}", mode.as_str()));
                continue;
            }
            let rel = diff / scale;
            if rel >= worst.0 {
                worst = (rel, format!("{} {name}", mode.as_str()));
            }
        }
    }
    check(worst.0 < 1e-4, format!("relative error {:.3e} on {}", worst.0, worst.1))?;
    Ok(format!(
        "{tensors} tensors, worst relative error {:.2e} ({}); exactly-zero gradients agree with FD: {}",
        worst.0,
        worst.1,
        zero.join(", ")
    ))
}

fn criterion_6() -> Outcome {
    let sizes = [(2usize, 2480usize), (3, 1439), (4, 921), (5, 638), (6, 505)];
    let res = Resources::default();
    let mut rng = Rng::new(16);
    let mut pool = Vec::new();
    for (k, n) in sizes {
        pool.extend(generate_corpus(&mut rng, n, &GeneratorConfig { cue_range: (k, k) }, &res.lexicon));
    }
    let hist = cuetrace::corpus::DatasetSplit::histogram_of(&pool);
    check(hist == sizes.iter().copied().collect::<BTreeMap<_, _>>(), format!("input groups {hist:?}"))?;
    let cfg = BalanceConfig::default();
    let a = balance_and_split(pool.clone(), &mut Rng::new(17), &cfg).map_err(core)?;
    let b = balance_and_split(pool, &mut Rng::new(17), &cfg).map_err(core)?;
    for (k, &n) in &a.histogram {
        check(n == 505, format!("group {k} has {n} examples"))?;
    }
    let combined = |s: &cuetrace::corpus::DatasetSplit| {
        let mut h = cuetrace::corpus::DatasetSplit::histogram_of(&s.train);
        for (k, n) in cuetrace::corpus::DatasetSplit::histogram_of(&s.test) {
            *h.entry(k).or_default() += n;
        }
        h
    };
    check(combined(&a).values().all(|&n| n == 505), "train + test per group != 505")?;
    check(a == b, "split differs under the same seed")?;
    Ok(format!("groups {:?}, train {} / test {}, identical under seed", a.histogram, a.train.len(), a.test.len()))
}

fn criterion_7() -> Outcome {
    let res = Resources::default();
    let clean = "Ron Masak is an American actor. He began as a stage performer, and much of his work is in theater.";
    let want = "amy willinsky is an american actress . she began as a stage performer , and much of her work is in theater .";
    let ex = annotate(clean, &res.lexicon).map_err(|r| format!("annotation rejected: {r:?}"))?;
    let mut corpus = generate_corpus(&mut Rng::new(42), 2000, &GeneratorConfig::default(), &res.lexicon);
    corpus.push(ex.clone());
    let vocab = pipeline::workbench_vocab(&corpus, &res, 2).map_err(core)?;
    let bad = corrupt(&ex, &res.lexicon, &res.names, &vocab).map_err(core)?;
    check(bad.words.join(" ") == want, format!("got {:?}", bad.words.join(" ")))?;
    let (a, sa) = vocab.encode_words(&ex.words);
    let (b, sb) = vocab.encode_words(&bad.words);
    check(a.len() == b.len(), format!("token counts {} vs {}", a.len(), b.len()))?;
    let per_word = sa.iter().zip(&sb).all(|(x, y)| x.tokens().len() == y.tokens().len());
    check(per_word, "a word changed its token count")?;
    Ok(format!("{:?} ({} tokens each)", bad.words.join(" "), a.len()))
}

fn cli(wd: &Path, args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["cuetrace".to_string(), "--workdir".into(), wd.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    cuetrace_cli::run_args(argv).map_err(|e| format!("cuetrace {}: {e}", args.join(" ")))
}

const SANITY_CONFIG: &str = r#"seed = 42

[generate]
n = 2000

[model]
n_layers = 4
n_heads = 4
d_model = 64
d_ff = 128
max_len = 96

[pretrain]
epochs = 16

[finetune]
epochs = 10
"#;

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let wd = dir.path();
    std::fs::write(wd.join("sanity.toml"), SANITY_CONFIG).map_err(|e| e.to_string())?;
    let c = ["--config", "sanity.toml"];
    let with = |rest: &[&str]| -> Vec<String> { c.iter().chain(rest).map(|s| s.to_string()).collect() };
    let run = |rest: &[&str]| -> Result<(), String> {
        let args = with(rest);
        cli(wd, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    run(&["gen", "--out", "corpus.jsonl"])?;
    run(&["split", "--corpus", "corpus.jsonl", "--out", "split"])?;
    let res = Resources::default();
    let test = cuetrace::corpus::read_jsonl(&wd.join("split/test.jsonl")).map_err(core)?;
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    for mode in ["encoder", "decoder"] {
        run(&["train", "--mode", mode, "--corpus", "split/train.jsonl", "--out", &format!("{mode}/pre")])?;
        run(&["finetune", "--from", &format!("{mode}/pre"), "--corpus", "split/train.jsonl", "--out", &format!("{mode}/ft")])?;
        run(&[
            "analyze", "--method", "value-zeroing", "--model", &format!("{mode}/ft"), "--split", "split/test.jsonl",
            "--out", &format!("{mode}/run"),
        ])?;
        run(&["report", "--run", &format!("{mode}/run"), "--out", &format!("{mode}/results")])?;

        let stored = StoredModel::load(&wd.join(format!("{mode}/ft"))).map_err(|e| e.to_string())?;
        let eval = evaluate_stored(&stored, &res, &test, cuetrace::training::PredictionRule::Restricted)
            .map_err(|e| e.to_string())?;
        let flips = eval.flips.expect("restricted rule reports flips");
        let flip_rate = flips.corrupted_flips as f64 / flips.correct.max(1) as f64;
        if eval.accuracy < 0.90 {
            failures.push(format!("(a) {mode} accuracy {:.3} < 0.90", eval.accuracy));
        }
        if flips.correct == 0 || flip_rate < 0.90 {
            failures.push(format!("(b) {mode} flip rate {flip_rate:.3} < 0.90"));
        }
        let mut dominance = Vec::new();
        for k in 2..=6 {
            let path = wd.join(format!("{mode}/results/value-zeroing/{k}.csv"));
            let agg = AggregateProfile::load_csv(&path).map_err(core)?;
            let last = agg.n_layers() - 1;
            let cues: Vec<f64> = (0..k).map(|i| agg.mean.get(last, i)).collect();
            let cue_mean = cues.iter().sum::<f64>() / k as f64;
            let others = agg.mean.get(last, k);
            if cue_mean <= others {
                failures.push(format!("(c) {mode} k={k}: cue mean {cue_mean:.4} <= Others {others:.4}"));
            }
            let top = (0..k).max_by(|&a, &b| cues[a].total_cmp(&cues[b])).unwrap_or(0);
            dominance.push(format!("k{k}:cue{}", top + 1));
        }
        notes.push(format!(
            "{mode}: acc {:.3}, flips {}/{}, final-layer top cue [{}]",
            eval.accuracy,
            flips.corrupted_flips,
            flips.correct,
            dominance.join(" ")
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    notes.push(format!("{elapsed:.0}s"));
    if elapsed >= 15.0 * 60.0 {
        failures.push(format!("runtime {elapsed:.0}s exceeds 15 minutes"));
    }
    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(format!("{} | {}", failures.join("; "), notes.join("; ")))
    }
}

const TINY_CONFIG: &str = r#"seed = 5

[model]
n_layers = 2
n_heads = 2
d_model = 16
d_ff = 32

[pretrain]
epochs = 1

[finetune]
epochs = 2
"#;

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir").flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                // Manifests carry timings, so they are the one output allowed to differ.
                if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| !n.ends_with("manifest.json")) {
                    out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).expect("readable"));
                }
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let wd = dir.path();
    std::fs::write(wd.join("tiny.toml"), TINY_CONFIG).map_err(|e| e.to_string())?;
    let steps: [&[&str]; 8] = [
        &["--config", "tiny.toml", "gen", "--n", "200", "--out", "data/corpus.jsonl"],
        &["--config", "tiny.toml", "split", "--corpus", "data/corpus.jsonl", "--out", "data/split"],
        &["--config", "tiny.toml", "train", "--mode", "decoder", "--corpus", "data/split/train.jsonl", "--out", "m/pre"],
        &["--config", "tiny.toml", "finetune", "--from", "m/pre", "--corpus", "data/split/train.jsonl", "--out", "m/ft"],
        &["analyze", "--method", "value-zeroing", "--model", "m/ft", "--split", "data/split/test.jsonl", "--out", "run"],
        &["analyze", "--method", "value-patching", "--model", "m/ft", "--split", "data/split/test.jsonl", "--out", "run"],
        &["analyze", "--method", "rollout", "--model", "m/ft", "--split", "data/split/test.jsonl", "--out", "run"],
        &["report", "--run", "run", "--out", "results"],
    ];
    for s in steps {
        cli(wd, s)?;
    }
    // (manifest, original output, replay output, compared subtree)
    let replays = [
        ("data/corpus.jsonl.manifest.json", "data/corpus.jsonl", "replay/corpus.jsonl", None),
        ("data/split/manifest.json", "data/split", "replay/split", None),
        ("m/pre/manifest.json", "m/pre", "replay/pre", None),
        ("m/ft/manifest.json", "m/ft", "replay/ft", None),
        ("run/value-zeroing/manifest.json", "run", "replay/run-vz", Some("value-zeroing")),
        ("run/value-patching/manifest.json", "run", "replay/run-vp", Some("value-patching")),
        ("results/manifest.json", "results", "replay/results", None),
    ];
    let mut compared = 0usize;
    let mut tables = 0usize;
    for (manifest, original, replayed, sub) in replays {
        let m = RunManifest::load(&wd.join(manifest)).map_err(|e| e.to_string())?;
        cli(wd, &["replay", "--manifest", manifest, "--out", replayed])?;
        let (a, b) = (wd.join(original), wd.join(replayed));
        if a.is_file() {
            check(std::fs::read(&a).ok() == std::fs::read(&b).ok(), format!("{} replay differs", m.command))?;
            compared += 1;
            continue;
        }
        let keep = |t: BTreeMap<PathBuf, Vec<u8>>| -> BTreeMap<PathBuf, Vec<u8>> {
            t.into_iter()
                .filter(|(p, _)| match sub {
                    Some(method) => {
                        p.starts_with(method) || p.to_string_lossy().contains(&format!(".{method}."))
                    }
                    None => true,
                })
                .collect()
        };
        let (ta, tb) = (keep(tree(&a)), keep(tree(&b)));
        check(!ta.is_empty(), format!("{} produced no outputs", m.command))?;
        check(ta.keys().eq(tb.keys()), format!("{} replay wrote different files", m.command))?;
        for (p, bytes) in &ta {
            check(tb.get(p) == Some(bytes), format!("{} replay differs in {}", m.command, p.display()))?;
        }
        compared += ta.len();
        tables += ta.keys().filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "svg"))).count();
    }
    check(tables > 0, "no CSV/SVG outputs were compared")?;
    Ok(format!("{compared} outputs ({tables} CSV/SVG) byte-identical across 7 replayed stages"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("value zeroing matches re-forward oracle", criterion_1),
        ("normalization and self-patch zero", criterion_2),
        ("attention invariant under patching", criterion_3),
        ("decoder causality", criterion_4),
        ("gradient check", criterion_5),
        ("balancing fidelity", criterion_6),
        ("corruption fidelity", criterion_7),
        ("end-to-end sanity experiment", criterion_8),
        ("replay determinism", criterion_9),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        match f() {
            Ok(detail) => println!("criterion {n} PASS: {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL: {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
