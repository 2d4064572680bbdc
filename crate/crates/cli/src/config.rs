// SPDX-License-Identifier: MIT OR Apache-2.0

//! TOML pipeline configuration. Command-line flags override file values.

use std::path::Path;

use cuetrace::corpus::{MAX_CUES, MIN_CUES};
use cuetrace::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "CUETRACE_SEED";
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub generate: GenerateSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub n: usize,
    pub cue_range: (usize, usize),
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { n: 2000, cue_range: (MIN_CUES, MAX_CUES) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub test_fraction: f64,
    pub cue_range: (usize, usize),
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { test_fraction: 0.2, cue_range: (MIN_CUES, MAX_CUES) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Raised to the longest training sequence when smaller.
    pub max_len: usize,
    pub tied_head: bool,
    pub min_frequency: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { n_layers: 4, n_heads: 4, d_model: 64, d_ff: 128, max_len: 96, tied_head: true, min_frequency: 2 }
    }
}

/// Pre-training and fine-tuning differ only in their default epoch counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PretrainSection(pub TrainConfig);

impl Default for PretrainSection {
    fn default() -> Self {
        Self(TrainConfig { epochs: 16, ..TrainConfig::default() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FinetuneSection(pub TrainConfig);

impl Default for FinetuneSection {
    fn default() -> Self {
        Self(TrainConfig { epochs: 10, ..TrainConfig::default() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Examples that get per-example score tables and heatmaps.
    pub heatmaps: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { heatmaps: 5 }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    /// Flag, then config file, then `CUETRACE_SEED`, then the default.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an integer"))),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }
}

/// Parse `lo..hi` or `lo..=hi` (both inclusive).
pub fn parse_cue_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once("..=")
        .or_else(|| s.split_once(".."))
        .or_else(|| s.split_once('-'))
        .ok_or_else(|| format!("expected LO..HI, got {s:?}"))?;
    let lo: usize = lo.trim().parse().map_err(|_| format!("bad lower bound in {s:?}"))?;
    let hi: usize = hi.trim().parse().map_err(|_| format!("bad upper bound in {s:?}"))?;
    if lo > hi || lo < MIN_CUES || hi > MAX_CUES {
        return Err(format!("cue range must lie within {MIN_CUES}..{MAX_CUES}, got {s:?}"));
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cue_range_forms() {
        assert_eq!(parse_cue_range("2..6").unwrap(), (2, 6));
        assert_eq!(parse_cue_range("3..=4").unwrap(), (3, 4));
        assert!(parse_cue_range("1..6").is_err());
        assert!(parse_cue_range("5..3").is_err());
        assert!(parse_cue_range("x").is_err());
    }

    #[test]
    fn toml_sections_fill_defaults() {
        let cfg: PipelineConfig = toml::from_str("seed = 7\n[model]\nn_layers = 2\n[finetune]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.model.n_layers, 2);
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.finetune.0.epochs, 3);
        assert_eq!(cfg.finetune.0.learning_rate, 1e-3);
        assert!(toml::from_str::<PipelineConfig>("[model]\nwidth = 3\n").is_err());
    }

    #[test]
    fn default_epochs() {
        let cfg = PipelineConfig::default();
        assert_eq!((cfg.pretrain.0.epochs, cfg.finetune.0.epochs), (16, 10));
    }
}
