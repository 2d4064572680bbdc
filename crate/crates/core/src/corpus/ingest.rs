// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;

use crate::error::{Error, Result};

static TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<[^<>]*>").expect("valid regex"));
static SPACE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s+").expect("valid regex"));

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub texts: Vec<String>,
    /// Lines skipped because they were malformed JSON or lacked a text field.
    pub warnings: usize,
}

/// Removes HTML tags and collapses runs of whitespace.
pub fn strip_html(text: &str) -> String {
    let no_tags = TAG.replace_all(text, " ");
    SPACE.replace_all(no_tags.trim(), " ").into_owned()
}

/// Reads one biography per line. Lines starting with `{` are parsed as JSON
/// objects with a `text` (or WikiBio-style `target_text`) field; anything
/// else is taken verbatim.
pub fn ingest_wikibio(path: &Path) -> Result<IngestReport> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut report = IngestReport::default();
    for line in content.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let raw = if line.starts_with('{') {
            let text = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| {
                    v.get("text")
                        .or_else(|| v.get("target_text"))
                        .and_then(|t| t.as_str().map(str::to_string))
                });
            match text {
                Some(t) => t,
                None => {
                    report.warnings += 1;
                    continue;
                }
            }
        } else {
            line.to_string()
        };
        let cleaned = strip_html(&raw);
        if !cleaned.is_empty() {
            report.texts.push(cleaned);
        }
    }
    if report.warnings > 0 {
        log::warn!("{}: skipped {} malformed lines", path.display(), report.warnings);
    }
    Ok(report)
}
