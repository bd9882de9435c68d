//! Dataset validation and the token-relevance heatmap.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, QaPair};
use crate::error::{Error, Result};
use crate::tokenizer::tokenize;

pub const MAX_REPORTED_VIOLATIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Qa,
    Candidates,
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(Schema::Qa),
            "candidates" => Ok(Schema::Candidates),
            _ => Err(Error::InvalidInput(format!("unknown schema {s:?}, expected qa or candidates"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: usize,
    pub invalid: usize,
    /// The first few violations in file order.
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.invalid == 0
    }
}

fn check_line(line: &str, schema: Schema) -> std::result::Result<(), String> {
    match schema {
        Schema::Qa => {
            let qa: QaPair = serde_json::from_str(line).map_err(|e| e.to_string())?;
            if qa.document.is_empty() {
                return Err("document is empty".into());
            }
        }
        Schema::Candidates => {
            let set: CandidateSet = serde_json::from_str(line).map_err(|e| e.to_string())?;
            if set.candidates.is_empty() {
                return Err("candidates is empty".into());
            }
        }
    }
    Ok(())
}

/// Checks every non-blank line against the schema. Blank lines are skipped,
/// as the readers skip them.
pub fn validate_dataset(path: impl AsRef<Path>, schema: Schema) -> Result<ValidationReport> {
    let reader = BufReader::new(File::open(path)?);
    let mut report = ValidationReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match check_line(&line, schema) {
            Ok(()) => report.valid += 1,
            Err(message) => {
                report.invalid += 1;
                if report.violations.len() < MAX_REPORTED_VIOLATIONS {
                    report.violations.push(Violation { line: i + 1, message });
                }
            }
        }
    }
    if schema == Schema::Candidates && report.valid > 0 {
        report.warnings.push("the positive-first ordering of candidates cannot be checked from the file alone".into());
    }
    Ok(report)
}

/// Scores scaled so the maximum maps to 100; all zeros stay zero.
pub fn heatmap_intensities(scores: &[f64]) -> Result<Vec<f64>> {
    if let Some(s) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::InvalidInput(format!("heatmap scores must be finite and non-negative, got {s}")));
    }
    let max = scores.iter().copied().fold(0.0, f64::max);
    Ok(scores.iter().map(|s| if max > 0.0 { s / max * 100.0 } else { 0.0 }).collect())
}

fn escape(c: char, out: &mut String) {
    match c {
        '<' => out.push_str("&lt;"),
        '>' => out.push_str("&gt;"),
        '&' => out.push_str("&amp;"),
        '"' => out.push_str("&quot;"),
        '\'' => out.push_str("&#39;"),
        _ => out.push(c),
    }
}

/// Self-contained HTML with one span per character. A multi-byte character
/// takes the largest intensity among its byte tokens.
pub fn render_heatmap(document: &str, token_scores: &[f64], instruction: &str) -> Result<String> {
    let n = tokenize(document).len();
    if token_scores.len() != n {
        return Err(Error::InvalidInput(format!("{} scores for {} document tokens", token_scores.len(), n)));
    }
    let intensity = heatmap_intensities(token_scores)?;
    let mut html = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>token relevance</title>\n<style>\n\
         body{font-family:monospace;max-width:60em;margin:2em auto;line-height:1.8}\n\
         figcaption{font-weight:bold;margin-bottom:1em}\n\
         span.t{white-space:pre-wrap}\n</style>\n</head>\n<body>\n<figure>\n<figcaption>",
    );
    for c in instruction.chars() {
        escape(c, &mut html);
    }
    html.push_str("</figcaption>\n<div>");
    let mut byte = 0;
    for c in document.chars() {
        let len = c.len_utf8();
        let v = intensity[byte..byte + len].iter().copied().fold(0.0, f64::max);
        let _ = write!(html, "<span class=\"t\" data-score=\"{v:.1}\" style=\"background:rgba(214,39,40,{:.3})\">", v / 100.0);
        escape(c, &mut html);
        html.push_str("</span>");
        byte += len;
    }
    html.push_str("</div>\n</figure>\n</body>\n</html>\n");
    Ok(html)
}

pub fn emit_heatmap(document: &str, token_scores: &[f64], instruction: &str, out: impl AsRef<Path>) -> Result<()> {
    fs::write(out, render_heatmap(document, token_scores, instruction)?)?;
    Ok(())
}
