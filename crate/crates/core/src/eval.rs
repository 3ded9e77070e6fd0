//! Relaxed-accuracy scoring of chart QA predictions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::Answer;

pub const DEFAULT_MARGINS: [f64; 3] = [0.05, 0.10, 0.20];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no gold entry for sample {0:?}")]
    MissingGold(String),
    #[error("duplicate sample_id {0:?}")]
    Duplicate(String),
    #[error("invalid margin {0}")]
    Margin(f64),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no answer candidate in reply")]
pub struct ExtractionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractMode {
    Direct,
    Match,
}

impl FromStr for ExtractMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(ExtractMode::Direct),
            "match" => Ok(ExtractMode::Match),
            _ => Err(format!("unknown extraction mode {s:?} (expected direct or match)")),
        }
    }
}

fn box_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\box(?:ed)?\{([^{}]*)\}").expect("static regex"))
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[-+]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?\s?%?").expect("static regex")
    })
}

/// Pull the final answer out of a model reply.
pub fn extract_answer(raw: &str, mode: ExtractMode) -> Result<Answer, ExtractionError> {
    let candidate = match mode {
        ExtractMode::Direct => raw.trim(),
        ExtractMode::Match => match box_re().captures_iter(raw).last() {
            Some(c) => c.get(1).expect("group").as_str().trim(),
            None => number_re().find_iter(raw).last().ok_or(ExtractionError)?.as_str().trim(),
        },
    };
    if candidate.is_empty() {
        return Err(ExtractionError);
    }
    Ok(Answer::from_text(candidate))
}

fn normalize_text(s: &str, lenient: bool) -> String {
    let lower = s.trim().to_lowercase();
    if !lenient {
        return lower;
    }
    let trimmed = lower.trim_end_matches('.').trim();
    trimmed
        .split_whitespace()
        .filter(|w| *w != "the")
        .collect::<Vec<_>>()
        .join(" ")
}

/// Relaxed comparison; `lenient` drops trailing periods and the article "the" from text.
pub fn relaxed_match(pred: &Answer, gt: &Answer, margin: f64, lenient: bool) -> bool {
    match (pred, gt) {
        (Answer::Number { value: p, .. }, Answer::Number { value: g, .. }) => {
            if *g == 0.0 {
                *p == 0.0
            } else {
                (p - g).abs() <= margin * g.abs()
            }
        }
        (Answer::Text(p), Answer::Text(g)) => normalize_text(p, lenient) == normalize_text(g, lenient),
        _ => {
            log::debug!("type mismatch: prediction {pred} vs gold {gt}");
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldEntry {
    pub sample_id: String,
    pub answer: Answer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Gold,
    Prediction,
    None,
}

impl FromStr for GroupBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gold" => Ok(GroupBy::Gold),
            "prediction" | "pred" => Ok(GroupBy::Prediction),
            "none" => Ok(GroupBy::None),
            _ => Err(format!("unknown grouping {s:?} (expected gold, pred or none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub mode: ExtractMode,
    pub group_by: GroupBy,
    pub lenient_text: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { mode: ExtractMode::Match, group_by: GroupBy::Gold, lenient_text: true }
    }
}

pub const UNGROUPED: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl GroupScore {
    fn new(correct: usize, total: usize) -> Self {
        Self { correct, total, accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub margin: f64,
    pub groups: BTreeMap<String, GroupScore>,
    /// Unweighted mean of the group accuracies.
    pub avg: f64,
    /// Accuracy pooled over every sample.
    pub all: GroupScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub extraction_failures: usize,
    pub rows: Vec<MarginRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table: one row per margin, one column per group, then Avg. and ALL.
    pub fn to_table(&self) -> String {
        let groups: BTreeSet<&str> = self.rows.iter().flat_map(|r| r.groups.keys().map(String::as_str)).collect();
        let mut header = vec!["margin".to_string()];
        header.extend(groups.iter().map(|g| g.to_string()));
        header.push("Avg.".into());
        header.push("ALL".into());
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        let mut rows = vec![header];
        for r in &self.rows {
            let mut row = vec![format!("@{}", r.margin)];
            row.extend(groups.iter().map(|g| r.groups.get(*g).map_or("-".into(), |s| pct(s.accuracy))));
            row.push(pct(r.avg));
            row.push(pct(r.all.accuracy));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (n, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if n == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        out
    }
}

/// Score predictions against gold answers at each margin.
pub fn evaluate(
    predictions: &[Prediction],
    gold: &[GoldEntry],
    margins: &[f64],
    options: EvalOptions,
) -> Result<EvalReport, EvalError> {
    if let Some(&m) = margins.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
        return Err(EvalError::Margin(m));
    }
    let mut by_id = BTreeMap::new();
    for g in gold {
        if by_id.insert(g.sample_id.as_str(), g).is_some() {
            return Err(EvalError::Duplicate(g.sample_id.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    for p in predictions {
        if !by_id.contains_key(p.sample_id.as_str()) {
            return Err(EvalError::MissingGold(p.sample_id.clone()));
        }
        if !seen.insert(p.sample_id.as_str()) {
            return Err(EvalError::Duplicate(p.sample_id.clone()));
        }
    }

    // (group, extraction ok, correct per margin)
    let scored: Vec<(String, bool, Vec<bool>)> = predictions
        .par_iter()
        .map(|p| {
            let g = by_id[p.sample_id.as_str()];
            let group = match options.group_by {
                GroupBy::Gold => g.group.clone(),
                GroupBy::Prediction => p.group.clone(),
                GroupBy::None => None,
            }
            .unwrap_or_else(|| UNGROUPED.to_string());
            match extract_answer(&p.raw_text, options.mode) {
                Ok(a) => {
                    let hits = margins.iter().map(|&m| relaxed_match(&a, &g.answer, m, options.lenient_text)).collect();
                    (group, true, hits)
                }
                Err(_) => (group, false, vec![false; margins.len()]),
            }
        })
        .collect();

    let rows = margins
        .iter()
        .enumerate()
        .map(|(i, &margin)| {
            let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
            for (group, _, hits) in &scored {
                let e = counts.entry(group.clone()).or_default();
                e.0 += usize::from(hits[i]);
                e.1 += 1;
            }
            let groups: BTreeMap<String, GroupScore> =
                counts.into_iter().map(|(g, (c, t))| (g, GroupScore::new(c, t))).collect();
            let avg = if groups.is_empty() {
                0.0
            } else {
                groups.values().map(|s| s.accuracy).sum::<f64>() / groups.len() as f64
            };
            let correct = scored.iter().filter(|s| s.2[i]).count();
            MarginRow { margin, groups, avg, all: GroupScore::new(correct, scored.len()) }
        })
        .collect();
    Ok(EvalReport {
        samples: scored.len(),
        extraction_failures: scored.iter().filter(|s| !s.1).count(),
        rows,
    })
}

/// Read a JSON-lines file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EvalError::Io { path: path.display().to_string(), message: e.to_string() })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn parse_margins(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|t| {
            let v: f64 = t.trim().parse().map_err(|_| format!("invalid margin {t:?}"))?;
            if v.is_finite() && v >= 0.0 {
                Ok(v)
            } else {
                Err(format!("invalid margin {t:?}"))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extraction_rules() {
        let m = ExtractMode::Match;
        assert_eq!(extract_answer(r"First, we look at the bars. \box{42}", m), Ok(Answer::number(42.0)));
        assert_eq!(extract_answer(r"\box{10} then later \box{12}", m), Ok(Answer::number(12.0)));
        assert_eq!(extract_answer("The share is 37.5%", m), Ok(Answer::percent(37.5)));
        assert_eq!(extract_answer(r"\boxed{1,250}", m), Ok(Answer::number(1250.0)));
        assert_eq!(extract_answer("Total was 1,250 units.", m), Ok(Answer::number(1250.0)));
        assert_eq!(extract_answer("no digits here", m), Err(ExtractionError));
        assert_eq!(extract_answer("  Retail ", ExtractMode::Direct), Ok(Answer::Text("Retail".into())));
        assert_eq!(extract_answer("   ", ExtractMode::Direct), Err(ExtractionError));
    }

    #[test]
    fn relaxed_rules() {
        let (p, g) = (Answer::number(100.0), Answer::number(104.0));
        assert!(relaxed_match(&p, &g, 0.05, true));
        assert!(!relaxed_match(&p, &g, 0.03, true));
        assert!(relaxed_match(&g, &g, 0.0, true));
        assert!(relaxed_match(&Answer::number(0.0), &Answer::number(0.0), 0.0, true));
        assert!(!relaxed_match(&Answer::number(0.001), &Answer::number(0.0), 0.2, true));
        assert!(relaxed_match(&Answer::Text("The Retail.".into()), &Answer::Text("retail".into()), 0.0, true));
        assert!(!relaxed_match(&Answer::Text("The Retail.".into()), &Answer::Text("retail".into()), 0.0, false));
        assert!(!relaxed_match(&Answer::Text("5".into()), &Answer::number(5.0), 0.5, true));
    }

    fn pred(id: &str, text: &str) -> Prediction {
        Prediction { sample_id: id.into(), raw_text: text.into(), group: None }
    }

    fn gold(id: &str, v: f64, group: &str) -> GoldEntry {
        GoldEntry { sample_id: id.into(), answer: Answer::number(v), group: Some(group.into()) }
    }

    #[test]
    fn avg_and_all() {
        let mut preds = Vec::new();
        let mut golds = Vec::new();
        for i in 0..10 {
            let group = if i < 4 { "human" } else { "aug" };
            let correct = if i < 4 { i < 2 } else { i < 7 };
            golds.push(gold(&format!("s{i}"), 10.0, group));
            preds.push(pred(&format!("s{i}"), if correct { r"\box{10}" } else { r"\box{50}" }));
        }
        let r = evaluate(&preds, &golds, &[0.05], EvalOptions::default()).unwrap();
        let row = &r.rows[0];
        assert_eq!(row.groups["human"].accuracy, 0.5);
        assert_eq!(row.groups["aug"].accuracy, 0.5);
        assert_eq!(row.avg, 0.5);
        assert_eq!(row.all.correct, 5);
        assert_eq!(row.all.accuracy, 0.5);
        let table = r.to_table();
        assert!(table.lines().next().unwrap().ends_with("Avg.    ALL"), "{table}");
    }

    #[test]
    fn missing_gold_and_bad_margin() {
        let golds = [gold("a", 1.0, "x")];
        assert_eq!(
            evaluate(&[pred("b", "1")], &golds, &[0.05], EvalOptions::default()),
            Err(EvalError::MissingGold("b".into()))
        );
        assert!(matches!(evaluate(&[], &golds, &[-0.1], EvalOptions::default()), Err(EvalError::Margin(_))));
        assert_eq!(parse_margins("0.05, 0.1,0.2").unwrap(), vec![0.05, 0.1, 0.2]);
        assert!(parse_margins("0.05,x").is_err());
    }

    proptest! {
        #[test]
        fn extraction_idempotent(v in -1.0e6f64..1.0e6, pct: bool) {
            let v = (v * 100.0).round() / 100.0;
            let raw = if pct { format!("so \\box{{{v}%}}") } else { format!("so \\box{{{v}}}") };
            let a = extract_answer(&raw, ExtractMode::Match).unwrap();
            let again = extract_answer(&format!("\\box{{{a}}}"), ExtractMode::Match).unwrap();
            prop_assert_eq!(a, again);
        }
    }
}
