//! Answer and retrieval scoring.
//!
//! - [`f1`]: token-overlap F1 after extractive-QA normalization
//! - [`recall`]: gold dialogue-id coverage by retained evidence chunks
//! - [`chunk_distance_profile`]: how far false retrievals sit from gold
//! - [`aggregate`]: per-category and cost tables over an eval run

mod distance;
mod report;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

pub use distance::{chunk_distance_profile, DistanceBucket, DistanceProfile, BUCKET_LABELS};
pub use report::{aggregate, AggregateError, CategoryStats, EvalReport, ItemOutcome, ItemRow, TokenStats, REPORT_FORMAT, REPORT_VERSION};

use crate::corpus::MemoryStore;

/// Lowercases, drops punctuation and the articles a/an/the, and splits on
/// whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c))
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '‘' | '’' | '“' | '”' | '–' | '—' | '…' | '¿' | '¡' | '«' | '»')
}

/// Bag-of-tokens F1 between a prediction and a gold answer.
pub fn f1(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Normalized exact match.
pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}

#[derive(Debug, Error, PartialEq)]
pub enum RecallError {
    #[error("no gold evidence given")]
    NoGold,
    #[error("gold dia_ids not in store: {0:?}")]
    UnknownGold(Vec<String>),
}

/// Fraction of gold dialogue ids contained in some evidence chunk.
pub fn recall(evidence: &[usize], gold_dia_ids: &[String], store: &MemoryStore) -> Result<f64, RecallError> {
    if gold_dia_ids.is_empty() {
        return Err(RecallError::NoGold);
    }
    let unknown: Vec<String> = gold_dia_ids
        .iter()
        .filter(|g| store.chunk_of(g).is_none())
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(RecallError::UnknownGold(unknown));
    }
    let covered = gold_dia_ids
        .iter()
        .filter(|g| {
            evidence
                .iter()
                .filter_map(|&c| store.chunk(c))
                .any(|chunk| chunk.utterance_ids.iter().any(|u| u == *g))
        })
        .count();
    Ok(covered as f64 / gold_dia_ids.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SingleHop,
    MultiHop,
    Temporal,
    OpenDomain,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::SingleHop,
        Category::MultiHop,
        Category::Temporal,
        Category::OpenDomain,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::SingleHop => "single_hop",
            Category::MultiHop => "multi_hop",
            Category::Temporal => "temporal",
            Category::OpenDomain => "open_domain",
            Category::Other => "other",
        }
    }

    /// Accepts snake, kebab and spaced spellings plus the numeric codes of
    /// LoCoMo dumps (1 multi-hop, 2 temporal, 3 open-domain, 4 single-hop,
    /// 5 adversarial).
    pub fn parse(text: &str) -> Option<Self> {
        let key: String = text
            .trim()
            .to_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        Some(match key.as_str() {
            "singlehop" | "single" | "4" => Category::SingleHop,
            "multihop" | "multi" | "1" => Category::MultiHop,
            "temporal" | "temporalreasoning" | "2" => Category::Temporal,
            "opendomain" | "open" | "3" => Category::OpenDomain,
            "other" | "adversarial" | "5" => Category::Other,
            _ => return None,
        })
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        let text = match &v {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(serde::de::Error::custom(format!("invalid category {other}"))),
        };
        Category::parse(&text).ok_or_else(|| serde::de::Error::custom(format!("unknown category {text:?}")))
    }
}

fn answer_text<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        serde_json::Value::Bool(b) => Ok(b.to_string()),
        other => Err(serde::de::Error::custom(format!("invalid answer {other}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub query_id: String,
    pub question: String,
    #[serde(alias = "answer", deserialize_with = "answer_text")]
    pub gold_answer: String,
    pub category: Category,
    #[serde(default, alias = "evidence")]
    pub evidence_dia_ids: Vec<String>,
}
