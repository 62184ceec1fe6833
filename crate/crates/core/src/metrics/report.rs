//! Evaluation report: per-category F1, recall, steps and token cost.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{exact_match, f1, recall, Category, EvalItem, RecallError};
use crate::controller::{Answer, TerminatedBy};
use crate::corpus::MemoryStore;
use crate::llm::{AgentTag, TokenUsage, UsageTotals};

pub const REPORT_FORMAT: &str = "memloop-report";
pub const REPORT_VERSION: u32 = 1;

const RECALL_DEFINITION: &str =
    "recall = share of all gold evidence dia_ids contained in a retained evidence chunk";

/// What one eval item produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub query_id: String,
    pub answer: Option<Answer>,
    /// Iterations executed, also for failed runs.
    pub iterations: u32,
    pub token_usage: TokenUsage,
    pub error: Option<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("items and answers are misaligned; items without answers: {missing:?}, answers without items: {orphans:?}")]
    Misaligned { missing: Vec<String>, orphans: Vec<String> },
    #[error("duplicate query_id {0:?}")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub n: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub mean_per_query: f64,
    pub max_per_query: u64,
    pub total: u64,
    pub per_tag: BTreeMap<AgentTag, UsageTotals>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub query_id: String,
    pub category: Category,
    pub prediction: String,
    pub gold_answer: String,
    pub f1: f64,
    pub exact_match: bool,
    pub recall: Option<f64>,
    pub iterations: u32,
    pub terminated_by: Option<TerminatedBy>,
    pub tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub recall_definition: String,
    pub n_items: usize,
    pub n_failed: usize,
    pub overall_f1: f64,
    pub exact_match_rate: f64,
    pub per_category: BTreeMap<Category, CategoryStats>,
    pub mean_recall: Option<f64>,
    pub recall_items: usize,
    /// Items whose gold evidence names unknown dia_ids.
    pub recall_flagged: Vec<String>,
    pub mean_iterations: f64,
    pub terminated_by: BTreeMap<String, usize>,
    pub tokens: TokenStats,
    pub items: Vec<ItemRow>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores outcomes against items, matched by `query_id`. Rows follow item
/// order.
pub fn aggregate(items: &[EvalItem], outcomes: &[ItemOutcome], store: &MemoryStore) -> Result<EvalReport, AggregateError> {
    let mut by_id: BTreeMap<&str, &ItemOutcome> = BTreeMap::new();
    for o in outcomes {
        if by_id.insert(o.query_id.as_str(), o).is_some() {
            return Err(AggregateError::Duplicate(o.query_id.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    for item in items {
        if !seen.insert(item.query_id.as_str()) {
            return Err(AggregateError::Duplicate(item.query_id.clone()));
        }
    }
    let missing: Vec<String> = items
        .iter()
        .filter(|i| !by_id.contains_key(i.query_id.as_str()))
        .map(|i| i.query_id.clone())
        .collect();
    let orphans: Vec<String> = outcomes
        .iter()
        .filter(|o| !seen.contains(o.query_id.as_str()))
        .map(|o| o.query_id.clone())
        .collect();
    if !missing.is_empty() || !orphans.is_empty() {
        return Err(AggregateError::Misaligned { missing, orphans });
    }

    let mut rows = Vec::with_capacity(items.len());
    let mut recall_flagged = Vec::new();
    let mut tokens = TokenStats::default();
    let mut terminated: BTreeMap<String, usize> = BTreeMap::new();
    for item in items {
        let o = by_id[item.query_id.as_str()];
        let prediction = o.answer.as_ref().map(|a| a.text.clone()).unwrap_or_default();
        let (score, em) = match &o.answer {
            Some(_) => (f1(&prediction, &item.gold_answer), exact_match(&prediction, &item.gold_answer)),
            None => (0.0, false),
        };
        let evidence = o
            .answer
            .as_ref()
            .map(|a| a.supporting_evidence.chunks.clone())
            .unwrap_or_default();
        let item_recall = match recall(&evidence, &item.evidence_dia_ids, store) {
            Ok(r) => Some(r),
            Err(RecallError::NoGold) => None,
            Err(RecallError::UnknownGold(_)) => {
                recall_flagged.push(item.query_id.clone());
                None
            }
        };
        let total = o.token_usage.total_tokens();
        tokens.total += total;
        tokens.max_per_query = tokens.max_per_query.max(total);
        for (tag, t) in &o.token_usage.per_tag {
            let e = tokens.per_tag.entry(*tag).or_default();
            e.prompt_tokens += t.prompt_tokens;
            e.completion_tokens += t.completion_tokens;
            e.total_tokens += t.total_tokens;
            e.calls += t.calls;
        }
        let terminated_by = o.answer.as_ref().map(|a| a.terminated_by);
        let key = terminated_by.map_or("error".to_string(), |t| t.to_string());
        *terminated.entry(key).or_default() += 1;
        rows.push(ItemRow {
            query_id: item.query_id.clone(),
            category: item.category,
            prediction,
            gold_answer: item.gold_answer.clone(),
            f1: score,
            exact_match: em,
            recall: item_recall,
            iterations: o.iterations,
            terminated_by,
            tokens: total,
            error: o.error.clone(),
        });
    }

    let mut per_category = BTreeMap::new();
    for cat in Category::ALL {
        let scores: Vec<f64> = rows.iter().filter(|r| r.category == cat).map(|r| r.f1).collect();
        if let Some(m) = mean(scores.iter().copied()) {
            per_category.insert(cat, CategoryStats { n: scores.len(), f1: m });
        }
    }
    tokens.mean_per_query = mean(rows.iter().map(|r| r.tokens as f64)).unwrap_or(0.0);
    let recalls: Vec<f64> = rows.iter().filter_map(|r| r.recall).collect();
    Ok(EvalReport {
        format: REPORT_FORMAT.to_string(),
        version: REPORT_VERSION,
        recall_definition: RECALL_DEFINITION.to_string(),
        n_items: rows.len(),
        n_failed: rows.iter().filter(|r| r.error.is_some()).count(),
        overall_f1: mean(rows.iter().map(|r| r.f1)).unwrap_or(0.0),
        exact_match_rate: mean(rows.iter().map(|r| if r.exact_match { 1.0 } else { 0.0 })).unwrap_or(0.0),
        per_category,
        mean_recall: mean(recalls.iter().copied()),
        recall_items: recalls.len(),
        recall_flagged,
        mean_iterations: mean(rows.iter().map(|r| r.iterations as f64)).unwrap_or(0.0),
        terminated_by: terminated,
        tokens,
        items: rows,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<14}{:>6}{:>10}\n", "category", "n", "F1"));
        for (cat, s) in &self.per_category {
            out.push_str(&format!("{:<14}{:>6}{:>10.2}\n", cat.as_str(), s.n, s.f1 * 100.0));
        }
        out.push_str(&format!("{:<14}{:>6}{:>10.2}\n", "overall", self.n_items, self.overall_f1 * 100.0));
        out.push('\n');
        match self.mean_recall {
            Some(r) => out.push_str(&format!("recall        {:.2}% over {} items\n", r * 100.0, self.recall_items)),
            None => out.push_str("recall        n/a\n"),
        }
        out.push_str(&format!("mean steps    {:.2}\n", self.mean_iterations));
        out.push_str(&format!(
            "tokens/query  mean {:.1}, max {}\n",
            self.tokens.mean_per_query, self.tokens.max_per_query
        ));
        for (tag, t) in &self.tokens.per_tag {
            out.push_str(&format!("  {:<12}{:>10} tokens in {} calls\n", tag.as_str(), t.total_tokens, t.calls));
        }
        if self.n_failed > 0 {
            out.push_str(&format!("failed items  {}\n", self.n_failed));
        }
        out
    }
}
