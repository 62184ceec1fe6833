//! Short-term memory carried across loop iterations.
//!
//! Two halves: a semantic evidence set that only ever grows, and an episodic
//! trajectory of per-iteration records plus the queue of failed queries.
//! Every operation returns a new value; a run owns one lineage of snapshots.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::controller::JudgeVerdict;
use crate::corpus::{estimate_tokens, MemoryStore};
use crate::perception::PerceptionResult;

/// An element of semantic memory.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum EvidenceItem {
    Chunk(usize),
    DiaId(String),
}

/// Accepted evidence, each element stamped with the iteration it first
/// appeared in.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMemory {
    pub evidence: BTreeMap<usize, u32>,
    pub visual_evidence: BTreeMap<String, u32>,
}

impl SemanticMemory {
    pub fn chunks(&self) -> Vec<usize> {
        self.evidence.keys().copied().collect()
    }

    pub fn dia_ids(&self) -> Vec<String> {
        self.visual_evidence.keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.evidence.is_empty() && self.visual_evidence.is_empty()
    }

    pub fn len(&self) -> usize {
        self.evidence.len() + self.visual_evidence.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iteration: u32,
    pub query: String,
    /// Retrieval candidates shown to the zoom-in agent.
    pub candidates: Vec<usize>,
    pub zoom_in: Vec<usize>,
    pub zoom_out: Vec<usize>,
    pub visual: Vec<String>,
    pub zoom_in_count: usize,
    pub zoom_out_count: usize,
    pub visual_count: usize,
    pub missing_information: String,
    pub new_evidence: Vec<EvidenceItem>,
    #[serde(default)]
    pub verdict: Option<JudgeVerdict>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl TrajectoryRecord {
    /// One-line digest for the judge's trajectory slot.
    pub fn summary(&self) -> String {
        let mut line = format!(
            "Step {}: query \"{}\"; zoom-in kept {}, zoom-out kept {}, visual kept {}; {} new evidence",
            self.iteration,
            self.query,
            self.zoom_in_count,
            self.zoom_out_count,
            self.visual_count,
            self.new_evidence.len()
        );
        if !self.missing_information.is_empty() {
            line.push_str(&format!("; missing: {}", self.missing_information));
        }
        if let Some(v) = &self.verdict {
            line.push_str(&format!("; can_answer={}, action={}", v.can_answer, v.action));
        }
        line
    }
}

/// Rendered semantic memory plus how many chunks the budget cut.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnownText {
    pub text: String,
    pub omitted: usize,
}

fn normalize_query(q: &str) -> String {
    q.trim().to_lowercase()
}

/// Queries compare equal after trimming and case folding.
pub fn same_query(a: &str, b: &str) -> bool {
    normalize_query(a) == normalize_query(b)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShortTermMemory {
    pub semantic: SemanticMemory,
    pub trajectory: Vec<TrajectoryRecord>,
    /// Failed queries in first-failure order.
    pub failed_queries: Vec<String>,
}

impl ShortTermMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn iterations(&self) -> u32 {
        self.trajectory.len() as u32
    }

    /// Folds one iteration's perception into a new snapshot. Evidence only
    /// accumulates; the appended record carries the exact delta.
    pub fn evolve(&self, perceived: &PerceptionResult, q: &str) -> ShortTermMemory {
        let j = self.iterations() + 1;
        let mut next = self.clone();
        let mut new_evidence = Vec::new();
        for &c in perceived.zoom_in.iter().chain(&perceived.zoom_out) {
            if !next.semantic.evidence.contains_key(&c) {
                next.semantic.evidence.insert(c, j);
                new_evidence.push(EvidenceItem::Chunk(c));
            }
        }
        for id in &perceived.visual {
            if !next.semantic.visual_evidence.contains_key(id) {
                next.semantic.visual_evidence.insert(id.clone(), j);
                new_evidence.push(EvidenceItem::DiaId(id.clone()));
            }
        }
        new_evidence.sort();
        next.trajectory.push(TrajectoryRecord {
            iteration: j,
            query: q.to_string(),
            candidates: perceived.raw_candidates.clone(),
            zoom_in: perceived.zoom_in.clone(),
            zoom_out: perceived.zoom_out.clone(),
            visual: perceived.visual.clone(),
            zoom_in_count: perceived.zoom_in.len(),
            zoom_out_count: perceived.zoom_out.len(),
            visual_count: perceived.visual.len(),
            missing_information: perceived.missing_information.clone(),
            new_evidence,
            verdict: None,
            notes: perceived.notes.clone(),
        });
        next
    }

    /// Attaches the judge's verdict to the latest record. A record that
    /// already carries a verdict is left as is.
    pub fn seal_verdict(&self, verdict: &JudgeVerdict) -> ShortTermMemory {
        let mut next = self.clone();
        if let Some(last) = next.trajectory.last_mut() {
            if last.verdict.is_none() {
                last.verdict = Some(verdict.clone());
            }
        }
        next
    }

    /// Adds `q` to the failed-query queue unless an equal query is there.
    pub fn record_failure(&self, q: &str) -> ShortTermMemory {
        let mut next = self.clone();
        if !self.is_failed(q) {
            next.failed_queries.push(q.trim().to_string());
        }
        next
    }

    pub fn is_failed(&self, q: &str) -> bool {
        self.failed_queries.iter().any(|f| same_query(f, q))
    }

    /// Serializes semantic memory for prompt slots.
    ///
    /// Chunks render in ascending index order. When the budget is short,
    /// whole chunks are dropped newest-first (latest `first_seen`, then
    /// highest index) and a closing line counts them.
    pub fn render_known(&self, store: &MemoryStore, budget: usize) -> KnownText {
        let mut by_age: Vec<(u32, usize)> = self.semantic.evidence.iter().map(|(&c, &j)| (j, c)).collect();
        by_age.sort();
        let mut kept = Vec::new();
        let mut used = 0usize;
        for &(_, c) in &by_age {
            let block = store.render_chunk(c);
            let cost = estimate_tokens(&block);
            if used + cost > budget {
                break;
            }
            used += cost;
            kept.push((c, block));
        }
        let omitted = by_age.len() - kept.len();
        kept.sort_by_key(|(c, _)| *c);
        let mut blocks: Vec<String> = kept.into_iter().map(|(_, b)| b).collect();

        let visual: Vec<String> = self
            .semantic
            .visual_evidence
            .keys()
            .filter_map(|id| store.utterance(id))
            .map(|u| u.dialogue_line())
            .collect();
        if !visual.is_empty() {
            blocks.push(format!("Visual evidence:\n{}", visual.join("\n")));
        }
        if omitted > 0 {
            blocks.push(format!("…{omitted} chunks omitted"));
        }
        KnownText {
            text: blocks.join("\n\n"),
            omitted,
        }
    }
}
