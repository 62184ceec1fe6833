use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AgentTag, Usage};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub calls: u64,
}

impl UsageTotals {
    fn add(&mut self, usage: Usage) {
        self.prompt_tokens += usage.prompt_tokens;
        self.completion_tokens += usage.completion_tokens;
        self.total_tokens += usage.total();
        self.calls += 1;
    }

    fn merge(&mut self, other: &UsageTotals) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.total_tokens += other.total_tokens;
        self.calls += other.calls;
    }
}

/// Per-run token ledger with a per-agent breakdown.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    #[serde(flatten)]
    pub totals: UsageTotals,
    pub per_tag: BTreeMap<AgentTag, UsageTotals>,
}

impl TokenUsage {
    pub fn meter(&mut self, tag: AgentTag, usage: Usage) {
        self.totals.add(usage);
        self.per_tag.entry(tag).or_default().add(usage);
    }

    pub fn merge(&mut self, other: &TokenUsage) {
        self.totals.merge(&other.totals);
        for (tag, totals) in &other.per_tag {
            self.per_tag.entry(*tag).or_default().merge(totals);
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.totals.total_tokens
    }
}
