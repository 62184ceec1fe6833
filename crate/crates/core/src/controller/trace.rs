//! Per-query run trace, serialized as `<query_id>.v1.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Answer, LoopConfig, QueryState, QueryStep};
use crate::llm::{CallLog, CallRecord, TokenUsage};
use crate::state::{SemanticMemory, ShortTermMemory, TrajectoryRecord};

pub const TRACE_FORMAT: &str = "memloop-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub format: String,
    pub version: u32,
    pub query_id: String,
    pub question: String,
    pub config: LoopConfig,
    pub iterations: Vec<TrajectoryRecord>,
    pub query_history: Vec<QueryStep>,
    pub failed_queries: Vec<String>,
    pub semantic_memory: SemanticMemory,
    pub calls: Vec<CallRecord>,
    pub token_usage: TokenUsage,
    pub answer: Option<Answer>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunTrace {
    pub fn new(query_id: &str, question: &str, config: &LoopConfig) -> Self {
        Self {
            format: TRACE_FORMAT.to_string(),
            version: TRACE_VERSION,
            query_id: query_id.to_string(),
            question: question.to_string(),
            config: config.clone(),
            iterations: Vec::new(),
            query_history: Vec::new(),
            failed_queries: Vec::new(),
            semantic_memory: SemanticMemory::default(),
            calls: Vec::new(),
            token_usage: TokenUsage::default(),
            answer: None,
            notes: Vec::new(),
            error: None,
        }
    }

    pub(crate) fn finish(&mut self, state: &ShortTermMemory, qs: &QueryState, log: CallLog) {
        self.iterations = state.trajectory.clone();
        self.query_history = qs.history.clone();
        self.failed_queries = state.failed_queries.clone();
        self.semantic_memory = state.semantic.clone();
        self.calls = log.calls;
        self.token_usage = log.usage;
    }

    /// Queries actually handed to perception, in order.
    pub fn perceived_queries(&self) -> Vec<&str> {
        self.iterations.iter().map(|r| r.query.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    /// Writes the trace into `dir` and returns the file path.
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(trace_file_name(&self.query_id));
        std::fs::write(&path, self.to_json() + "\n")?;
        Ok(path)
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let trace: RunTrace = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        if trace.format != TRACE_FORMAT || trace.version != TRACE_VERSION {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unsupported trace {} v{}", trace.format, trace.version),
            ));
        }
        Ok(trace)
    }
}

/// File name for a query's trace; characters unsafe in paths become `_`.
pub fn trace_file_name(query_id: &str) -> String {
    let safe: String = query_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    format!("{safe}.v1.json")
}
