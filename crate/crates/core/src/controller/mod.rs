//! The iterative memory-reasoning loop.
//!
//! For `j = 1..=J`: perceive the current query, fold the result into
//! short-term memory, and ask the judge whether memory now suffices. If not,
//! the failed query is queued and the judge's rewrite (Break or Delete)
//! becomes the next query. The responder answers from whatever memory holds
//! when the loop stops.

mod baseline;
mod trace;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, warn};

pub use baseline::{full_context_prompt_tokens, single_shot};
pub use trace::{trace_file_name, RunTrace, TRACE_FORMAT, TRACE_VERSION};

use crate::corpus::MemoryStore;
use crate::llm::{
    extract_json, strings_from_value, AgentBackends, AgentTag, CallLog, CallMeta, ChatMessage,
    ChatRequest, LlmError, Role, TokenUsage,
};
use crate::perception::Perceiver;
use crate::prompts::{PromptError, PromptSet};
use crate::retrieval::{RetrievalIndex, DEFAULT_TOP_K};
use crate::state::{same_query, ShortTermMemory};

/// Window width suited to corpora with long sessions of short turns.
pub const LONG_SESSION_WINDOW: usize = 15;
/// Trajectory records the judge sees.
pub const JUDGE_HISTORY: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{field} must be at least 1")]
    Zero { field: &'static str },
    #[error("{field} = {value} is outside [0, 2]")]
    Temperature { field: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub top_k: usize,
    pub window_w: usize,
    pub max_iterations: u32,
    pub queries_num: usize,
    pub temp_perception: f64,
    pub temp_judge: f64,
    pub temp_responder: f64,
    pub vision_enabled: bool,
    /// Token budget for rendered short-term memory.
    pub known_budget: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            window_w: 4,
            max_iterations: 8,
            queries_num: 1,
            temp_perception: 1.0,
            temp_judge: 0.0,
            temp_responder: 1.0,
            vision_enabled: true,
            known_budget: 4000,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.top_k == 0 {
            return Err(ConfigError::Zero { field: "top_k" });
        }
        if self.max_iterations == 0 {
            return Err(ConfigError::Zero { field: "max_iterations" });
        }
        if self.queries_num == 0 {
            return Err(ConfigError::Zero { field: "queries_num" });
        }
        for (field, value) in [
            ("temp_perception", self.temp_perception),
            ("temp_judge", self.temp_judge),
            ("temp_responder", self.temp_responder),
        ] {
            if !(0.0..=2.0).contains(&value) {
                return Err(ConfigError::Temperature { field, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryAction {
    Init,
    Break,
    Delete,
    None,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryStep {
    pub query: String,
    pub action: QueryAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryState {
    pub root: String,
    pub current: String,
    pub history: Vec<QueryStep>,
    pub reset_used: bool,
}

impl QueryState {
    pub fn new(root: &str) -> Self {
        Self {
            root: root.to_string(),
            current: root.to_string(),
            history: vec![QueryStep {
                query: root.to_string(),
                action: QueryAction::Init,
            }],
            reset_used: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeAction {
    Break,
    Delete,
    #[default]
    None,
}

impl JudgeAction {
    fn parse(value: Option<&Value>) -> Self {
        let text = match value {
            Some(Value::String(s)) => s.to_lowercase(),
            Some(Value::Array(items)) => items
                .first()
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_lowercase(),
            _ => String::new(),
        };
        if text.contains("break") || text.contains("decompos") {
            JudgeAction::Break
        } else if text.contains("delete") || text.contains("prun") {
            JudgeAction::Delete
        } else {
            JudgeAction::None
        }
    }
}

impl fmt::Display for JudgeAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JudgeAction::Break => "Break",
            JudgeAction::Delete => "Delete",
            JudgeAction::None => "none",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub thinking: String,
    /// Advisory only; evidence acceptance is decided by perception.
    pub useful_id: Vec<String>,
    pub can_answer: bool,
    pub action: JudgeAction,
    /// Proposals that survived deduplication, at most `queries_num`.
    pub new_queries: Vec<String>,
    /// Proposals discarded as repeats of failed or current queries.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub discarded: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn parse_bool(value: Option<&Value>) -> bool {
    match value {
        Some(Value::Bool(b)) => *b,
        Some(Value::String(s)) => s.trim().eq_ignore_ascii_case("true"),
        Some(Value::Number(n)) => n.as_f64().is_some_and(|x| x != 0.0),
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    JudgeSufficient,
    IterationCap,
}

impl fmt::Display for TerminatedBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminatedBy::JudgeSufficient => "judge_sufficient",
            TerminatedBy::IterationCap => "iteration_cap",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportingEvidence {
    pub chunks: Vec<usize>,
    pub dia_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub supporting_evidence: SupportingEvidence,
    pub iterations_used: u32,
    pub terminated_by: TerminatedBy,
    pub token_usage: TokenUsage,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid loop config: {0}")]
    Config(#[from] ConfigError),
    #[error("prompt rendering failed: {0}")]
    Prompt(#[from] PromptError),
    #[error("responder failed: {0}")]
    Responder(#[source] LlmError),
}

/// A failed run with everything recorded up to the failure.
#[derive(Debug, Error)]
#[error("{source}")]
pub struct RunFailure {
    #[source]
    pub source: RunError,
    pub trace: Box<RunTrace>,
}

/// Everything a run reads. Cheap to build; share one per store across runs.
pub struct Engine<'a> {
    pub store: &'a MemoryStore,
    pub index: &'a RetrievalIndex,
    pub backends: &'a AgentBackends,
    pub prompts: &'a PromptSet,
    pub config: &'a LoopConfig,
    pub image_root: Option<&'a Path>,
}

impl<'a> Engine<'a> {
    pub fn perceiver(&self) -> Perceiver<'a> {
        Perceiver {
            store: self.store,
            index: self.index,
            backends: self.backends,
            prompts: self.prompts,
            config: self.config,
            image_root: self.image_root,
        }
    }

    /// Asks the judge whether `state` suffices for the root query.
    ///
    /// Never fails: an unusable reply gets one corrective retry, after which
    /// the verdict defaults to "cannot answer, no new queries".
    pub fn judge(&self, state: &ShortTermMemory, qs: &QueryState, log: &mut CallLog) -> Result<JudgeVerdict, PromptError> {
        let step = state.iterations();
        let known = state.render_known(self.store, self.config.known_budget).text;
        let recent: Vec<String> = state
            .trajectory
            .iter()
            .rev()
            .take(JUDGE_HISTORY)
            .rev()
            .map(|r| r.summary())
            .collect();
        let fail_queue_information = if state.failed_queries.is_empty() {
            String::new()
        } else {
            format!("Fail query: {}", serde_json::to_string(&state.failed_queries).unwrap_or_default())
        };
        let query = if qs.current == qs.root {
            qs.root.clone()
        } else {
            format!("{}\nLast query: {}", qs.root, qs.current)
        };
        let prompt = self.prompts.judge.render(&std::collections::BTreeMap::from([
            ("query", query),
            ("short_memory_text", format!("Short Memory:\n{known}")),
            ("conv_memory_text", format!("Trajectory:\n{}", recent.join("\n"))),
            ("fail_queue_information", fail_queue_information),
            (
                "thinking",
                "thinking: Briefly analyze whether the short memory answers the root query and what is still missing."
                    .to_string(),
            ),
            ("queries_num", self.config.queries_num.to_string()),
        ]))?;
        let mut req = ChatRequest::single(
            AgentTag::Judge,
            prompt,
            self.config.temp_judge,
            CallMeta { step, options: 0 },
        );

        let mut parsed = None;
        let mut error = None;
        for attempt in 0..2 {
            match log.chat(self.backends.judge.as_ref(), &req) {
                Ok(text) => match extract_json(&text) {
                    Ok(obj) => {
                        parsed = Some(obj);
                        break;
                    }
                    Err(e) => {
                        error = Some(e.to_string());
                        if attempt == 0 {
                            req.messages.push(ChatMessage::text(Role::Assistant, text));
                            req.messages.push(ChatMessage::user(
                                "Your reply was not valid JSON. Output ONLY the JSON object.",
                            ));
                        }
                    }
                },
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        let Some(obj) = parsed else {
            warn!(step, "judge verdict unusable; defaulting to cannot-answer");
            return Ok(JudgeVerdict {
                error,
                ..Default::default()
            });
        };

        let mut verdict = JudgeVerdict {
            thinking: match obj.get("thinking") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Null) | None => String::new(),
                Some(other) => other.to_string(),
            },
            useful_id: strings_from_value(obj.get("useful_id")),
            can_answer: parse_bool(obj.get("can_answer")),
            action: JudgeAction::parse(obj.get("action")),
            ..Default::default()
        };
        if !verdict.can_answer {
            let mut kept: Vec<String> = Vec::new();
            for q in strings_from_value(obj.get("new_queries")) {
                let q = q.trim().to_string();
                if q.is_empty() {
                    continue;
                }
                let repeat = state.is_failed(&q)
                    || same_query(&q, &qs.current)
                    || kept.iter().any(|k| same_query(k, &q));
                if repeat {
                    verdict.discarded.push(q);
                } else if kept.len() < self.config.queries_num {
                    kept.push(q);
                }
            }
            verdict.new_queries = kept;
        }
        Ok(verdict)
    }

    /// Produces the final answer from accumulated memory.
    pub fn respond(&self, state: &ShortTermMemory, question: &str, log: &mut CallLog) -> Result<String, RunError> {
        let context = state.render_known(self.store, self.config.known_budget).text;
        let prompt = self.prompts.responder.render(&std::collections::BTreeMap::from([
            ("context", context),
            ("question", question.to_string()),
        ]))?;
        let req = ChatRequest::single(
            AgentTag::Responder,
            prompt,
            self.config.temp_responder,
            CallMeta {
                step: state.iterations(),
                options: 0,
            },
        );
        let text = log
            .chat(self.backends.responder.as_ref(), &req)
            .map_err(RunError::Responder)?;
        Ok(text.trim().to_string())
    }

    /// Runs the loop for one question.
    pub fn run(&self, query_id: &str, question: &str) -> Result<(Answer, RunTrace), RunFailure> {
        let mut trace = RunTrace::new(query_id, question, self.config);
        let fail = |source: RunError, mut trace: RunTrace, log: CallLog, state: &ShortTermMemory, qs: &QueryState| {
            trace.error = Some(source.to_string());
            trace.finish(state, qs, log);
            RunFailure {
                source,
                trace: Box::new(trace),
            }
        };
        let mut log = CallLog::default();
        let mut state = ShortTermMemory::new();
        let mut qs = QueryState::new(question);
        if let Err(e) = self.config.validate() {
            return Err(fail(e.into(), trace, log, &state, &qs));
        }
        let perceiver = self.perceiver();
        let mut terminated_by = TerminatedBy::IterationCap;

        for j in 1..=self.config.max_iterations {
            let q = qs.current.clone();
            let known = state.render_known(self.store, self.config.known_budget).text;
            let perceived = match perceiver.perceive(&q, &known, j, &mut log) {
                Ok(p) => p,
                Err(e) => {
                    warn!(j, error = %e, "perception failed");
                    crate::perception::PerceptionResult {
                        notes: vec![format!("perception failed: {e}")],
                        ..Default::default()
                    }
                }
            };
            state = state.evolve(&perceived, &q);
            let verdict = match self.judge(&state, &qs, &mut log) {
                Ok(v) => v,
                Err(e) => return Err(fail(e.into(), trace, log, &state, &qs)),
            };
            state = state.seal_verdict(&verdict);
            debug!(j, can_answer = verdict.can_answer, action = %verdict.action, "judge verdict");
            if verdict.can_answer {
                terminated_by = TerminatedBy::JudgeSufficient;
                break;
            }
            state = state.record_failure(&q);
            if !apply_action(&mut qs, &verdict) {
                trace.notes.push(format!("iteration {j}: no fresh query after reset; stopping"));
                break;
            }
        }

        let text = match self.respond(&state, question, &mut log) {
            Ok(t) => t,
            Err(e) => return Err(fail(e, trace, log, &state, &qs)),
        };
        let answer = Answer {
            text,
            supporting_evidence: SupportingEvidence {
                chunks: state.semantic.chunks(),
                dia_ids: state.semantic.dia_ids(),
            },
            iterations_used: state.iterations(),
            terminated_by,
            token_usage: log.usage.clone(),
        };
        trace.answer = Some(answer.clone());
        trace.finish(&state, &qs, log);
        Ok((answer, trace))
    }
}

/// Moves the query state to the judge's rewrite.
///
/// With no surviving proposal the query resets to the root, once per run.
/// Returns `false` when neither is possible and the loop must stop.
pub fn apply_action(qs: &mut QueryState, verdict: &JudgeVerdict) -> bool {
    if let Some(next) = verdict.new_queries.first() {
        let action = match verdict.action {
            JudgeAction::Break => QueryAction::Break,
            JudgeAction::Delete => QueryAction::Delete,
            JudgeAction::None => QueryAction::None,
        };
        qs.current = next.clone();
        qs.history.push(QueryStep {
            query: next.clone(),
            action,
        });
        true
    } else if !qs.reset_used {
        qs.reset_used = true;
        qs.current = qs.root.clone();
        qs.history.push(QueryStep {
            query: qs.root.clone(),
            action: QueryAction::Reset,
        });
        true
    } else {
        false
    }
}

/// Convenience wrapper over [`Engine::run`].
pub fn run(engine: &Engine<'_>, query_id: &str, question: &str) -> Result<(Answer, RunTrace), RunFailure> {
    engine.run(query_id, question)
}
