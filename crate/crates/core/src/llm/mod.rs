//! Language-model backends shared by every agent in the loop.
//!
//! All calls go through [`LlmBackend`]. Two implementations ship: an
//! OpenAI-compatible HTTP client and a deterministic [`ScriptedBackend`] that
//! answers from canned rules so whole runs can be replayed exactly.

mod json;
mod openai;
mod scripted;
mod usage;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use json::{extract_json, ids_from_value, strings_from_value, JsonExtractError};
pub use openai::{OpenAiBackend, OpenAiConfig};
pub use scripted::{ScriptFile, ScriptResponse, ScriptRule, ScriptedBackend};
pub use usage::{TokenUsage, UsageTotals};

use crate::corpus::estimate_tokens;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend request failed after {attempts} attempt(s): {diagnostics}")]
    Exhausted { attempts: u32, diagnostics: String },
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("prompt of ~{estimated} tokens exceeds the context limit of {limit}")]
    ContextOverflow { estimated: usize, limit: usize },
    #[error("scripted backend has no rule for tag {tag} at step {step}")]
    ScriptMiss { tag: AgentTag, step: u32 },
    #[error("backend {0} does not support {1}")]
    Unsupported(String, &'static str),
    #[error("backend configuration error: {0}")]
    Config(String),
}

/// Which agent issued a call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentTag {
    ZoomIn,
    ZoomOut,
    Visual,
    Judge,
    Responder,
}

impl AgentTag {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentTag::ZoomIn => "zoom_in",
            AgentTag::ZoomOut => "zoom_out",
            AgentTag::Visual => "visual",
            AgentTag::Judge => "judge",
            AgentTag::Responder => "responder",
        }
    }
}

impl fmt::Display for AgentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    /// A `data:` URL or remote URL for an image.
    Image { url: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![ContentPart::Text { text: text.into() }],
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::text(Role::User, text)
    }

    pub fn has_images(&self) -> bool {
        self.parts.iter().any(|p| matches!(p, ContentPart::Image { .. }))
    }

    pub fn text_content(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Out-of-band call context. Never sent over the wire; scripted backends and
/// traces key on it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallMeta {
    /// Loop iteration that issued the call (1-based).
    pub step: u32,
    /// Number of selectable items shown in the prompt (candidates, windows).
    pub options: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub tag: AgentTag,
    pub meta: CallMeta,
}

impl ChatRequest {
    pub fn single(tag: AgentTag, prompt: impl Into<String>, temperature: f64, meta: CallMeta) -> Self {
        Self {
            messages: vec![ChatMessage::user(prompt)],
            temperature,
            max_tokens: None,
            tag,
            meta,
        }
    }

    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(ChatMessage::text_content)
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn estimated_prompt_tokens(&self) -> usize {
        self.messages
            .iter()
            .flat_map(|m| &m.parts)
            .map(|p| match p {
                ContentPart::Text { text } => estimate_tokens(text),
                ContentPart::Image { .. } => 0,
            })
            .sum()
    }
}

/// Token counts for one call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    /// Estimator-based usage for backends that report none.
    pub fn estimate(req: &ChatRequest, completion: &str) -> Self {
        Self::new(
            req.estimated_prompt_tokens() as u64,
            estimate_tokens(completion) as u64,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
}

pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;

    fn supports_vision(&self) -> bool {
        false
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError>;

    fn embed(&self, _texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        Err(LlmError::Unsupported(self.name().to_string(), "embeddings"))
    }
}

/// One backend per agent role. Roles may point at the same backend.
#[derive(Clone)]
pub struct AgentBackends {
    pub perception: Arc<dyn LlmBackend>,
    pub vision: Arc<dyn LlmBackend>,
    pub judge: Arc<dyn LlmBackend>,
    pub responder: Arc<dyn LlmBackend>,
    pub embedding: Arc<dyn LlmBackend>,
}

impl AgentBackends {
    pub fn uniform(backend: Arc<dyn LlmBackend>) -> Self {
        Self {
            perception: backend.clone(),
            vision: backend.clone(),
            judge: backend.clone(),
            responder: backend.clone(),
            embedding: backend,
        }
    }
}

impl fmt::Debug for AgentBackends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentBackends")
            .field("perception", &self.perception.name())
            .field("vision", &self.vision.name())
            .field("judge", &self.judge.name())
            .field("responder", &self.responder.name())
            .field("embedding", &self.embedding.name())
            .finish()
    }
}

/// Trace entry for one backend call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub tag: AgentTag,
    pub step: u32,
    pub backend: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Meters and records every call a run makes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallLog {
    pub usage: TokenUsage,
    pub calls: Vec<CallRecord>,
}

impl CallLog {
    pub fn chat(&mut self, backend: &dyn LlmBackend, req: &ChatRequest) -> Result<String, LlmError> {
        match backend.chat(req) {
            Ok(resp) => {
                self.usage.meter(req.tag, resp.usage);
                self.calls.push(CallRecord {
                    tag: req.tag,
                    step: req.meta.step,
                    backend: backend.name().to_string(),
                    prompt_tokens: resp.usage.prompt_tokens,
                    completion_tokens: resp.usage.completion_tokens,
                    error: None,
                });
                Ok(resp.text)
            }
            Err(e) => {
                self.calls.push(CallRecord {
                    tag: req.tag,
                    step: req.meta.step,
                    backend: backend.name().to_string(),
                    prompt_tokens: 0,
                    completion_tokens: 0,
                    error: Some(e.to_string()),
                });
                Err(e)
            }
        }
    }
}
