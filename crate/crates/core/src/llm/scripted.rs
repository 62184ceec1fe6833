//! Deterministic backend driven by canned rules.
//!
//! Rules are tried in order; the first whose tag, step and substring filters
//! all match the request answers it. Matching is stateless, so one backend can
//! serve concurrent runs and always gives the same answer for the same call.
//! A call no rule matches is an error: scripts must cover every call a test
//! makes.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AgentTag, ChatRequest, ChatResponse, LlmBackend, LlmError, Usage};

type ResponseFn = dyn Fn(&ChatRequest) -> String + Send + Sync;

#[derive(Clone)]
pub enum ScriptResponse {
    Text(String),
    /// Selects every option shown: zoom-in ids `1..=n`, zoom-out ids
    /// `0..n`, and an empty selection for other agents.
    SelectAll,
    Dynamic(Arc<ResponseFn>),
}

impl fmt::Debug for ScriptResponse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScriptResponse::Text(t) => f.debug_tuple("Text").field(t).finish(),
            ScriptResponse::SelectAll => f.write_str("SelectAll"),
            ScriptResponse::Dynamic(_) => f.write_str("Dynamic(..)"),
        }
    }
}

impl ScriptResponse {
    fn render(&self, req: &ChatRequest) -> String {
        match self {
            ScriptResponse::Text(t) => t.clone(),
            ScriptResponse::Dynamic(f) => f(req),
            ScriptResponse::SelectAll => select_all(req),
        }
    }
}

fn select_all(req: &ChatRequest) -> String {
    let n = req.meta.options;
    match req.tag {
        AgentTag::ZoomIn => json!({
            "thinking": "all candidates selected",
            "missing_information": "",
            "useful_ids": (1..=n).collect::<Vec<_>>(),
        }),
        AgentTag::ZoomOut => json!({
            "thinking": "all windows selected",
            "thinking_choice": "",
            "missing_information": "",
            "useful_ids": (0..n).collect::<Vec<_>>(),
        }),
        AgentTag::Visual => json!({"thinking": "", "useful_dia_ids": []}),
        AgentTag::Judge => json!({
            "thinking": "",
            "useful_id": [],
            "can_answer": true,
            "action": "none",
            "new_queries": [],
        }),
        AgentTag::Responder => return "no answer".to_string(),
    }
    .to_string()
}

#[derive(Debug, Clone)]
pub struct ScriptRule {
    pub tag: AgentTag,
    pub step: Option<u32>,
    /// Substring that must occur in the rendered prompt.
    pub contains: Option<String>,
    pub response: ScriptResponse,
}

impl ScriptRule {
    pub fn new(tag: AgentTag, response: ScriptResponse) -> Self {
        Self {
            tag,
            step: None,
            contains: None,
            response,
        }
    }

    pub fn at_step(mut self, step: u32) -> Self {
        self.step = Some(step);
        self
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    fn matches(&self, req: &ChatRequest, prompt: &str) -> bool {
        self.tag == req.tag
            && self.step.is_none_or(|s| s == req.meta.step)
            && self.contains.as_deref().is_none_or(|c| prompt.contains(c))
    }
}

/// On-disk script: `{"vision": bool, "rules": [...], "embeddings": {...}}`.
///
/// Each rule is `{"tag": "judge", "step": 2?, "contains": "..."?,
/// "text": "..."}` or `{"tag": ..., "select_all": true}`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default)]
    pub vision: bool,
    #[serde(default)]
    pub rules: Vec<ScriptRuleDoc>,
    #[serde(default)]
    pub embeddings: HashMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRuleDoc {
    pub tag: AgentTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default)]
    pub select_all: bool,
}

#[derive(Default)]
pub struct ScriptedBackend {
    name: String,
    rules: Vec<ScriptRule>,
    embed_table: HashMap<String, Vec<f64>>,
    vision: bool,
    log: Mutex<Vec<ChatRequest>>,
}

impl fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("name", &self.name)
            .field("rules", &self.rules.len())
            .field("vision", &self.vision)
            .finish()
    }
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self {
            name: "scripted".into(),
            ..Self::default()
        }
    }

    pub fn with_rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn on(self, tag: AgentTag, response: ScriptResponse) -> Self {
        self.with_rule(ScriptRule::new(tag, response))
    }

    pub fn on_text(self, tag: AgentTag, text: impl Into<String>) -> Self {
        self.on(tag, ScriptResponse::Text(text.into()))
    }

    pub fn on_fn<F>(self, tag: AgentTag, f: F) -> Self
    where
        F: Fn(&ChatRequest) -> String + Send + Sync + 'static,
    {
        self.on(tag, ScriptResponse::Dynamic(Arc::new(f)))
    }

    pub fn with_vision(mut self, vision: bool) -> Self {
        self.vision = vision;
        self
    }

    pub fn with_embedding(mut self, text: impl Into<String>, vector: Vec<f64>) -> Self {
        self.embed_table.insert(text.into(), vector);
        self
    }

    pub fn from_script(script: ScriptFile) -> Result<Self, LlmError> {
        let mut backend = Self::new().with_vision(script.vision);
        for (i, doc) in script.rules.into_iter().enumerate() {
            let response = match (doc.text, doc.select_all) {
                (Some(text), false) => ScriptResponse::Text(text),
                (None, true) => ScriptResponse::SelectAll,
                _ => {
                    return Err(LlmError::Config(format!(
                        "script rule {i} needs exactly one of \"text\" or \"select_all\""
                    )))
                }
            };
            backend.rules.push(ScriptRule {
                tag: doc.tag,
                step: doc.step,
                contains: doc.contains,
                response,
            });
        }
        backend.embed_table = script.embeddings;
        Ok(backend)
    }

    pub fn from_path(path: &Path) -> Result<Self, LlmError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("cannot read script {}: {e}", path.display())))?;
        let script: ScriptFile = serde_json::from_str(&raw)
            .map_err(|e| LlmError::Config(format!("invalid script {}: {e}", path.display())))?;
        Self::from_script(script)
    }

    /// Every request served so far, in arrival order.
    pub fn calls(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("log lock").clone()
    }
}

impl LlmBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_vision(&self) -> bool {
        self.vision
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let prompt = req.prompt_text();
        let rule = self
            .rules
            .iter()
            .find(|r| r.matches(req, &prompt))
            .ok_or(LlmError::ScriptMiss {
                tag: req.tag,
                step: req.meta.step,
            })?;
        let text = rule.response.render(req);
        self.log.lock().expect("log lock").push(req.clone());
        Ok(ChatResponse {
            usage: Usage::estimate(req, &text),
            text,
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        texts
            .iter()
            .map(|t| {
                self.embed_table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| LlmError::Malformed(format!("no scripted embedding for {t:?}")))
            })
            .collect()
    }
}
