//! Client for OpenAI-compatible `/chat/completions` and `/embeddings`.
//!
//! Transport errors, 429 and 5xx responses are retried with exponential
//! backoff. Failed attempts are still billed to the call's usage at the
//! estimated prompt size, since those bytes were sent.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{ChatRequest, ChatResponse, ContentPart, LlmBackend, LlmError, Role, Usage};

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    /// Base URL up to and including the version segment, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub vision: bool,
    pub max_context_tokens: usize,
}

impl OpenAiConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            vision: false,
            max_context_tokens: 128_000,
        }
    }
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    agent: ureq::Agent,
    name: String,
    retries: AtomicU64,
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<CompletionChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(LlmError),
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let name = format!("openai:{}", config.model);
        Self {
            config,
            agent,
            name,
            retries: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &OpenAiConfig {
        &self.config
    }

    /// Retries performed over the backend's lifetime.
    pub fn retry_count(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn attempt(&self, url: &str, body: &Value) -> Attempt {
        let mut request = self.agent.post(url);
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        match request.send_json(body) {
            Ok(mut response) => {
                let status = response.status().as_u16();
                let text = match response.body_mut().read_to_string() {
                    Ok(t) => t,
                    Err(e) => return Attempt::Retry(format!("reading body: {e}")),
                };
                match status {
                    200..=299 => Attempt::Done(text),
                    429 | 500..=599 => Attempt::Retry(format!("status {status}: {text}")),
                    _ => Attempt::Fatal(LlmError::Status { status, body: text }),
                }
            }
            Err(e) => Attempt::Retry(format!("transport: {e}")),
        }
    }

    /// POSTs `body`, retrying transient failures. Returns the response body
    /// and the number of failed attempts before it.
    fn post_with_retries(&self, path: &str, body: &Value) -> Result<(String, u32), LlmError> {
        let url = self.url(path);
        let mut failures = 0u32;
        loop {
            match self.attempt(&url, body) {
                Attempt::Done(text) => return Ok((text, failures)),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(diagnostics) => {
                    failures += 1;
                    if failures > self.config.max_retries {
                        return Err(LlmError::Exhausted {
                            attempts: failures,
                            diagnostics,
                        });
                    }
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    let delay = self.config.backoff_base * 2u32.pow(failures - 1);
                    warn!(%url, failures, ?delay, %diagnostics, "retrying backend call");
                    std::thread::sleep(delay);
                }
            }
        }
    }

    fn wire_messages(req: &ChatRequest) -> Vec<Value> {
        req.messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                let content = if m.has_images() {
                    Value::Array(
                        m.parts
                            .iter()
                            .map(|p| match p {
                                ContentPart::Text { text } => json!({"type": "text", "text": text}),
                                ContentPart::Image { url } => {
                                    json!({"type": "image_url", "image_url": {"url": url}})
                                }
                            })
                            .collect(),
                    )
                } else {
                    Value::String(m.text_content())
                };
                json!({"role": role, "content": content})
            })
            .collect()
    }
}

impl LlmBackend for OpenAiBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_vision(&self) -> bool {
        self.config.vision
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let estimated = req.estimated_prompt_tokens();
        if estimated > self.config.max_context_tokens {
            return Err(LlmError::ContextOverflow {
                estimated,
                limit: self.config.max_context_tokens,
            });
        }
        if !self.config.vision && req.messages.iter().any(|m| m.has_images()) {
            return Err(LlmError::Unsupported(self.name.clone(), "image input"));
        }
        let mut body = json!({
            "model": self.config.model,
            "messages": Self::wire_messages(req),
            "temperature": req.temperature,
        });
        if let Some(max) = req.max_tokens {
            body["max_tokens"] = json!(max);
        }
        debug!(tag = %req.tag, step = req.meta.step, estimated, "chat request");
        let (raw, failures) = self.post_with_retries("chat/completions", &body)?;
        let parsed: CompletionBody =
            serde_json::from_str(&raw).map_err(|e| LlmError::Malformed(format!("{e}: {raw}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Malformed("response has no message content".into()))?;
        let mut usage = match parsed.usage {
            Some(u) => Usage::new(u.prompt_tokens, u.completion_tokens),
            None => Usage::estimate(req, &text),
        };
        usage.prompt_tokens += u64::from(failures) * estimated as u64;
        Ok(ChatResponse { text, usage })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({"model": self.config.model, "input": texts});
        let (raw, _) = self.post_with_retries("embeddings", &body)?;
        let mut parsed: EmbeddingBody =
            serde_json::from_str(&raw).map_err(|e| LlmError::Malformed(format!("{e}: {raw}")))?;
        if parsed.data.len() != texts.len() {
            return Err(LlmError::Malformed(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        parsed.data.sort_by_key(|d| d.index);
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}
