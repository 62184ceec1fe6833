//! Reference points the loop is measured against.

use std::collections::{BTreeMap, BTreeSet};

use super::{Engine, RunError};
use crate::corpus::{estimate_tokens, MemoryStore};
use crate::llm::{AgentTag, CallLog, CallMeta, ChatRequest};
use crate::perception::expand_windows;
use crate::prompts::{PromptError, PromptSet};

/// Estimated prompt tokens for answering with the whole store as context.
pub fn full_context_prompt_tokens(store: &MemoryStore, question: &str, prompts: &PromptSet) -> Result<usize, PromptError> {
    let context = (0..store.len())
        .map(|i| store.render_chunk(i))
        .collect::<Vec<_>>()
        .join("\n\n");
    let prompt = prompts
        .responder
        .render(&BTreeMap::from([("context", context), ("question", question.to_string())]))?;
    Ok(estimate_tokens(&prompt))
}

/// One retrieval round with no judge: zoom-in, window expansion, zoom-out,
/// then answer. Returns the evidence chunks and the answer text.
pub fn single_shot(engine: &Engine<'_>, question: &str, log: &mut CallLog) -> Result<(Vec<usize>, String), RunError> {
    let perceiver = engine.perceiver();
    let zoom_in = perceiver
        .zoom_in(question, "", 1, log)
        .map(|s| s.useful)
        .unwrap_or_default();
    let spans = expand_windows(&zoom_in, engine.config.window_w, engine.store.len());
    let zoom_out = perceiver
        .zoom_out(&spans, question, "", 1, log)
        .map(|s| s.useful)
        .unwrap_or_default();
    let evidence: Vec<usize> = zoom_in.into_iter().chain(zoom_out).collect::<BTreeSet<_>>().into_iter().collect();
    let context = evidence
        .iter()
        .map(|&i| engine.store.render_chunk(i))
        .collect::<Vec<_>>()
        .join("\n\n");
    let prompt = engine
        .prompts
        .responder
        .render(&BTreeMap::from([("context", context), ("question", question.to_string())]))?;
    let req = ChatRequest::single(
        AgentTag::Responder,
        prompt,
        engine.config.temp_responder,
        CallMeta { step: 1, options: 0 },
    );
    let text = log
        .chat(engine.backends.responder.as_ref(), &req)
        .map_err(RunError::Responder)?;
    Ok((evidence, text.trim().to_string()))
}
