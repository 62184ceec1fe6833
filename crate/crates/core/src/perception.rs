//! Multi-view perception of the long-term store for one query.
//!
//! 1. Zoom-in: top-K retrieval, then an agent keeps the useful candidates.
//! 2. Zoom-out: each kept chunk is widened to `[i - W, i + W]`; overlapping
//!    windows merge and an agent keeps the useful windows.
//! 3. Visual grounding: only when a kept chunk carries an image cue, the
//!    images of the sessions involved are shown to a vision-capable agent,
//!    which names the useful dialogue ids.
//!
//! The views run in that order since each consumes the previous one's output.
//! Zoom-in ids shown to the agent are 1-based, zoom-out window ids 0-based;
//! both map back to 0-based chunk indices here.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use tracing::warn;

use crate::controller::LoopConfig;
use crate::corpus::{ImageRef, MemoryStore};
use crate::llm::{
    extract_json, ids_from_value, strings_from_value, AgentBackends, AgentTag, CallLog, CallMeta,
    ChatMessage, ChatRequest, ContentPart, JsonExtractError, LlmError, Role,
};
use crate::prompts::PromptSet;
use crate::retrieval::{RetrievalError, RetrievalIndex};

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("{0} backend call failed: {1}")]
    Backend(AgentTag, #[source] LlmError),
    #[error("{0} output was not JSON: {1}")]
    Parse(AgentTag, #[source] JsonExtractError),
    #[error("prompt rendering failed: {0}")]
    Prompt(#[from] crate::prompts::PromptError),
    #[error("every perception view failed: {}", .0.join("; "))]
    Total(Vec<String>),
}

/// Inclusive chunk window `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowSpan {
    pub lo: usize,
    pub hi: usize,
}

impl WindowSpan {
    pub fn contains(&self, index: usize) -> bool {
        self.lo <= index && index <= self.hi
    }

    pub fn width(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> {
        self.lo..=self.hi
    }
}

/// Widens each seed by `w` on both sides, clipped to the store, and merges
/// spans that overlap or touch. Output is sorted and disjoint.
pub fn expand_windows(seeds: &[usize], w: usize, store_size: usize) -> Vec<WindowSpan> {
    if store_size == 0 {
        return Vec::new();
    }
    let mut spans: Vec<WindowSpan> = seeds
        .iter()
        .filter(|&&s| s < store_size)
        .map(|&s| WindowSpan {
            lo: s.saturating_sub(w),
            hi: (s.saturating_add(w)).min(store_size - 1),
        })
        .collect();
    spans.sort();
    let mut merged: Vec<WindowSpan> = Vec::with_capacity(spans.len());
    for span in spans {
        match merged.last_mut() {
            Some(last) if span.lo <= last.hi + 1 => last.hi = last.hi.max(span.hi),
            _ => merged.push(span),
        }
    }
    merged
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZoomSelection {
    /// Chunk indices kept, ascending and deduplicated.
    pub useful: Vec<usize>,
    pub missing: String,
    /// Ids the agent returned that were out of range, duplicated or not ids.
    pub dropped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerceptionResult {
    pub zoom_in: Vec<usize>,
    pub zoom_out: Vec<usize>,
    pub visual: Vec<String>,
    pub missing_information: String,
    /// Retrieval candidates shown to the zoom-in agent, in rank order.
    pub raw_candidates: Vec<usize>,
    pub spans: Vec<WindowSpan>,
    pub dropped_ids: usize,
    pub notes: Vec<String>,
}

impl PerceptionResult {
    /// Deduplicated text evidence from both text views, ascending.
    pub fn text_evidence(&self) -> Vec<usize> {
        self.zoom_in
            .iter()
            .chain(&self.zoom_out)
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

fn missing_of(obj: &Map<String, Value>) -> String {
    match obj.get("missing_information") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.trim().to_string(),
        Some(other) => other.to_string(),
    }
}

fn query_information(q: &str) -> String {
    format!("Query: {q}")
}

fn known_information(known: &str) -> String {
    if known.is_empty() {
        String::new()
    } else {
        format!("Known information:\n{known}")
    }
}

/// Shared, read-only inputs for perceiving queries against one store.
pub struct Perceiver<'a> {
    pub store: &'a MemoryStore,
    pub index: &'a RetrievalIndex,
    pub backends: &'a AgentBackends,
    pub prompts: &'a PromptSet,
    pub config: &'a LoopConfig,
    /// Directory relative image paths resolve against.
    pub image_root: Option<&'a Path>,
}

impl Perceiver<'_> {
    fn ask_json(
        &self,
        tag: AgentTag,
        req: ChatRequest,
        log: &mut CallLog,
    ) -> Result<Map<String, Value>, PerceptionError> {
        let backend = match tag {
            AgentTag::Visual => self.backends.vision.as_ref(),
            _ => self.backends.perception.as_ref(),
        };
        let text = log
            .chat(backend, &req)
            .map_err(|e| PerceptionError::Backend(tag, e))?;
        extract_json(&text).map_err(|e| PerceptionError::Parse(tag, e))
    }

    /// Top-K retrieval for `q`, chunk indices in rank order.
    pub fn candidates(&self, q: &str) -> Result<Vec<usize>, PerceptionError> {
        let hits = self
            .index
            .search(q, self.config.top_k, self.backends.embedding.as_ref())?;
        Ok(hits.into_iter().map(|h| h.chunk_index).collect())
    }

    /// Asks the zoom-in agent which of `candidates` are useful.
    pub fn filter_candidates(
        &self,
        q: &str,
        known: &str,
        candidates: &[usize],
        step: u32,
        log: &mut CallLog,
    ) -> Result<ZoomSelection, PerceptionError> {
        if candidates.is_empty() {
            return Ok(ZoomSelection::default());
        }
        let rag_results_text = candidates
            .iter()
            .enumerate()
            .map(|(i, &c)| format!("[{}] {}", i + 1, self.store.render_chunk(c)))
            .collect::<Vec<_>>()
            .join("\n\n");
        let prompt = self.prompts.zoom_in.render(&BTreeMap::from([
            ("query_information", query_information(q)),
            ("known_information", known_information(known)),
            ("rag_results_text", rag_results_text),
            ("fail_queue_information", String::new()),
        ]))?;
        let req = ChatRequest::single(
            AgentTag::ZoomIn,
            prompt,
            self.config.temp_perception,
            CallMeta {
                step,
                options: candidates.len(),
            },
        );
        let obj = self.ask_json(AgentTag::ZoomIn, req, log)?;
        let (ids, mut dropped) = ids_from_value(obj.get("useful_ids"));
        let mut useful = BTreeSet::new();
        for id in ids {
            let chunk = usize::try_from(id)
                .ok()
                .filter(|&d| d >= 1 && d <= candidates.len())
                .map(|d| candidates[d - 1]);
            match chunk {
                Some(c) if useful.insert(c) => {}
                _ => dropped += 1,
            }
        }
        if dropped > 0 {
            warn!(step, dropped, "zoom-in agent returned invalid ids");
        }
        Ok(ZoomSelection {
            useful: useful.into_iter().collect(),
            missing: missing_of(&obj),
            dropped,
        })
    }

    /// Retrieval followed by the zoom-in filter.
    pub fn zoom_in(&self, q: &str, known: &str, step: u32, log: &mut CallLog) -> Result<ZoomSelection, PerceptionError> {
        let candidates = self.candidates(q)?;
        self.filter_candidates(q, known, &candidates, step, log)
    }

    /// Asks the zoom-out agent which windows are useful; a kept window
    /// contributes every chunk it spans.
    pub fn zoom_out(
        &self,
        spans: &[WindowSpan],
        q: &str,
        known: &str,
        step: u32,
        log: &mut CallLog,
    ) -> Result<ZoomSelection, PerceptionError> {
        if spans.is_empty() {
            return Ok(ZoomSelection::default());
        }
        let middle_context_text = spans
            .iter()
            .enumerate()
            .map(|(i, span)| {
                let body = span
                    .indices()
                    .map(|c| self.store.render_chunk(c))
                    .collect::<Vec<_>>()
                    .join("\n");
                format!("Context window {i} (chunks {}-{}):\n{body}", span.lo, span.hi)
            })
            .collect::<Vec<_>>()
            .join("\n\n");
        let prompt = self.prompts.zoom_out.render(&BTreeMap::from([
            ("query_information", query_information(q)),
            ("known_information", known_information(known)),
            ("middle_context_text", middle_context_text),
            ("fail_queue_information", String::new()),
        ]))?;
        let req = ChatRequest::single(
            AgentTag::ZoomOut,
            prompt,
            self.config.temp_perception,
            CallMeta {
                step,
                options: spans.len(),
            },
        );
        let obj = self.ask_json(AgentTag::ZoomOut, req, log)?;
        let (ids, mut dropped) = ids_from_value(obj.get("useful_ids"));
        let mut picked = BTreeSet::new();
        for id in ids {
            match usize::try_from(id).ok().filter(|&d| d < spans.len()) {
                Some(d) if picked.insert(d) => {}
                _ => dropped += 1,
            }
        }
        let useful: BTreeSet<usize> = picked.iter().flat_map(|&d| spans[d].indices()).collect();
        Ok(ZoomSelection {
            useful: useful.into_iter().collect(),
            missing: missing_of(&obj),
            dropped,
        })
    }

    /// Shows the images of the cue chunks' sessions to the vision agent.
    ///
    /// Returns the useful dialogue ids plus trajectory notes. A backend
    /// without vision support is skipped, not an error.
    pub fn visual_ground(
        &self,
        cue_chunks: &[usize],
        q: &str,
        known: &str,
        step: u32,
        log: &mut CallLog,
    ) -> Result<(Vec<String>, Vec<String>), PerceptionError> {
        let mut notes = Vec::new();
        if !self.backends.vision.supports_vision() {
            notes.push("vision skipped: backend lacks vision support".to_string());
            return Ok((Vec::new(), notes));
        }
        let mut sessions: Vec<&str> = Vec::new();
        for &c in cue_chunks {
            if let Some(s) = self.store.session_of_chunk(c) {
                if !sessions.contains(&s) {
                    sessions.push(s);
                }
            }
        }
        let utterances: Vec<_> = self
            .store
            .utterances()
            .iter()
            .filter(|u| sessions.contains(&u.session.as_str()))
            .collect();
        let mut images = Vec::new();
        for u in &utterances {
            if let Some(image) = &u.image_ref {
                match prepare_image(image, self.image_root) {
                    Ok(url) => images.push(ContentPart::Image { url }),
                    Err(e) => notes.push(format!("image {} for {} skipped: {e}", image.uri, u.dia_id)),
                }
            }
        }
        if images.is_empty() {
            notes.push("vision skipped: no loadable images".to_string());
            return Ok((Vec::new(), notes));
        }
        let rag_information = utterances
            .iter()
            .map(|u| u.dialogue_line())
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = self.prompts.visual.render(&BTreeMap::from([
            ("query_information", query_information(q)),
            ("known_information", known_information(known)),
            ("rag_information", rag_information),
            ("session_list_str", sessions.join(", ")),
        ]))?;
        let mut parts = vec![ContentPart::Text { text: prompt }];
        let shown = images.len();
        parts.extend(images);
        let req = ChatRequest {
            messages: vec![ChatMessage {
                role: Role::User,
                parts,
            }],
            temperature: self.config.temp_perception,
            max_tokens: None,
            tag: AgentTag::Visual,
            meta: CallMeta { step, options: shown },
        };
        let obj = self.ask_json(AgentTag::Visual, req, log)?;
        let ids: BTreeSet<String> = strings_from_value(obj.get("useful_dia_ids"))
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| self.store.utterance(s).is_some())
            .collect();
        Ok((ids.into_iter().collect(), notes))
    }

    /// Runs all three views for `q` and aggregates their output.
    ///
    /// A failing view yields nothing and leaves a note; only when every view
    /// that ran has failed is an error returned.
    pub fn perceive(&self, q: &str, known: &str, step: u32, log: &mut CallLog) -> Result<PerceptionResult, PerceptionError> {
        let mut result = PerceptionResult::default();
        let mut ran = 0usize;
        let mut failures = Vec::new();

        ran += 1;
        let zoom_in = self
            .candidates(q)
            .and_then(|c| {
                result.raw_candidates = c;
                self.filter_candidates(q, known, &result.raw_candidates, step, log)
            })
            .unwrap_or_else(|e| {
                failures.push(format!("zoom-in: {e}"));
                ZoomSelection::default()
            });

        result.spans = expand_windows(&zoom_in.useful, self.config.window_w, self.store.len());
        let zoom_out = if result.spans.is_empty() {
            ZoomSelection::default()
        } else {
            ran += 1;
            self.zoom_out(&result.spans, q, known, step, log)
                .unwrap_or_else(|e| {
                    failures.push(format!("zoom-out: {e}"));
                    ZoomSelection::default()
                })
        };

        let cues: Vec<usize> = zoom_in
            .useful
            .iter()
            .chain(&zoom_out.useful)
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|&c| self.store.chunk(c).is_some_and(|ch| ch.has_image_cue))
            .collect();
        if !cues.is_empty() {
            if self.config.vision_enabled {
                ran += 1;
                match self.visual_ground(&cues, q, known, step, log) {
                    Ok((ids, notes)) => {
                        result.visual = ids;
                        result.notes.extend(notes);
                    }
                    Err(e) => failures.push(format!("visual: {e}")),
                }
            } else {
                result.notes.push("vision skipped: disabled in config".to_string());
            }
        }

        if failures.len() == ran {
            return Err(PerceptionError::Total(failures));
        }
        result.notes.extend(failures);
        result.missing_information = [zoom_in.missing.as_str(), zoom_out.missing.as_str()]
            .into_iter()
            .filter(|m| !m.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        result.dropped_ids = zoom_in.dropped + zoom_out.dropped;
        result.zoom_in = zoom_in.useful;
        result.zoom_out = zoom_out.useful;
        Ok(result)
    }
}

/// Resolves an image to a URL for the wire, downscaling local files so the
/// longest edge is at most `max_edge_px`. Remote and `data:` URLs pass
/// through untouched.
pub fn prepare_image(image: &ImageRef, root: Option<&Path>) -> Result<String, String> {
    let uri = image.uri.as_str();
    if uri.starts_with("http://") || uri.starts_with("https://") || uri.starts_with("data:") {
        return Ok(uri.to_string());
    }
    let path = match root {
        Some(r) if Path::new(uri).is_relative() => r.join(uri),
        _ => Path::new(uri).to_path_buf(),
    };
    let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let png = downscale_png(&bytes, image.max_edge_px)?;
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    ))
}

/// Decodes an image and re-encodes it as PNG with its longest edge capped.
pub fn downscale_png(bytes: &[u8], max_edge_px: u32) -> Result<Vec<u8>, String> {
    let mut img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    if img.width().max(img.height()) > max_edge_px {
        img = img.resize(max_edge_px, max_edge_px, image::imageops::FilterType::Triangle);
    }
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    Ok(out.into_inner())
}
