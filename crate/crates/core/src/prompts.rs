//! Agent prompt templates.
//!
//! Templates use Python f-string conventions: `{name}` is a placeholder and
//! `{{` / `}}` are literal braces. The built-in set is compiled in; any file
//! with the same name in an override directory replaces it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {template}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {template}: unbalanced brace at byte {offset}")]
    Unbalanced { template: String, offset: usize },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponderStyle {
    #[default]
    Locomo,
    Longmemeval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    name: String,
    source: String,
}

enum Piece<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

impl Template {
    pub fn new(name: impl Into<String>, source: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            source: source.into(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn pieces(&self) -> Result<Vec<Piece<'_>>, PromptError> {
        let src = self.source.as_str();
        let bytes = src.as_bytes();
        let mut out = Vec::new();
        let mut lit_start = 0;
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    out.push(Piece::Literal(&src[lit_start..i + 1]));
                    i += 2;
                    lit_start = i;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    out.push(Piece::Literal(&src[lit_start..i + 1]));
                    i += 2;
                    lit_start = i;
                }
                b'{' => {
                    let close = src[i..].find('}').ok_or(PromptError::Unbalanced {
                        template: self.name.clone(),
                        offset: i,
                    })?;
                    out.push(Piece::Literal(&src[lit_start..i]));
                    out.push(Piece::Slot(&src[i + 1..i + close]));
                    i += close + 1;
                    lit_start = i;
                }
                b'}' => {
                    return Err(PromptError::Unbalanced {
                        template: self.name.clone(),
                        offset: i,
                    })
                }
                _ => i += 1,
            }
        }
        out.push(Piece::Literal(&src[lit_start..]));
        Ok(out)
    }

    pub fn placeholders(&self) -> Result<BTreeSet<String>, PromptError> {
        Ok(self
            .pieces()?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(name) => Some(name.to_string()),
                Piece::Literal(_) => None,
            })
            .collect())
    }

    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.source.len());
        for piece in self.pieces()? {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(name) => match values.get(name) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(PromptError::UnknownPlaceholder {
                            template: self.name.clone(),
                            name: name.to_string(),
                        })
                    }
                },
            }
        }
        Ok(out)
    }

    /// Fails if the template uses a placeholder outside `allowed`.
    pub fn check(&self, allowed: &[&str]) -> Result<(), PromptError> {
        for name in self.placeholders()? {
            if !allowed.contains(&name.as_str()) {
                return Err(PromptError::UnknownPlaceholder {
                    template: self.name.clone(),
                    name,
                });
            }
        }
        Ok(())
    }
}

pub const ZOOM_IN_SLOTS: &[&str] = &["query_information", "known_information", "rag_results_text", "fail_queue_information"];
pub const ZOOM_OUT_SLOTS: &[&str] = &["query_information", "known_information", "middle_context_text", "fail_queue_information"];
pub const VISUAL_SLOTS: &[&str] = &["query_information", "known_information", "rag_information", "session_list_str"];
pub const JUDGE_SLOTS: &[&str] = &[
    "query",
    "short_memory_text",
    "conv_memory_text",
    "fail_queue_information",
    "thinking",
    "queries_num",
];
pub const RESPONDER_SLOTS: &[&str] = &["context", "question"];

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub zoom_in: Template,
    pub zoom_out: Template,
    pub visual: Template,
    pub judge: Template,
    pub responder: Template,
}

impl PromptSet {
    pub fn builtin(style: ResponderStyle) -> Self {
        let responder = match style {
            ResponderStyle::Locomo => include_str!("../prompts/responder_locomo.txt"),
            ResponderStyle::Longmemeval => include_str!("../prompts/responder_longmemeval.txt"),
        };
        Self {
            zoom_in: Template::new("zoom_in", include_str!("../prompts/zoom_in.txt")),
            zoom_out: Template::new("zoom_out", include_str!("../prompts/zoom_out.txt")),
            visual: Template::new("visual", include_str!("../prompts/visual.txt")),
            judge: Template::new("judge", include_str!("../prompts/judge.txt")),
            responder: Template::new("responder", responder),
        }
    }

    /// Built-ins with any of `zoom_in.txt`, `zoom_out.txt`, `visual.txt`,
    /// `judge.txt` or `responder.txt` found in `dir` swapped in.
    pub fn with_overrides(style: ResponderStyle, dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin(style);
        for slot in [
            &mut set.zoom_in,
            &mut set.zoom_out,
            &mut set.visual,
            &mut set.judge,
            &mut set.responder,
        ] {
            let path = dir.join(format!("{}.txt", slot.name));
            if path.exists() {
                let source = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                *slot = Template::new(slot.name.clone(), source);
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        self.zoom_in.check(ZOOM_IN_SLOTS)?;
        self.zoom_out.check(ZOOM_OUT_SLOTS)?;
        self.visual.check(VISUAL_SLOTS)?;
        self.judge.check(JUDGE_SLOTS)?;
        self.responder.check(RESPONDER_SLOTS)
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin(ResponderStyle::default())
    }
}
