//! Corpus document schema and validation.
//!
//! ```json
//! { "sessions": [ { "session_id": "s1", "datetime": "...",
//!     "turns": [ { "dia_id": "D1:1", "speaker": "...", "text": "...",
//!                  "img_url": "...", "caption": "..." } ] } ] }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{normalize_whitespace, CorpusError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub sessions: Vec<SessionDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDoc {
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub datetime: Option<String>,
    pub turns: Vec<TurnDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnDoc {
    pub dia_id: String,
    pub speaker: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub img_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl CorpusDoc {
    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        let raw = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let value: Value = serde_json::from_str(&raw).map_err(|source| CorpusError::Json {
            path: path.display().to_string(),
            source,
        })?;
        parse_corpus(&value)
    }
}

fn schema_err(path: &str, message: impl Into<String>) -> CorpusError {
    CorpusError::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

fn object<'a>(value: &'a Value, path: &str) -> Result<&'a Map<String, Value>, CorpusError> {
    value
        .as_object()
        .ok_or_else(|| schema_err(path, "expected an object"))
}

fn required_str(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, CorpusError> {
    let field = format!("{path}.{key}");
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(schema_err(&field, "expected a string")),
        None => Err(schema_err(&field, "missing required field")),
    }
}

fn optional_str(obj: &Map<String, Value>, key: &str, path: &str) -> Result<Option<String>, CorpusError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(schema_err(&format!("{path}.{key}"), "expected a string or null")),
    }
}

/// Validates a JSON value against the corpus schema, reporting the first
/// offending path (e.g. `sessions[1].turns[3].text`).
pub fn parse_corpus(value: &Value) -> Result<CorpusDoc, CorpusError> {
    let root = object(value, "$")?;
    let sessions = match root.get("sessions") {
        Some(Value::Array(items)) => items,
        Some(_) => return Err(schema_err("sessions", "expected an array")),
        None => return Err(schema_err("sessions", "missing required field")),
    };
    let mut out = Vec::with_capacity(sessions.len());
    for (si, session) in sessions.iter().enumerate() {
        let spath = format!("sessions[{si}]");
        let sobj = object(session, &spath)?;
        let session_id = required_str(sobj, "session_id", &spath)?;
        let datetime = optional_str(sobj, "datetime", &spath)?;
        let turns = match sobj.get("turns") {
            Some(Value::Array(items)) => items,
            Some(_) => return Err(schema_err(&format!("{spath}.turns"), "expected an array")),
            None => return Err(schema_err(&format!("{spath}.turns"), "missing required field")),
        };
        let mut turn_docs = Vec::with_capacity(turns.len());
        for (ti, turn) in turns.iter().enumerate() {
            let tpath = format!("{spath}.turns[{ti}]");
            let tobj = object(turn, &tpath)?;
            let text = required_str(tobj, "text", &tpath)?;
            if normalize_whitespace(&text).is_empty() {
                return Err(schema_err(&format!("{tpath}.text"), "text is empty"));
            }
            let dia_id = required_str(tobj, "dia_id", &tpath)?;
            if dia_id.trim().is_empty() {
                return Err(schema_err(&format!("{tpath}.dia_id"), "dia_id is empty"));
            }
            turn_docs.push(TurnDoc {
                dia_id,
                speaker: required_str(tobj, "speaker", &tpath)?,
                text,
                img_url: optional_str(tobj, "img_url", &tpath)?,
                caption: optional_str(tobj, "caption", &tpath)?,
            });
        }
        out.push(SessionDoc {
            session_id,
            datetime,
            turns: turn_docs,
        });
    }
    Ok(CorpusDoc { sessions: out })
}
