//! Recovering a JSON object from free-form model output.

use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("no JSON object could be recovered from model output")]
pub struct JsonExtractError {
    pub raw: String,
}

/// Extracts the first parseable JSON object from `text`.
///
/// Tried in order: the whole text, the largest brace-balanced substring, and
/// both again after stripping code fences and trailing commas.
pub fn extract_json(text: &str) -> Result<Map<String, Value>, JsonExtractError> {
    if let Some(obj) = parse_object(text.trim()) {
        return Ok(obj);
    }
    if let Some(obj) = largest_balanced(text) {
        return Ok(obj);
    }
    let cleaned = strip_trailing_commas(&strip_fences(text));
    if let Some(obj) = parse_object(cleaned.trim()) {
        return Ok(obj);
    }
    if let Some(obj) = largest_balanced(&cleaned) {
        return Ok(obj);
    }
    Err(JsonExtractError {
        raw: text.to_string(),
    })
}

fn parse_object(text: &str) -> Option<Map<String, Value>> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(obj)) => Some(obj),
        _ => None,
    }
}

/// Byte offset one past the brace matching the `{` at `open`, if any.
fn matching_close(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn largest_balanced(text: &str) -> Option<Map<String, Value>> {
    let bytes = text.as_bytes();
    let mut spans: Vec<(usize, usize)> = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'{')
        .filter_map(|(i, _)| matching_close(bytes, i).map(|end| (i, end)))
        .collect();
    spans.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
    spans.into_iter().find_map(|(s, e)| parse_object(&text[s..e]))
}

fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|line| !line.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
        .replace("```json", "")
        .replace("```", "")
}

/// Drops commas that directly precede `}` or `]` outside string literals.
fn strip_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            out.push(c);
            continue;
        }
        if c == '"' {
            in_string = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|ch| !ch.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Reads a list of integer ids, accepting numbers, integral floats and numeric
/// strings. Returns the ids plus the number of entries that were not ids.
pub fn ids_from_value(value: Option<&Value>) -> (Vec<i64>, usize) {
    let one = |v: &Value| -> Option<i64> {
        match v {
            Value::Number(n) => n
                .as_i64()
                .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)),
            Value::String(s) => s.trim().trim_start_matches('#').parse().ok(),
            _ => None,
        }
    };
    match value {
        None | Some(Value::Null) => (Vec::new(), 0),
        Some(Value::Array(items)) => {
            let ids: Vec<i64> = items.iter().filter_map(one).collect();
            let bad = items.len() - ids.len();
            (ids, bad)
        }
        Some(v) => match one(v) {
            Some(id) => (vec![id], 0),
            None => (Vec::new(), 1),
        },
    }
}

/// Reads a list of strings verbatim; numbers are rendered as text.
pub fn strings_from_value(value: Option<&Value>) -> Vec<String> {
    let one = |v: &Value| -> Option<String> {
        match v {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            _ => None,
        }
    };
    match value {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items.iter().filter_map(one).collect(),
        Some(v) => one(v).into_iter().collect(),
    }
}
