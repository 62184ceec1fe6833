//! Long-term memory store: conversation ingestion, turn-atomic chunking and
//! the positional chunk index every other stage addresses.
//!
//! A corpus is a list of sessions, each a list of dialogue turns. Turns are
//! packed greedily into chunks of roughly `chunk_budget` estimated tokens.
//! A turn is never split across chunks and a chunk never spans two sessions,
//! so every session maps onto a contiguous, non-overlapping chunk range.

mod persist;
mod schema;

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use persist::{load_store, save_store, StoreError, STORE_FORMAT, STORE_VERSION};
pub use schema::{parse_corpus, CorpusDoc, SessionDoc, TurnDoc};

/// Default packing budget in estimated tokens per chunk.
pub const DEFAULT_CHUNK_BUDGET: usize = 200;
/// Smallest accepted packing budget.
pub const MIN_CHUNK_BUDGET: usize = 16;
/// Default longest-edge target for attached images.
pub const DEFAULT_MAX_EDGE_PX: u32 = 1024;
/// Marker the ingester appends to a turn that carries an image.
pub const IMAGE_CUE_MARKER: &str = "[image:";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("duplicate dia_id {0:?}")]
    DuplicateDiaId(String),
    #[error("chunk budget {0} is below the minimum of {MIN_CHUNK_BUDGET}")]
    BudgetTooSmall(usize),
    #[error("failed to read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus {path} is not valid JSON: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Rough subword token count: `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Collapses runs of whitespace into single spaces and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub max_edge_px: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub dia_id: String,
    pub speaker: String,
    pub text: String,
    pub session: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<ImageRef>,
}

impl Utterance {
    /// The line this turn contributes to its chunk's text.
    pub fn chunk_line(&self) -> String {
        let mut line = format!("{}: {}", self.speaker, self.text);
        if let Some(image) = &self.image_ref {
            let label = image.caption.as_deref().unwrap_or("attached image");
            line.push_str(&format!(" {IMAGE_CUE_MARKER} {label}]"));
        }
        line
    }

    /// Dialogue-entry rendering used in prompts: `dia_id- speaker: text`.
    pub fn dialogue_line(&self) -> String {
        format!("{}- {}", self.dia_id, self.chunk_line())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub utterance_ids: Vec<String>,
    pub text: String,
    pub token_estimate: usize,
    pub has_image_cue: bool,
}

/// Half-open chunk range `[start, end)` owned by one session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpan {
    pub start: usize,
    pub end: usize,
}

impl SessionSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// The long-term memory: chunks in corpus order plus the turns they hold.
///
/// Immutable once built; share it by reference across concurrent readers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryStore {
    chunks: Vec<Chunk>,
    utterances: Vec<Utterance>,
    sessions: Vec<(String, SessionSpan)>,
    session_datetimes: HashMap<String, String>,
    by_dia: HashMap<String, usize>,
    chunk_of: HashMap<String, usize>,
}

impl MemoryStore {
    pub(crate) fn from_parts(
        chunks: Vec<Chunk>,
        utterances: Vec<Utterance>,
        sessions: Vec<(String, SessionSpan)>,
        session_datetimes: HashMap<String, String>,
    ) -> Self {
        let by_dia = utterances
            .iter()
            .enumerate()
            .map(|(i, u)| (u.dia_id.clone(), i))
            .collect();
        let chunk_of = chunks
            .iter()
            .flat_map(|c| c.utterance_ids.iter().map(move |id| (id.clone(), c.index)))
            .collect();
        Self {
            chunks,
            utterances,
            sessions,
            session_datetimes,
            by_dia,
            chunk_of,
        }
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn chunk(&self, index: usize) -> Option<&Chunk> {
        self.chunks.get(index)
    }

    /// Utterances in corpus order.
    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn utterance(&self, dia_id: &str) -> Option<&Utterance> {
        self.by_dia.get(dia_id).map(|&i| &self.utterances[i])
    }

    /// Index of the chunk holding `dia_id`.
    pub fn chunk_of(&self, dia_id: &str) -> Option<usize> {
        self.chunk_of.get(dia_id).copied()
    }

    /// Sessions in corpus order with their chunk ranges.
    pub fn sessions(&self) -> &[(String, SessionSpan)] {
        &self.sessions
    }

    pub fn session_span(&self, session: &str) -> Option<SessionSpan> {
        self.sessions
            .iter()
            .find(|(name, _)| name == session)
            .map(|(_, span)| *span)
    }

    pub fn session_datetime(&self, session: &str) -> Option<&str> {
        self.session_datetimes.get(session).map(String::as_str)
    }

    /// Session label of the chunk at `index`.
    pub fn session_of_chunk(&self, index: usize) -> Option<&str> {
        self.sessions
            .iter()
            .find(|(_, span)| span.range().contains(&index))
            .map(|(name, _)| name.as_str())
    }

    /// Renders a chunk as dialogue entries headed by its session and date.
    pub fn render_chunk(&self, index: usize) -> String {
        let Some(chunk) = self.chunks.get(index) else {
            return String::new();
        };
        let mut out = String::new();
        if let Some(session) = self.session_of_chunk(index) {
            match self.session_datetime(session) {
                Some(dt) => out.push_str(&format!("({session}, {dt})\n")),
                None => out.push_str(&format!("({session})\n")),
            }
        }
        let lines: Vec<String> = chunk
            .utterance_ids
            .iter()
            .filter_map(|id| self.utterance(id))
            .map(Utterance::dialogue_line)
            .collect();
        out.push_str(&lines.join("\n"));
        out
    }

    pub fn total_tokens(&self) -> usize {
        self.chunks.iter().map(|c| c.token_estimate).sum()
    }
}

/// Packs a parsed corpus into a [`MemoryStore`].
///
/// Turns are appended to the open chunk until the next one would push it past
/// `chunk_budget`; a turn larger than the budget becomes a chunk of its own.
pub fn ingest(doc: &CorpusDoc, chunk_budget: usize) -> Result<MemoryStore, CorpusError> {
    if chunk_budget < MIN_CHUNK_BUDGET {
        return Err(CorpusError::BudgetTooSmall(chunk_budget));
    }
    let mut seen = HashMap::new();
    let mut utterances = Vec::new();
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut sessions = Vec::new();
    let mut datetimes = HashMap::new();

    for session in &doc.sessions {
        if let Some(dt) = &session.datetime {
            datetimes.insert(session.session_id.clone(), dt.clone());
        }
        let start = chunks.len();
        let mut open: Option<Chunk> = None;
        for turn in &session.turns {
            if seen.insert(turn.dia_id.clone(), ()).is_some() {
                return Err(CorpusError::DuplicateDiaId(turn.dia_id.clone()));
            }
            let utterance = Utterance {
                dia_id: turn.dia_id.clone(),
                speaker: turn.speaker.clone(),
                text: normalize_whitespace(&turn.text),
                session: session.session_id.clone(),
                timestamp: session.datetime.clone(),
                image_ref: turn.img_url.as_ref().map(|uri| ImageRef {
                    uri: uri.clone(),
                    caption: turn.caption.clone(),
                    max_edge_px: DEFAULT_MAX_EDGE_PX,
                }),
            };
            let line = utterance.chunk_line();
            let cost = estimate_tokens(&line);
            if let Some(chunk) = open.as_mut() {
                if chunk.token_estimate + cost > chunk_budget {
                    chunks.push(open.take().expect("open chunk"));
                }
            }
            let chunk = open.get_or_insert_with(|| Chunk {
                index: chunks.len(),
                utterance_ids: Vec::new(),
                text: String::new(),
                token_estimate: 0,
                has_image_cue: false,
            });
            if !chunk.text.is_empty() {
                chunk.text.push('\n');
            }
            chunk.text.push_str(&line);
            chunk.token_estimate += cost;
            chunk.utterance_ids.push(utterance.dia_id.clone());
            chunk.has_image_cue |= utterance.image_ref.is_some();
            utterances.push(utterance);
        }
        if let Some(chunk) = open.take() {
            chunks.push(chunk);
        }
        sessions.push((
            session.session_id.clone(),
            SessionSpan {
                start,
                end: chunks.len(),
            },
        ));
    }

    Ok(MemoryStore::from_parts(chunks, utterances, sessions, datetimes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(id: &str, text: &str) -> TurnDoc {
        TurnDoc {
            dia_id: id.into(),
            speaker: "A".into(),
            text: text.into(),
            img_url: None,
            caption: None,
        }
    }

    fn doc(turns: Vec<TurnDoc>) -> CorpusDoc {
        CorpusDoc {
            sessions: vec![SessionDoc {
                session_id: "s1".into(),
                datetime: None,
                turns,
            }],
        }
    }

    /// A turn whose chunk line ("A: " + body) estimates to exactly `tokens`.
    fn sized(id: &str, tokens: usize) -> TurnDoc {
        turn(id, &"x".repeat(tokens * 4 - 3))
    }

    #[test]
    fn estimator_examples() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcdefgh"), 2);
        assert_eq!(estimate_tokens("abcdefghi"), 3);
    }

    #[test]
    fn greedy_packing_three_by_eighty() {
        let store = ingest(&doc(vec![sized("u1", 80), sized("u2", 80), sized("u3", 80)]), 200).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.chunks()[0].utterance_ids, vec!["u1", "u2"]);
        assert_eq!(store.chunks()[1].utterance_ids, vec!["u3"]);
        assert_eq!(store.chunks()[0].token_estimate, 160);
    }

    #[test]
    fn empty_corpus_yields_empty_store() {
        let store = ingest(&CorpusDoc { sessions: vec![] }, 200).unwrap();
        assert!(store.is_empty());
        let store = ingest(&doc(vec![]), 200).unwrap();
        assert!(store.is_empty());
        assert_eq!(store.sessions()[0].1, SessionSpan { start: 0, end: 0 });
    }

    #[test]
    fn oversized_turn_is_never_split() {
        let store = ingest(&doc(vec![sized("big", 500)]), 200).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.chunks()[0].token_estimate, 500);
    }

    #[test]
    fn oversized_turn_between_small_ones() {
        let store = ingest(&doc(vec![sized("a", 10), sized("b", 500), sized("c", 10)]), 200).unwrap();
        let ids: Vec<_> = store.chunks().iter().map(|c| c.utterance_ids.clone()).collect();
        assert_eq!(ids, vec![vec!["a"], vec!["b"], vec!["c"]]);
    }

    #[test]
    fn duplicate_dia_id_is_rejected() {
        let err = ingest(&doc(vec![turn("D1:1", "hi"), turn("D1:1", "again")]), 200).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateDiaId(id) if id == "D1:1"));
    }

    #[test]
    fn budget_floor() {
        assert!(matches!(ingest(&doc(vec![]), 15), Err(CorpusError::BudgetTooSmall(15))));
    }

    #[test]
    fn chunks_do_not_span_sessions() {
        let doc = CorpusDoc {
            sessions: vec![
                SessionDoc {
                    session_id: "s1".into(),
                    datetime: Some("1 May 2023".into()),
                    turns: vec![turn("a", "one")],
                },
                SessionDoc {
                    session_id: "s2".into(),
                    datetime: None,
                    turns: vec![turn("b", "two"), turn("c", "three")],
                },
            ],
        };
        let store = ingest(&doc, 200).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.session_span("s1"), Some(SessionSpan { start: 0, end: 1 }));
        assert_eq!(store.session_span("s2"), Some(SessionSpan { start: 1, end: 2 }));
        assert_eq!(store.session_of_chunk(1), Some("s2"));
        assert_eq!(store.utterance("a").unwrap().timestamp.as_deref(), Some("1 May 2023"));
        assert!(store.render_chunk(0).starts_with("(s1, 1 May 2023)\na- A: one"));
    }

    #[test]
    fn image_turn_sets_cue() {
        let mut t = turn("a", "look at this");
        t.img_url = Some("img/dog.png".into());
        t.caption = Some("a dog on a beach".into());
        let store = ingest(&doc(vec![t, turn("b", "nice")]), 200).unwrap();
        let chunk = &store.chunks()[0];
        assert!(chunk.has_image_cue);
        assert!(chunk.text.contains("[image: a dog on a beach]"));
        assert_eq!(store.utterance("a").unwrap().image_ref.as_ref().unwrap().max_edge_px, 1024);
    }
}
