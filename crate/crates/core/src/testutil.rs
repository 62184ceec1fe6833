//! Fixtures shared by unit tests.

use crate::corpus::{ingest, CorpusDoc, MemoryStore, SessionDoc, TurnDoc};

pub(crate) fn turn(dia_id: &str, text: &str) -> TurnDoc {
    TurnDoc {
        dia_id: dia_id.into(),
        speaker: "A".into(),
        text: text.into(),
        img_url: None,
        caption: None,
    }
}

/// One chunk per text: each turn is padded past half the 16-token budget.
pub(crate) fn store_of(texts: &[&str]) -> MemoryStore {
    let turns = texts
        .iter()
        .enumerate()
        .map(|(i, t)| turn(&format!("D1:{i}"), &format!("{t} {}", ".".repeat(40))))
        .collect();
    let doc = CorpusDoc {
        sessions: vec![SessionDoc {
            session_id: "s".into(),
            datetime: None,
            turns,
        }],
    };
    let store = ingest(&doc, 16).unwrap();
    assert_eq!(store.len(), texts.len());
    store
}
