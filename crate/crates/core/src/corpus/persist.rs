//! `store.v1.jsonl`: one header record followed by one record per line.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Chunk, MemoryStore, SessionSpan, Utterance};

pub const STORE_FORMAT: &str = "memloop-store";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O failed for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: unsupported store format version {found} (expected {STORE_VERSION})")]
    Version { path: PathBuf, found: u32 },
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    chunks: usize,
    utterances: usize,
    sessions: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Session {
        id: String,
        start: usize,
        end: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        datetime: Option<String>,
    },
    Utterance(Utterance),
    Chunk(Chunk),
}

pub fn save_store(store: &MemoryStore, path: &Path) -> Result<(), StoreError> {
    let io = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let header = Header {
        format: STORE_FORMAT.into(),
        version: STORE_VERSION,
        chunks: store.len(),
        utterances: store.utterances().len(),
        sessions: store.sessions().len(),
    };
    let mut write = |line: String| writeln!(out, "{line}").map_err(io);
    write(serde_json::to_string(&header).expect("header serializes"))?;
    for (id, span) in store.sessions() {
        let record = Record::Session {
            id: id.clone(),
            start: span.start,
            end: span.end,
            datetime: store.session_datetime(id).map(str::to_string),
        };
        write(serde_json::to_string(&record).expect("record serializes"))?;
    }
    for u in store.utterances() {
        write(serde_json::to_string(&Record::Utterance(u.clone())).expect("record serializes"))?;
    }
    for c in store.chunks() {
        write(serde_json::to_string(&Record::Chunk(c.clone())).expect("record serializes"))?;
    }
    out.flush().map_err(io)
}

pub fn load_store(path: &Path) -> Result<MemoryStore, StoreError> {
    let file = File::open(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |line: usize, message: String| StoreError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| malformed(1, "empty file".into()))?;
    let first = first.map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| malformed(1, format!("bad header: {e}")))?;
    if header.format != STORE_FORMAT {
        return Err(malformed(1, format!("unknown format {:?}", header.format)));
    }
    if header.version != STORE_VERSION {
        return Err(StoreError::Version {
            path: path.to_path_buf(),
            found: header.version,
        });
    }

    let mut sessions = Vec::new();
    let mut datetimes = HashMap::new();
    let mut utterances = Vec::new();
    let mut chunks = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| malformed(i + 1, e.to_string()))?;
        match record {
            Record::Session {
                id,
                start,
                end,
                datetime,
            } => {
                if let Some(dt) = datetime {
                    datetimes.insert(id.clone(), dt);
                }
                sessions.push((id, SessionSpan { start, end }));
            }
            Record::Utterance(u) => utterances.push(u),
            Record::Chunk(c) => {
                if c.index != chunks.len() {
                    return Err(malformed(i + 1, format!("chunk index {} out of order", c.index)));
                }
                chunks.push(c);
            }
        }
    }
    if chunks.len() != header.chunks
        || utterances.len() != header.utterances
        || sessions.len() != header.sessions
    {
        return Err(malformed(1, "record counts disagree with header".into()));
    }
    Ok(MemoryStore::from_parts(chunks, utterances, sessions, datetimes))
}
