//! Batch evaluation over a question set.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;
use tracing::info;

use crate::controller::{Engine, RunTrace};
use crate::metrics::{EvalItem, ItemOutcome};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read items {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("items file {path} is malformed: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("cannot write trace: {0}")]
    Trace(#[source] std::io::Error),
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum ItemsDoc {
    List(Vec<EvalItem>),
    Wrapped { items: Vec<EvalItem> },
}

/// Reads eval items from a JSON array or an `{"items": [...]}` object.
pub fn load_items(path: &Path) -> Result<Vec<EvalItem>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let doc: ItemsDoc = serde_json::from_str(&text).map_err(|source| EvalError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    Ok(match doc {
        ItemsDoc::List(items) | ItemsDoc::Wrapped { items } => items,
    })
}

/// Runs one item, folding failures into the outcome.
pub fn run_item(engine: &Engine<'_>, item: &EvalItem) -> (ItemOutcome, RunTrace) {
    match engine.run(&item.query_id, &item.question) {
        Ok((answer, trace)) => (
            ItemOutcome {
                query_id: item.query_id.clone(),
                iterations: answer.iterations_used,
                token_usage: answer.token_usage.clone(),
                answer: Some(answer),
                error: None,
            },
            trace,
        ),
        Err(failure) => (
            ItemOutcome {
                query_id: item.query_id.clone(),
                answer: None,
                iterations: failure.trace.iterations.len() as u32,
                token_usage: failure.trace.token_usage.clone(),
                error: Some(failure.source.to_string()),
            },
            *failure.trace,
        ),
    }
}

/// Runs every item on up to `jobs` threads. Output follows item order and
/// does not depend on `jobs`. Traces are written to `trace_dir` if given.
pub fn evaluate(
    engine: &Engine<'_>,
    items: &[EvalItem],
    jobs: usize,
    trace_dir: Option<&Path>,
) -> Result<Vec<(ItemOutcome, RunTrace)>, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let results: Vec<(ItemOutcome, RunTrace)> =
        pool.install(|| items.par_iter().map(|item| run_item(engine, item)).collect());
    if let Some(dir) = trace_dir {
        for (_, trace) in &results {
            trace.write(dir).map_err(EvalError::Trace)?;
        }
    }
    info!(items = items.len(), jobs, "evaluation finished");
    Ok(results)
}
