//! Iterative memory-reasoning engine for question answering over long
//! conversations.
//!
//! A question is answered by a bounded loop: perceive the long-term store
//! through three views (focal top-K retrieval, positional window expansion,
//! visual grounding), fold what was found into a short-term memory, and let a
//! judge agent decide whether the memory suffices or how to rewrite the query
//! for the next round. A responder agent produces the final answer.
//!
//! Modules, bottom-up:
//! - [`corpus`]: ingestion, chunking and the persisted memory store
//! - [`retrieval`]: lexical and embedding top-K search
//! - [`llm`]: backend abstraction, scripted backend, JSON recovery
//! - [`prompts`]: agent prompt templates
//! - [`perception`]: zoom-in, zoom-out and visual views
//! - [`state`]: short-term memory and its evolution step
//! - [`controller`]: the judge, query rewriting and the run loop
//! - [`metrics`]: F1, recall, chunk-distance analysis and reports
//! - [`eval`]: batch evaluation over question sets

pub mod controller;
pub mod corpus;
pub mod eval;
pub mod llm;
pub mod metrics;
pub mod perception;
pub mod prompts;
pub mod retrieval;
pub mod state;

#[cfg(test)]
mod testutil;

pub use controller::{run, Answer, Engine, LoopConfig, RunTrace, TerminatedBy};
pub use corpus::{ingest, estimate_tokens, MemoryStore};
pub use retrieval::{RetrievalHit, RetrievalIndex, RetrieverKind};
