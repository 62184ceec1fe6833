//! The four commands. Each returns the text to print on success.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use memloop_core::controller::{Engine, RunTrace};
use memloop_core::corpus::{ingest, load_store, save_store, CorpusDoc, CorpusError, MemoryStore};
use memloop_core::eval::{evaluate, load_items, EvalError};
use memloop_core::llm::{AgentBackends, LlmBackend, OpenAiBackend, OpenAiConfig, ScriptedBackend};
use memloop_core::metrics::{aggregate, chunk_distance_profile, DistanceProfile};
use memloop_core::prompts::PromptSet;
use memloop_core::retrieval::{RetrievalIndex, RetrieverKind};
use tracing::info;

use crate::config::{BackendProfile, Endpoint, RetrieverChoice, RunConfig};
use crate::error::CliError;

fn openai_backend(role: &str, endpoint: &Endpoint) -> Result<Arc<dyn LlmBackend>, CliError> {
    let base_url = endpoint.base_url.clone().ok_or_else(|| {
        CliError::Backend(format!(
            "no base_url for the {role} backend; set it in the config or MEMLOOP_BASE_URL"
        ))
    })?;
    let model = endpoint.model.clone().ok_or_else(|| {
        CliError::Backend(format!("no model for the {role} backend; set it in the config or MEMLOOP_MODEL"))
    })?;
    let mut config = OpenAiConfig::new(base_url, model);
    config.api_key = std::env::var(&endpoint.api_key_env).ok().filter(|k| !k.is_empty());
    config.vision = endpoint.vision;
    Ok(Arc::new(OpenAiBackend::new(config)))
}

/// Builds one backend per agent role.
pub fn build_backends(config: &RunConfig) -> Result<AgentBackends, CliError> {
    match &config.backend {
        BackendProfile::Scripted(path) => {
            let backend = ScriptedBackend::from_path(path).map_err(|e| CliError::Backend(e.to_string()))?;
            Ok(AgentBackends::uniform(Arc::new(backend)))
        }
        BackendProfile::Openai => {
            let role = |name: &str| openai_backend(name, &config.endpoints[name]);
            let perception = role("perception")?;
            let embedding = match config.retriever {
                RetrieverChoice::Embedding => role("embedding")?,
                RetrieverChoice::Lexical => perception.clone(),
            };
            let vision = if config.loop_config.vision_enabled {
                role("vision")?
            } else {
                perception.clone()
            };
            Ok(AgentBackends {
                perception,
                vision,
                judge: role("judge")?,
                responder: role("responder")?,
                embedding,
            })
        }
    }
}

fn retriever_kind(config: &RunConfig, backends: &AgentBackends) -> Result<RetrieverKind, CliError> {
    Ok(match config.retriever {
        RetrieverChoice::Lexical => RetrieverKind::Lexical,
        RetrieverChoice::Embedding => {
            let dim = config
                .embedding_dim
                .filter(|d| *d > 0)
                .ok_or_else(|| CliError::Input("embedding retriever needs a positive embedding_dim".into()))?;
            let provider = match &config.backend {
                BackendProfile::Openai => config.endpoints["embedding"].model.clone().unwrap_or_default(),
                BackendProfile::Scripted(_) => backends.embedding.name().to_string(),
            };
            RetrieverKind::Embedding { provider, dim }
        }
    })
}

fn corpus_error(e: CorpusError) -> CliError {
    CliError::Input(e.to_string())
}

/// Ingests the corpus and writes the store and index.
pub fn cmd_index(config: &RunConfig) -> Result<String, CliError> {
    let corpus = config
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::Input("no corpus given; pass --corpus or set corpus in the config".into()))?;
    let doc = CorpusDoc::from_path(corpus).map_err(corpus_error)?;
    let store = ingest(&doc, config.chunk_budget).map_err(corpus_error)?;

    let backends = match config.retriever {
        RetrieverChoice::Lexical => None,
        RetrieverChoice::Embedding => Some(build_backends(config)?),
    };
    let kind = match &backends {
        Some(b) => retriever_kind(config, b)?,
        None => RetrieverKind::Lexical,
    };
    let placeholder: Arc<dyn LlmBackend> = Arc::new(ScriptedBackend::new());
    let embedder = backends.as_ref().map_or(placeholder, |b| b.embedding.clone());
    let index = RetrievalIndex::build(&store, &kind, embedder.as_ref())
        .map_err(|e| CliError::Backend(format!("indexing failed: {e}")))?;

    std::fs::create_dir_all(&config.store)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", config.store.display())))?;
    save_store(&store, &config.store_file()).map_err(|e| CliError::Input(e.to_string()))?;
    index.save(&config.index_file()).map_err(|e| CliError::Input(e.to_string()))?;
    info!(chunks = store.len(), "store written");

    let max = store.chunks().iter().map(|c| c.token_estimate).max().unwrap_or(0);
    let mean = if store.is_empty() {
        0.0
    } else {
        store.total_tokens() as f64 / store.len() as f64
    };
    Ok(format!(
        "chunks: {}\nutterances: {}\nsessions: {}\ntokens: total {}, mean {:.1}, max {}\nstore: {}\n",
        store.len(),
        store.utterances().len(),
        store.sessions().len(),
        store.total_tokens(),
        mean,
        max,
        config.store.display()
    ))
}

/// Loaded store, index, prompts and backends.
pub struct Loaded {
    pub store: MemoryStore,
    pub index: RetrievalIndex,
    pub prompts: PromptSet,
    pub backends: AgentBackends,
}

impl Loaded {
    pub fn open(config: &RunConfig) -> Result<Self, CliError> {
        let store = load_store(&config.store_file())
            .map_err(|e| CliError::Input(format!("{e}; run `memloop index` first")))?;
        let index = RetrievalIndex::load(&config.index_file()).map_err(|e| CliError::Input(e.to_string()))?;
        if index.len() != store.len() {
            return Err(CliError::Input(format!(
                "index covers {} chunks but the store has {}; re-run `memloop index`",
                index.len(),
                store.len()
            )));
        }
        let prompts = match &config.prompt_dir {
            Some(dir) => PromptSet::with_overrides(config.responder_style, dir),
            None => Ok(PromptSet::builtin(config.responder_style)),
        }
        .map_err(|e| CliError::Input(e.to_string()))?;
        let backends = build_backends(config)?;
        Ok(Self {
            store,
            index,
            prompts,
            backends,
        })
    }

    pub fn engine<'a>(&'a self, config: &'a RunConfig) -> Engine<'a> {
        Engine {
            store: &self.store,
            index: &self.index,
            backends: &self.backends,
            prompts: &self.prompts,
            config: &config.loop_config,
            image_root: config.image_root.as_deref(),
        }
    }
}

fn evidence_ids(store: &MemoryStore, chunks: &[usize], dia_ids: &[String]) -> Vec<String> {
    let mut ids: BTreeSet<String> = chunks
        .iter()
        .filter_map(|&c| store.chunk(c))
        .flat_map(|c| c.utterance_ids.iter().cloned())
        .collect();
    ids.extend(dia_ids.iter().cloned());
    let mut ids: Vec<String> = ids.into_iter().collect();
    ids.sort_by_key(|id| store.chunk_of(id));
    ids
}

fn write_trace(trace: &RunTrace, dir: &Path) -> Result<PathBuf, CliError> {
    trace
        .write(dir)
        .map_err(|e| CliError::Input(format!("cannot write trace to {}: {e}", dir.display())))
}

/// Answers one question and writes its trace.
pub fn cmd_ask(config: &RunConfig, question: &str, query_id: &str) -> Result<String, CliError> {
    let loaded = Loaded::open(config)?;
    let engine = loaded.engine(config);
    match engine.run(query_id, question) {
        Ok((answer, trace)) => {
            let path = write_trace(&trace, &config.trace_dir)?;
            let evidence = evidence_ids(
                &loaded.store,
                &answer.supporting_evidence.chunks,
                &answer.supporting_evidence.dia_ids,
            );
            Ok(format!(
                "answer: {}\nevidence: {}\niterations: {}\nterminated_by: {}\ntokens: {}\ntrace: {}\n",
                answer.text,
                evidence.join(", "),
                answer.iterations_used,
                answer.terminated_by,
                answer.token_usage.total_tokens(),
                path.display()
            ))
        }
        Err(failure) => {
            write_trace(&failure.trace, &config.trace_dir)?;
            Err(CliError::Backend(format!("run failed: {}", failure.source)))
        }
    }
}

/// Text-table path written next to the JSON report.
pub fn table_path(report: &Path) -> PathBuf {
    report.with_extension("txt")
}

/// Runs every item, then writes the report, its table and per-item traces.
pub fn cmd_eval(config: &RunConfig, items_path: &Path) -> Result<String, CliError> {
    let items = load_items(items_path).map_err(|e| match e {
        EvalError::Io { .. } | EvalError::Parse { .. } => CliError::Input(e.to_string()),
        other => CliError::Backend(other.to_string()),
    })?;
    let loaded = Loaded::open(config)?;
    let engine = loaded.engine(config);
    let results = evaluate(&engine, &items, config.jobs, Some(&config.trace_dir)).map_err(|e| match e {
        EvalError::Trace(_) => CliError::Input(e.to_string()),
        other => CliError::Backend(other.to_string()),
    })?;
    let outcomes: Vec<_> = results.into_iter().map(|(o, _)| o).collect();
    let report = aggregate(&items, &outcomes, &loaded.store).map_err(|e| CliError::Input(e.to_string()))?;

    if let Some(dir) = config.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
    }
    let write = |path: &Path, body: String| {
        std::fs::write(path, body).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
    };
    write(&config.report, report.to_json() + "\n")?;
    let table = report.to_table();
    write(&table_path(&config.report), table.clone())?;

    if report.n_items > 0 && report.n_failed == report.n_items {
        let first = report.items.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(CliError::Backend(format!("every item failed; first error: {first}")));
    }
    Ok(format!("{table}report: {}\n", config.report.display()))
}

/// Reads every trace in `dir`, in file-name order.
pub fn read_traces(dir: &Path) -> Result<Vec<RunTrace>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Input(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".v1.json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Input(format!("no traces in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| RunTrace::read(p).map_err(|e| CliError::Input(format!("bad trace {}: {e}", p.display()))))
        .collect()
}

/// Builds `(retrieved, gold)` chunk pairs: every zoom-in candidate a run saw
/// against the chunks holding the item's gold evidence.
pub fn distance_runs(traces: &[RunTrace], gold: &BTreeMap<String, Vec<String>>, store: &MemoryStore) -> Vec<(Vec<usize>, Vec<usize>)> {
    traces
        .iter()
        .filter_map(|t| {
            let ids = gold.get(&t.query_id)?;
            let gold_chunks: Vec<usize> = ids.iter().filter_map(|id| store.chunk_of(id)).collect();
            let retrieved: BTreeSet<usize> = t.iterations.iter().flat_map(|r| r.candidates.iter().copied()).collect();
            Some((retrieved.into_iter().collect(), gold_chunks))
        })
        .collect()
}

/// Chunk-distance profile of false retrievals across traces.
pub fn cmd_analyze(config: &RunConfig, traces_dir: &Path, gold_path: &Path, out: Option<&Path>) -> Result<(String, DistanceProfile), CliError> {
    let traces = read_traces(traces_dir)?;
    let items = load_items(gold_path).map_err(|e| CliError::Input(e.to_string()))?;
    let store = load_store(&config.store_file()).map_err(|e| CliError::Input(e.to_string()))?;
    let gold: BTreeMap<String, Vec<String>> = items
        .into_iter()
        .filter(|i| !i.evidence_dia_ids.is_empty())
        .map(|i| (i.query_id, i.evidence_dia_ids))
        .collect();
    let runs = distance_runs(&traces, &gold, &store);
    let profile = chunk_distance_profile(&runs);
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| config.store.join("chunk_distance.csv"));
    std::fs::write(&out, profile.to_csv()).map_err(|e| CliError::Input(format!("cannot write {}: {e}", out.display())))?;
    let text = format!(
        "traces: {}\nscored runs: {}\n{}\ncsv: {}\n",
        traces.len(),
        runs.len() - profile.skipped_runs,
        profile.summary(),
        out.display()
    );
    Ok((text, profile))
}
