//! Run configuration: built-in defaults, then a TOML file, then flags.
//!
//! Resolution is pure over its inputs (file text, flags, environment map), so
//! the same inputs always yield the same [`RunConfig`]. Relative paths in a
//! config file resolve against the file's directory. API keys are never
//! stored; only the name of the variable holding them is.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use memloop_core::controller::LoopConfig;
use memloop_core::corpus::DEFAULT_CHUNK_BUDGET;
use memloop_core::prompts::ResponderStyle;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const ROLES: [&str; 5] = ["perception", "vision", "judge", "responder", "embedding"];
pub const DEFAULT_KEY_ENV: &str = "MEMLOOP_API_KEY";
pub const STORE_FILE: &str = "store.v1.jsonl";
pub const INDEX_FILE: &str = "index.v1.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverChoice {
    Lexical,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", content = "path", rename_all = "snake_case")]
pub enum BackendProfile {
    Openai,
    Scripted(PathBuf),
}

impl BackendProfile {
    fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        match text.split_once(':') {
            None if text == "openai" => Ok(BackendProfile::Openai),
            Some(("scripted", path)) if !path.is_empty() => Ok(BackendProfile::Scripted(base.join(path))),
            _ => Err(CliError::Input(format!(
                "backend profile {text:?} must be \"openai\" or \"scripted:<path>\""
            ))),
        }
    }
}

/// One endpoint in the config file; omitted fields inherit from
/// `[backends.default]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointDoc {
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub vision: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Endpoint {
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: String,
    pub vision: bool,
}

/// Config file layout.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub retriever: Option<RetrieverChoice>,
    pub embedding_dim: Option<usize>,
    pub chunk_budget: Option<usize>,
    pub backend_profile: Option<String>,
    pub prompt_dir: Option<PathBuf>,
    pub responder_style: Option<ResponderStyle>,
    pub trace_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub jobs: Option<usize>,
    #[serde(rename = "loop")]
    pub loop_config: Option<LoopConfig>,
    #[serde(default)]
    pub backends: BTreeMap<String, EndpointDoc>,
}

/// Flags shared by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonFlags {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Corpus JSON to ingest.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Directory holding the store and index files.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Candidates per retrieval.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Zoom-out window radius in chunks.
    #[arg(long, global = true)]
    pub w: Option<usize>,
    /// Maximum loop iterations.
    #[arg(long, global = true)]
    pub j: Option<u32>,
    #[arg(long, global = true, value_enum)]
    pub retriever: Option<RetrieverChoice>,
    /// `openai` or `scripted:<path>`.
    #[arg(long, global = true)]
    pub backend_profile: Option<String>,
    /// Parallel eval workers.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub trace_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub store: PathBuf,
    pub retriever: RetrieverChoice,
    pub embedding_dim: Option<usize>,
    pub chunk_budget: usize,
    #[serde(rename = "loop")]
    pub loop_config: LoopConfig,
    pub backend: BackendProfile,
    pub endpoints: BTreeMap<String, Endpoint>,
    pub prompt_dir: Option<PathBuf>,
    pub responder_style: ResponderStyle,
    pub trace_dir: PathBuf,
    pub report: PathBuf,
    pub image_root: Option<PathBuf>,
    pub jobs: usize,
}

impl RunConfig {
    pub fn store_file(&self) -> PathBuf {
        self.store.join(STORE_FILE)
    }

    pub fn index_file(&self) -> PathBuf {
        self.store.join(INDEX_FILE)
    }

    /// Resolves from flags, reading `--config` if given and taking the
    /// process environment.
    pub fn from_flags(flags: &CommonFlags) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
                Some((text, path.parent().map(Path::to_path_buf).unwrap_or_default()))
            }
            None => None,
        };
        let env: BTreeMap<String, String> = std::env::vars().filter(|(k, _)| k.starts_with("MEMLOOP_")).collect();
        resolve(file.as_ref().map(|(t, d)| (t.as_str(), d.as_path())), flags, &env)
    }
}

fn env_lookup(env: &BTreeMap<String, String>, role: &str, field: &str) -> Option<String> {
    env.get(&format!("MEMLOOP_{}_{field}", role.to_uppercase()))
        .or_else(|| env.get(&format!("MEMLOOP_{field}")))
        .filter(|v| !v.is_empty())
        .cloned()
}

/// Pure resolution: `file` is the config text and its directory.
pub fn resolve(
    file: Option<(&str, &Path)>,
    flags: &CommonFlags,
    env: &BTreeMap<String, String>,
) -> Result<RunConfig, CliError> {
    let (doc, base) = match file {
        Some((text, dir)) => {
            let doc: FileConfig =
                toml::from_str(text).map_err(|e| CliError::Input(format!("invalid config: {e}")))?;
            (doc, dir.to_path_buf())
        }
        None => (FileConfig::default(), PathBuf::new()),
    };
    let rel = |p: &PathBuf| base.join(p);

    for role in doc.backends.keys() {
        if role != "default" && !ROLES.contains(&role.as_str()) {
            return Err(CliError::Input(format!("unknown backend role {role:?}")));
        }
    }

    let corpus = flags.corpus.clone().or_else(|| doc.corpus.as_ref().map(rel));
    let store = flags
        .store
        .clone()
        .or_else(|| doc.store.as_ref().map(rel))
        .unwrap_or_else(|| PathBuf::from("memloop-store"));

    let mut loop_config = doc.loop_config.clone().unwrap_or_default();
    if let Some(k) = flags.k {
        loop_config.top_k = k;
    }
    if let Some(w) = flags.w {
        loop_config.window_w = w;
    }
    if let Some(j) = flags.j {
        loop_config.max_iterations = j;
    }
    loop_config
        .validate()
        .map_err(|e| CliError::Input(format!("invalid loop config: {e}")))?;

    let backend = match (&flags.backend_profile, &doc.backend_profile) {
        (Some(flag), _) => BackendProfile::parse(flag, Path::new(""))?,
        (None, Some(text)) => BackendProfile::parse(text, &base)?,
        (None, None) => BackendProfile::Openai,
    };

    let default_doc = doc.backends.get("default").cloned().unwrap_or_default();
    let endpoints = ROLES
        .iter()
        .map(|role| {
            let own = doc.backends.get(*role).cloned().unwrap_or_default();
            let pick = |a: &Option<String>, b: &Option<String>| a.clone().or_else(|| b.clone());
            let endpoint = Endpoint {
                base_url: pick(&own.base_url, &default_doc.base_url).or_else(|| env_lookup(env, role, "BASE_URL")),
                model: pick(&own.model, &default_doc.model).or_else(|| env_lookup(env, role, "MODEL")),
                api_key_env: pick(&own.api_key_env, &default_doc.api_key_env)
                    .unwrap_or_else(|| DEFAULT_KEY_ENV.to_string()),
                vision: own.vision.or(default_doc.vision).unwrap_or(*role == "vision"),
            };
            (role.to_string(), endpoint)
        })
        .collect();

    let jobs = flags.jobs.or(doc.jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(CliError::Input("jobs must be at least 1".into()));
    }
    let chunk_budget = doc.chunk_budget.unwrap_or(DEFAULT_CHUNK_BUDGET);
    let trace_dir = flags
        .trace_dir
        .clone()
        .or_else(|| doc.trace_dir.as_ref().map(rel))
        .unwrap_or_else(|| store.join("trace"));
    let report = flags
        .report
        .clone()
        .or_else(|| doc.report.as_ref().map(rel))
        .unwrap_or_else(|| store.join("report.v1.json"));
    let image_root = doc
        .image_root
        .as_ref()
        .map(rel)
        .or_else(|| corpus.as_ref().and_then(|c| c.parent().map(Path::to_path_buf)));

    Ok(RunConfig {
        corpus,
        store,
        retriever: flags.retriever.or(doc.retriever).unwrap_or(RetrieverChoice::Lexical),
        embedding_dim: doc.embedding_dim,
        chunk_budget,
        loop_config,
        backend,
        endpoints,
        prompt_dir: doc.prompt_dir.as_ref().map(rel),
        responder_style: doc.responder_style.unwrap_or_default(),
        trace_dir,
        report,
        image_root,
        jobs,
    })
}
