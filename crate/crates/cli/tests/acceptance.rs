//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. The live smoke check runs only when
//! `MEMLOOP_LIVE_BASE_URL`, `MEMLOOP_LIVE_MODEL` and `MEMLOOP_LIVE_API_KEY`
//! are set, and reports SKIP otherwise.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use memloop_core::controller::{full_context_prompt_tokens, Engine, LoopConfig, QueryAction, RunTrace};
use memloop_core::corpus::{ingest, CorpusDoc, MemoryStore, SessionDoc, TurnDoc};
use memloop_core::llm::{AgentBackends, AgentTag, ChatRequest, LlmBackend, ScriptResponse, ScriptedBackend};
use memloop_core::metrics::{chunk_distance_profile, f1, recall};
use memloop_core::perception::{expand_windows, WindowSpan};
use memloop_core::prompts::PromptSet;
use memloop_core::retrieval::{RetrievalIndex, RetrieverKind};
use memloop_core::state::EvidenceItem;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// One corpus turn per chunk: turns are padded past half the budget with
/// punctuation, which carries no search terms.
fn one_per_chunk(texts: &[String]) -> MemoryStore {
    let turns = texts
        .iter()
        .enumerate()
        .map(|(i, t)| TurnDoc {
            dia_id: format!("D1:{i}"),
            speaker: "A".into(),
            text: format!("{t} {}", ".".repeat(40)),
            img_url: None,
            caption: None,
        })
        .collect();
    let doc = CorpusDoc {
        sessions: vec![SessionDoc {
            session_id: "s1".into(),
            datetime: None,
            turns,
        }],
    };
    let store = ingest(&doc, 16).expect("ingest");
    assert_eq!(store.len(), texts.len());
    store
}

struct Rig {
    store: MemoryStore,
    index: RetrievalIndex,
    backends: AgentBackends,
    prompts: PromptSet,
    config: LoopConfig,
}

impl Rig {
    fn new(store: MemoryStore, backend: ScriptedBackend, config: LoopConfig) -> Self {
        let index = RetrievalIndex::build(&store, &RetrieverKind::Lexical, &ScriptedBackend::new()).expect("index");
        Self {
            store,
            index,
            backends: AgentBackends::uniform(Arc::new(backend) as Arc<dyn LlmBackend>),
            prompts: PromptSet::default(),
            config,
        }
    }

    fn engine(&self) -> Engine<'_> {
        Engine {
            store: &self.store,
            index: &self.index,
            backends: &self.backends,
            prompts: &self.prompts,
            config: &self.config,
            image_root: None,
        }
    }

    fn hits(&self, q: &str, k: usize) -> Vec<usize> {
        self.index
            .search(q, k, self.backends.embedding.as_ref())
            .expect("search")
            .into_iter()
            .map(|h| h.chunk_index)
            .collect()
    }
}

fn verdict(can_answer: bool, action: &str, queries: &[String]) -> String {
    json!({"thinking": "", "useful_id": [], "can_answer": can_answer, "action": action, "new_queries": queries}).to_string()
}

fn selecting() -> ScriptedBackend {
    ScriptedBackend::new()
        .on(AgentTag::ZoomIn, ScriptResponse::SelectAll)
        .on(AgentTag::ZoomOut, ScriptResponse::SelectAll)
        .on_text(AgentTag::Responder, "answer")
}

fn hash_of(parts: &[&str]) -> u64 {
    let mut h = DefaultHasher::new();
    parts.hash(&mut h);
    h.finish()
}

/// Root question as shown on the judge prompt's first line.
fn root_of(req: &ChatRequest) -> String {
    let text = req.prompt_text();
    let first = text.lines().next().unwrap_or_default();
    first.strip_prefix("Query: ").unwrap_or(first).to_string()
}

fn random_corpus(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    const VOCAB: &[&str] = &[
        "river", "garden", "piano", "coffee", "mountain", "letter", "bicycle", "winter", "market", "novel", "school",
        "concert", "kitchen", "harbor", "forest", "camera", "painting", "island", "festival", "bakery",
    ];
    (0..n)
        .map(|i| {
            let words: Vec<&str> = (0..4).map(|_| *VOCAB.choose(rng).unwrap()).collect();
            format!("{} tag{i}", words.join(" "))
        })
        .collect()
}

/// Every trace from the scripted suites, for the state check.
#[derive(Default)]
struct Collected {
    traces: Vec<RunTrace>,
}

fn loop_boundedness(c: &mut Collected) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = one_per_chunk(&random_corpus(&mut rng, 200));
    // Sufficiency arrives at a per-question step in 1..=12; past 8 the cap
    // must stop the run.
    let backend = selecting().on_fn(AgentTag::Judge, |req| {
        let root = root_of(req);
        let stop = 1 + (hash_of(&[root.as_str()]) % 12) as u32;
        if req.meta.step >= stop {
            verdict(true, "none", &[])
        } else {
            verdict(false, "Break", &[format!("{root} part {}", req.meta.step)])
        }
    });
    let rig = Rig::new(store, backend, LoopConfig::default());
    let started = Instant::now();
    let mut violations = 0;
    let mut capped = 0;
    for i in 0..50 {
        let q = format!("garden piano question {i}");
        let (answer, trace) = rig.engine().run(&format!("b{i}"), &q).map_err(|e| e.to_string())?;
        if answer.iterations_used > 8 || trace.iterations.len() != answer.iterations_used as usize {
            violations += 1;
        }
        capped += (answer.iterations_used == 8) as usize;
        c.traces.push(trace);
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(violations == 0, "{violations} violations");
    ensure!(secs < 10.0, "took {secs:.2}s");
    ensure!(capped > 0, "no run reached the cap; suite is not exercising it");
    Ok(format!("50 runs, 0 violations, {capped} at cap, {secs:.2}s"))
}

fn single_shot_reduction(c: &mut Collected) -> Outcome {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.gen_range(20..120);
        let store = one_per_chunk(&random_corpus(&mut rng, n));
        let config = LoopConfig {
            top_k: rng.gen_range(1..12),
            window_w: rng.gen_range(0..6),
            ..Default::default()
        };
        let rig = Rig::new(store, selecting().on_text(AgentTag::Judge, verdict(true, "none", &[])), config);
        let q = "river coffee market";
        let (answer, trace) = rig.engine().run("s", q).map_err(|e| e.to_string())?;
        // Oracle: select-all zoom-in keeps the top-K; select-all zoom-out
        // keeps every index within W of one of them.
        let seeds = rig.hits(q, rig.config.top_k);
        let w = rig.config.window_w;
        let expected: BTreeSet<usize> = (0..rig.store.len())
            .filter(|i| seeds.iter().any(|s| s.abs_diff(*i) <= w))
            .collect();
        let got: BTreeSet<usize> = answer.supporting_evidence.chunks.iter().copied().collect();
        ensure!(answer.iterations_used == 1, "seed {seed}: {} iterations", answer.iterations_used);
        ensure!(got == expected, "seed {seed}: evidence {got:?} != {expected:?}");
        c.traces.push(trace);
    }
    Ok("20 fixtures, evidence = zoom-in ∪ zoom-out of the first query".into())
}

fn multi_step_dominance(c: &mut Collected) -> Outcome {
    const GROUPS: [&str; 3] = ["lighthouse", "orchard", "glacier"];
    let mut texts = Vec::new();
    let mut gold = Vec::new();
    for i in 0..120 {
        if i % 4 == 1 && gold.len() < 30 {
            let g = GROUPS[gold.len() % 3];
            gold.push(format!("D1:{i}"));
            texts.push(format!("{g} memory fragment e{i}"));
        } else {
            texts.push(format!("small talk f{i}"));
        }
    }
    ensure!(gold.len() == 30, "planted {} chunks", gold.len());
    let store = one_per_chunk(&texts);
    let root = "lighthouse orchard glacier".to_string();
    let backend = selecting().on_fn(AgentTag::Judge, |req| match req.meta.step {
        1 => verdict(false, "Break", &["lighthouse".to_string()]),
        2 => verdict(false, "Delete", &["orchard".to_string()]),
        3 => verdict(false, "Delete", &["glacier".to_string()]),
        _ => verdict(true, "none", &[]),
    });
    let config = LoopConfig {
        top_k: 10,
        window_w: 0,
        ..Default::default()
    };
    let rig = Rig::new(store, backend, config);

    let mut best_single: f64 = 0.0;
    let mut probes: Vec<String> = vec![root.clone()];
    probes.extend(GROUPS.iter().map(|g| g.to_string()));
    probes.push("lighthouse orchard".into());
    probes.push("memory fragment".into());
    for q in &probes {
        let r = recall(&rig.hits(q, 10), &gold, &rig.store).map_err(|e| e.to_string())?;
        best_single = best_single.max(r);
    }
    ensure!(best_single <= 10.0 / 30.0, "single search recall {best_single}");
    let (answer, trace) = rig.engine().run("m", &root).map_err(|e| e.to_string())?;
    let full = recall(&answer.supporting_evidence.chunks, &gold, &rig.store).map_err(|e| e.to_string())?;
    ensure!(full == 1.0, "loop recall {full}");
    ensure!(answer.iterations_used <= 8, "iterations {}", answer.iterations_used);
    c.traces.push(trace);
    Ok(format!(
        "best single-search recall {best_single:.4} <= {:.4}; loop recall {full:.1} in {} iterations",
        10.0 / 30.0,
        answer.iterations_used
    ))
}

fn neighborhood_recovery(c: &mut Collected) -> Outcome {
    let mut texts: Vec<String> = (0..200).map(|i| format!("filler chatter f{i}")).collect();
    let mut items = Vec::new();
    for (slot, offset) in [1i64, 2, 3, 4, -1, -2, -3, -4].into_iter().enumerate() {
        let anchor = 10 + slot * 22;
        let gold = (anchor as i64 + offset) as usize;
        texts[anchor] = format!("kestrel{slot} sighting mentioned");
        texts[gold] = format!("the answer lies here g{slot}");
        items.push((format!("when was kestrel{slot} seen"), format!("D1:{gold}")));
    }
    let store = one_per_chunk(&texts);
    let mut summary = Vec::new();
    for (w, want) in [(0usize, 0.0), (4, 1.0)] {
        let config = LoopConfig {
            window_w: w,
            ..Default::default()
        };
        let rig = Rig::new(
            store.clone(),
            selecting().on_text(AgentTag::Judge, verdict(true, "none", &[])),
            config,
        );
        let mut total = 0.0;
        for (i, (q, gold)) in items.iter().enumerate() {
            let (answer, trace) = rig.engine().run(&format!("n{w}-{i}"), q).map_err(|e| e.to_string())?;
            let r = recall(&answer.supporting_evidence.chunks, std::slice::from_ref(gold), &rig.store)
                .map_err(|e| e.to_string())?;
            ensure!(r == want, "W={w}, item {i}: recall {r}, expected {want}");
            total += r;
            c.traces.push(trace);
        }
        summary.push(format!("W={w} recall {:.1}", total / items.len() as f64));
    }
    Ok(format!("{} neighbor items; {}", items.len(), summary.join(", ")))
}

fn brute_windows(seeds: &[usize], w: usize, size: usize) -> Vec<WindowSpan> {
    let covered: Vec<bool> = (0..size).map(|i| seeds.iter().any(|s| s.abs_diff(i) <= w)).collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < size {
        if covered[i] {
            let lo = i;
            while i + 1 < size && covered[i + 1] {
                i += 1;
            }
            spans.push(WindowSpan { lo, hi: i });
        }
        i += 1;
    }
    spans
}

fn window_oracle(_: &mut Collected) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in 0..1000 {
        let size = rng.gen_range(1..400);
        let w = rng.gen_range(0..25);
        let n = rng.gen_range(0..15);
        let seeds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..size)).collect();
        let got = expand_windows(&seeds, w, size);
        let want = brute_windows(&seeds, w, size);
        ensure!(got == want, "triple {t}: seeds {seeds:?} w {w} size {size}: {got:?} != {want:?}");
    }
    Ok("1000 random triples equal".into())
}

fn f1_oracle(_: &mut Collected) -> Outcome {
    let cases: [(&str, &str, f64); 15] = [
        ("Paris", "paris.", 1.0),
        ("blue car", "red car", 0.5),
        ("", "x", 0.0),
        ("", "", 1.0),
        ("The cat", "cat", 1.0),
        ("big red dog", "red dog", 0.8),
        ("7 May 2023", "May 7, 2023", 1.0),
        ("the the the", "x", 0.0),
        ("dog dog cat", "dog cat cat", 2.0 / 3.0),
        ("New York City", "new york", 0.8),
        ("counseling", "mental health counseling", 0.5),
        ("last Saturday", "The Saturday before 25 May 2023", 2.0 / 7.0),
        ("a painting of a lake", "a lake sunrise", 0.4),
        ("apple banana", "cherry", 0.0),
        ("one two three four", "two four six", 4.0 / 7.0),
    ];
    for (pred, gold, want) in cases {
        let got = f1(pred, gold);
        ensure!((got - want).abs() <= 1e-9, "f1({pred:?}, {gold:?}) = {got}, expected {want}");
    }
    Ok("15 pairs within 1e-9".into())
}

fn distance_oracle(_: &mut Collected) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut with_false = 0;
    for t in 0..200 {
        let size = rng.gen_range(2..1000);
        let runs: Vec<(Vec<usize>, Vec<usize>)> = (0..rng.gen_range(1..6))
            .map(|_| {
                let retrieved = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0..size)).collect();
                let gold = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..size)).collect();
                (retrieved, gold)
            })
            .collect();
        let mut want: BTreeMap<usize, usize> = BTreeMap::new();
        for (retrieved, gold) in &runs {
            let mut seen = Vec::new();
            for r in retrieved {
                if gold.contains(r) || seen.contains(r) {
                    continue;
                }
                seen.push(*r);
                let d = gold.iter().map(|g| g.abs_diff(*r)).min().unwrap();
                *want.entry(d).or_default() += 1;
            }
        }
        let p = chunk_distance_profile(&runs);
        ensure!(p.histogram == want, "fixture {t}: histogram differs");
        let total: usize = want.values().sum();
        let buckets = [
            want.range(1..=10).map(|(_, n)| n).sum::<usize>(),
            want.range(11..=100).map(|(_, n)| n).sum::<usize>(),
            want.range(101..).map(|(_, n)| n).sum::<usize>(),
        ];
        let got: Vec<usize> = p.buckets.iter().map(|b| b.count).collect();
        ensure!(got == buckets, "fixture {t}: buckets {got:?} != {buckets:?}");
        if total > 0 {
            with_false += 1;
            let share: f64 = p.buckets.iter().map(|b| b.share_pct).sum();
            ensure!((share - 100.0).abs() < 1e-9, "fixture {t}: shares sum to {share}");
            let rows = p.rows();
            ensure!((rows.last().unwrap().2 - 100.0).abs() < 1e-9, "fixture {t}: cumulative ends below 100");
            ensure!(rows.windows(2).all(|w| w[0].2 <= w[1].2), "fixture {t}: cumulative decreases");
        }
    }
    Ok(format!("200 fixtures equal ({with_false} with false retrievals); shares sum to 100%"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn memloop(args: &[&str], env: &[(&str, &str)]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_memloop"))
        .args(args)
        .env_clear()
        .envs(env.iter().copied())
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "memloop {args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn determinism(_: &mut Collected) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = fixture("memloop.toml");
    let config = config.to_str().unwrap();
    let store = tmp.path().join("store");
    let store = store.to_str().unwrap();
    memloop(&["--config", config, "--store", store, "index"], &[])?;
    let items = fixture("items.json");
    let mut snaps = Vec::new();
    for (label, jobs) in [("a1", "1"), ("b1", "1"), ("a4", "4"), ("b4", "4")] {
        let out = tmp.path().join(label);
        let report = out.join("report.v1.json");
        let traces = out.join("trace");
        memloop(
            &[
                "--config",
                config,
                "--store",
                store,
                "--jobs",
                jobs,
                "--report",
                report.to_str().unwrap(),
                "--trace-dir",
                traces.to_str().unwrap(),
                "eval",
                items.to_str().unwrap(),
            ],
            &[],
        )?;
        snaps.push((label, snapshot(&out)));
    }
    let files = snaps[0].1.len();
    ensure!(files >= 6, "only {files} output files");
    for (label, snap) in &snaps[1..] {
        ensure!(*snap == snaps[0].1, "outputs of run {label} differ from run a1");
    }
    Ok(format!("{files} files byte-identical across 2 runs at --jobs 1 and 2 at --jobs 4"))
}

fn monotone_state(c: &mut Collected) -> Outcome {
    let mut records = 0;
    for trace in &c.traces {
        let mut evidence: BTreeSet<EvidenceItem> = BTreeSet::new();
        for (j, r) in trace.iterations.iter().enumerate() {
            ensure!(r.iteration as usize == j + 1, "{}: iteration numbering", trace.query_id);
            let before = evidence.clone();
            evidence.extend(r.zoom_in.iter().chain(&r.zoom_out).map(|&c| EvidenceItem::Chunk(c)));
            evidence.extend(r.visual.iter().cloned().map(EvidenceItem::DiaId));
            ensure!(evidence.is_superset(&before), "{}: evidence shrank at {}", trace.query_id, j + 1);
            let delta: Vec<EvidenceItem> = evidence.difference(&before).cloned().collect();
            ensure!(delta == r.new_evidence, "{}: delta mismatch at iteration {}", trace.query_id, j + 1);
            records += 1;
        }
        let mem = &trace.semantic_memory;
        let fin: BTreeSet<EvidenceItem> = mem
            .evidence
            .keys()
            .map(|&c| EvidenceItem::Chunk(c))
            .chain(mem.visual_evidence.keys().cloned().map(EvidenceItem::DiaId))
            .collect();
        ensure!(fin == evidence, "{}: final memory differs from recomputation", trace.query_id);
        let n = trace.iterations.len() as u32;
        ensure!(mem.evidence.values().all(|&j| j >= 1 && j <= n), "{}: first_seen out of range", trace.query_id);
    }
    ensure!(c.traces.len() >= 100, "only {} traces collected", c.traces.len());
    Ok(format!("{} traces, {records} iterations, 0 violations", c.traces.len()))
}

fn cost_accounting(_: &mut Collected) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    const WORDS: &[&str] = &[
        "we", "talked", "about", "weekend", "plans", "and", "family", "dinner", "work", "movie", "weather", "trip",
        "books", "music", "friends", "garden", "yesterday", "really", "nice", "busy",
    ];
    let turns: Vec<TurnDoc> = (0..400)
        .map(|i| {
            let filler: Vec<&str> = (0..110).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
            TurnDoc {
                dia_id: format!("D1:{i}"),
                speaker: if i % 2 == 0 { "Ann" } else { "Ben" }.into(),
                text: format!("marker{i} {}", filler.join(" ")),
                img_url: None,
                caption: None,
            }
        })
        .collect();
    let doc = CorpusDoc {
        sessions: vec![SessionDoc {
            session_id: "s1".into(),
            datetime: Some("1 May 2023".into()),
            turns,
        }],
    };
    let store = ingest(&doc, 200).map_err(|e| e.to_string())?;
    ensure!(store.len() == 400, "store has {} chunks", store.len());
    let backend = ScriptedBackend::new()
        .on_text(AgentTag::ZoomIn, r#"{"thinking":"","missing_information":"","useful_ids":[1]}"#)
        .on(AgentTag::ZoomOut, ScriptResponse::SelectAll)
        .on_text(AgentTag::Judge, verdict(true, "none", &[]))
        .on_text(AgentTag::Responder, "short answer");
    let rig = Rig::new(store, backend, LoopConfig::default());
    let mut worst: f64 = f64::INFINITY;
    for i in [3usize, 77, 150, 222, 399] {
        let q = format!("what happened around marker{i}");
        let (answer, _) = rig.engine().run(&format!("c{i}"), &q).map_err(|e| e.to_string())?;
        let full = full_context_prompt_tokens(&rig.store, &q, &rig.prompts).map_err(|e| e.to_string())? as f64;
        let ratio = full / answer.token_usage.total_tokens() as f64;
        worst = worst.min(ratio);
    }
    ensure!(worst >= 3.0, "worst ratio {worst:.2}");
    Ok(format!("full-context / loop tokens >= {worst:.1}x over 5 single-evidence queries"))
}

fn non_repetition(c: &mut Collected) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = one_per_chunk(&random_corpus(&mut rng, 150));
    // The adversary mostly echoes failed queries, the current one, or the
    // root in other casing, and only sometimes offers a fresh query.
    let backend = selecting().on_fn(AgentTag::Judge, |req| {
        let text = req.prompt_text();
        let mut rng = ChaCha8Rng::seed_from_u64(hash_of(&[text.as_str()]));
        let root = root_of(req);
        let failed: Vec<String> = text
            .lines()
            .find_map(|l| l.strip_prefix("Fail query: "))
            .and_then(|l| serde_json::from_str(l).ok())
            .unwrap_or_default();
        let current = text
            .lines()
            .find_map(|l| l.strip_prefix("Last query: "))
            .map(str::to_string)
            .unwrap_or_else(|| root.clone());
        let mut pool = failed.clone();
        pool.push(current.clone());
        pool.push(root.to_uppercase());
        pool.push(format!("  {root}  "));
        let n = rng.gen_range(1..4);
        let mut proposals: Vec<String> = (0..n).map(|_| pool.choose(&mut rng).unwrap().clone()).collect();
        if rng.gen_bool(0.2) {
            proposals.push(format!("fresh {} {}", req.meta.step, rng.gen_range(0..1000)));
        }
        verdict(false, "Break", &proposals)
    });
    let rig = Rig::new(store, backend, LoopConfig::default());
    let mut resets = 0;
    for i in 0..100 {
        let root = format!("piano winter island {i}");
        let (_, trace) = rig.engine().run(&format!("r{i}"), &root).map_err(|e| e.to_string())?;
        let mut failed: Vec<&str> = Vec::new();
        let mut run_resets = 0;
        for (j, record) in trace.iterations.iter().enumerate() {
            let step = &trace.query_history[j];
            ensure!(step.query == record.query, "r{i}: history and trajectory disagree at {}", j + 1);
            if failed.contains(&record.query.as_str()) {
                let permitted = step.action == QueryAction::Reset && record.query == root;
                ensure!(permitted, "r{i}: failed query {:?} re-executed at iteration {}", record.query, j + 1);
                run_resets += 1;
            }
            if !record.verdict.as_ref().is_some_and(|v| v.can_answer) {
                failed.push(record.query.as_str());
            }
        }
        ensure!(run_resets <= 1, "r{i}: {run_resets} resets");
        resets += run_resets;
        c.traces.push(trace);
    }
    Ok(format!("100 adversarial runs, 0 repeats beyond {resets} permitted root resets"))
}

fn live_smoke(_: &mut Collected) -> Option<Outcome> {
    let get = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
    let (base, model, key) = (
        get("MEMLOOP_LIVE_BASE_URL")?,
        get("MEMLOOP_LIVE_MODEL")?,
        get("MEMLOOP_LIVE_API_KEY")?,
    );
    Some((|| {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let store = tmp.path().join("store");
        let traces = tmp.path().join("trace");
        let corpus = fixture("corpus.json");
        let env = [
            ("MEMLOOP_BASE_URL", base.as_str()),
            ("MEMLOOP_MODEL", model.as_str()),
            ("MEMLOOP_API_KEY", key.as_str()),
        ];
        let common = [
            "--corpus",
            corpus.to_str().unwrap(),
            "--store",
            store.to_str().unwrap(),
            "--backend-profile",
            "openai",
        ];
        memloop(&[&common[..], &["index"]].concat(), &env)?;
        let out = memloop(
            &[
                &common[..],
                &["--j", "3", "--trace-dir", traces.to_str().unwrap(), "ask", "What career is Caroline considering?"],
            ]
            .concat(),
            &env,
        )?;
        let trace = RunTrace::read(&traces.join("ask.v1.json")).map_err(|e| e.to_string())?;
        let answer = trace.answer.as_ref().ok_or("trace has no answer")?;
        ensure!(!trace.iterations.is_empty() && trace.iterations.len() <= 3, "iterations {}", trace.iterations.len());
        ensure!(answer.iterations_used as usize == trace.iterations.len(), "iteration count mismatch");
        ensure!(trace.calls.iter().any(|c| c.tag == AgentTag::Responder), "no responder call");
        ensure!(trace.token_usage.total_tokens() > 0, "no tokens metered");
        Ok(format!("{} iterations; {}", trace.iterations.len(), out.lines().next().unwrap_or_default()))
    })())
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn main() -> ExitCode {
    let mut collected = Collected::default();
    let criteria: Vec<(&str, fn(&mut Collected) -> Outcome)> = vec![
        ("loop boundedness", loop_boundedness),
        ("single-shot reduction", single_shot_reduction),
        ("multi-step dominance", multi_step_dominance),
        ("zoom-out neighborhood recovery", neighborhood_recovery),
        ("window-expansion oracle", window_oracle),
        ("f1 oracle", f1_oracle),
        ("chunk-distance profile oracle", distance_oracle),
        ("determinism", determinism),
        ("cost accounting", cost_accounting),
        ("failed-query non-repetition", non_repetition),
        ("monotone state", monotone_state),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut collected)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(p.as_ref()))));
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    match live_smoke(&mut collected) {
        None => println!("SKIP  live smoke: set MEMLOOP_LIVE_BASE_URL, MEMLOOP_LIVE_MODEL and MEMLOOP_LIVE_API_KEY to run"),
        Some(Ok(detail)) => println!("PASS  live smoke: {detail}"),
        Some(Err(detail)) => {
            failed += 1;
            println!("FAIL  live smoke: {detail}");
        }
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
