//! Acceptance checks. Prints one `[PASS]`/`[FAIL]`/`[SKIP]` line per
//! criterion and exits non-zero if any check fails.

mod common;

use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use precedent_core::adjudication::StopReason;
use precedent_core::EmbeddingProvider as _;
use precedent_core::embedding::EmbeddingProviderConfig;
use precedent_core::evaluation::{compare_reports, load_benchmark, run_benchmark, EvaluationReport};
use precedent_core::graph::read_corpus;
use precedent_core::index::{score_pair, ScoreOptions};
use precedent_core::ingestion::{
    embed_graph_nodes, lint_corpus, read_crash_inputs, ExtractionProviderConfig, Pipeline, RuleBasedTransformer,
};
use precedent_core::llm::{FnChat, RemoteChat, ScriptedChat};
use precedent_core::{
    Adjudicator, ChatMessage, ClassFilter, DataClass, DrivingAction, EngineConfig, EngineKind, HashEmbedder, NodeType,
    OutcomeLabel, PrecedentIndex, ProviderError, SceneActionGraph, SceneQuery, Source, TypeWeights,
};

use common::{check_golden, fixtures, ingest_fixtures};

type Check = Result<String, String>;
type CheckFn = fn() -> Check;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

const DIM: usize = 64;
const SCORE_TOL: f64 = 1e-9;
const IDENTITY_TOL: f64 = 1e-6;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);

const WORDS: &[&str] = &[
    "ego", "vehicle", "car", "truck", "lane", "left", "right", "merge", "turn", "stop", "signal", "pedestrian",
    "crosswalk", "highway", "urban", "junction", "slow", "fast", "ahead", "behind", "cyclist", "parked", "wet",
    "dark", "curve", "ramp", "shoulder", "collision", "oncoming", "bus",
];

fn phrase(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=6);
    (0..n).map(|_| *WORDS.choose(rng).expect("words")).collect::<Vec<_>>().join(" ")
}

/// A valid graph with Ego and EgoAction plus a random subset of the rest.
fn random_graph(rng: &mut ChaCha8Rng, id: &str) -> SceneActionGraph {
    let class = if rng.gen_bool(0.5) { DataClass::Positive } else { DataClass::Negative };
    let mut g = SceneActionGraph::new(id, class, Source::new("random", id, "acceptance"));
    for t in NodeType::ALL {
        let required = matches!(t, NodeType::Ego | NodeType::EgoAction)
            || (t == NodeType::Outcome && class == DataClass::Negative);
        if t == NodeType::Outcome && class == DataClass::Positive {
            continue;
        }
        if required || rng.gen_bool(0.6) {
            let mut d = phrase(rng);
            if t == NodeType::Outcome {
                d = format!("COLLISION: {d}");
            }
            g = g.with_node(t, &t.as_str().to_lowercase(), &d);
        }
    }
    g
}

fn random_weights(rng: &mut ChaCha8Rng) -> TypeWeights {
    loop {
        let mut raw = [0.0f64; 6];
        for w in &mut raw {
            if rng.gen_bool(0.8) {
                *w = rng.gen_range(0.0..1.0);
            }
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            continue;
        }
        let mut w = raw.map(|x| x / sum);
        // absorb rounding so the sum is 1 within tolerance
        let drift = 1.0 - w.iter().sum::<f64>();
        let last = w.iter().rposition(|x| *x > 0.0).expect("nonzero");
        w[last] += drift;
        if let Ok(tw) = TypeWeights::new(w) {
            return tw;
        }
    }
}

fn random_filter(rng: &mut ChaCha8Rng) -> ClassFilter {
    *[ClassFilter::All, ClassFilter::Positive, ClassFilter::Negative].choose(rng).expect("filters")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// All-pairs scorer written against the raw vectors only.
fn brute_force(
    corpus: &[SceneActionGraph],
    query: &SceneActionGraph,
    k: usize,
    weights: &TypeWeights,
    filter: ClassFilter,
) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = Vec::new();
    for g in corpus {
        if g.graph_id == query.graph_id || !filter.admits(g.data_class) {
            continue;
        }
        let mut s = 0.0;
        for t in NodeType::ALL {
            let mut best: Option<f64> = None;
            for q in query.nodes.iter().filter(|n| n.node_type == t) {
                for c in g.nodes.iter().filter(|n| n.node_type == t) {
                    let (a, b) = (q.embedding.as_ref().unwrap().values(), c.embedding.as_ref().unwrap().values());
                    let cos = dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
                    best = Some(best.map_or(cos, |x: f64| x.max(cos)));
                }
            }
            if let Some(b) = best {
                s += weights.get(t) * b;
            }
        }
        all.push((g.graph_id.clone(), s));
    }
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn build(graphs: Vec<SceneActionGraph>, embedder: &HashEmbedder) -> PrecedentIndex {
    PrecedentIndex::build(graphs, TypeWeights::uniform(), &EmbeddingProviderConfig::deterministic(DIM), embedder)
        .expect("index builds")
}

fn retrieval_oracle_equivalence() -> Check {
    let start = Instant::now();
    let embedder = HashEmbedder::new(DIM).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let mut queries = 0;
    for c in 0..100 {
        let n = rng.gen_range(0..=50);
        let graphs: Vec<_> = (0..n).map(|i| random_graph(&mut rng, &format!("g{c}-{i:02}"))).collect();
        let index = build(graphs, &embedder);
        for qi in 0..5 {
            // every other query reuses a corpus id to exercise self-exclusion
            let id = if qi % 2 == 1 && n > 0 { format!("g{c}-{:02}", rng.gen_range(0..n)) } else { "query".into() };
            let query = embed_graph_nodes(&random_graph(&mut rng, &id), &embedder).unwrap();
            let k = rng.gen_range(1..=55);
            let weights = random_weights(&mut rng);
            let filter = random_filter(&mut rng);
            let got = index.retrieve_top_k(&query, k, &weights, filter).map_err(|e| e.to_string())?;
            let want = brute_force(index.graphs(), &query, k, &weights, filter);
            ensure!(got.len() == want.len(), "corpus {c}: {} results, oracle has {}", got.len(), want.len());
            for (g, (wid, ws)) in got.iter().zip(&want) {
                ensure!(&g.graph_id == wid, "corpus {c}: id {} vs oracle {wid}", g.graph_id);
                ensure!((g.score - ws).abs() <= SCORE_TOL, "corpus {c}: score {} vs oracle {ws}", g.score);
            }
            queries += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < ORACLE_BUDGET, "took {elapsed:?}, budget {ORACLE_BUDGET:?}");
    Ok(format!("100 corpora, {queries} queries, {:.2}s", elapsed.as_secs_f64()))
}

fn subset_graph(id: &str, mask: u8, embedder: &HashEmbedder) -> SceneActionGraph {
    let mut g = SceneActionGraph::new(id, DataClass::Positive, Source::new("subset", id, "acceptance"));
    for t in NodeType::ALL {
        if mask & (1 << t.index()) != 0 {
            g = g.with_node(t, "n", &format!("{} for {id} {}", t.as_str().to_lowercase(), WORDS[t.index() * 3]));
        }
    }
    embed_graph_nodes(&g, embedder).unwrap()
}

fn similarity_identities() -> Check {
    let embedder = HashEmbedder::new(DIM).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut weight_sets: Vec<TypeWeights> = vec![TypeWeights::uniform()];
    weight_sets.extend(NodeType::ALL.map(TypeWeights::single));
    weight_sets.extend((0..8).map(|_| random_weights(&mut rng)));
    let opts = ScoreOptions::default();

    // self-similarity over every non-empty type subset
    let mut self_checks = 0;
    for mask in 1u8..64 {
        let g = subset_graph("s", mask, &embedder);
        for w in &weight_sets {
            let s = score_pair(&g, &g, w, opts).map_err(|e| e.to_string())?.score;
            let expect: f64 = g.node_types().iter().map(|t| w.get(*t)).sum();
            ensure!((s - expect).abs() <= IDENTITY_TOL, "mask {mask:06b}: S(G,G)={s}, expected {expect}");
            self_checks += 1;
        }
    }

    // disjoint type sets score exactly zero
    let mut disjoint = 0;
    for a in 1u8..64 {
        for b in 1u8..64 {
            if a & b != 0 {
                continue;
            }
            let (ga, gb) = (subset_graph("a", a, &embedder), subset_graph("b", b, &embedder));
            for w in &weight_sets {
                let s = score_pair(&ga, &gb, w, opts).map_err(|e| e.to_string())?.score;
                ensure!(s == 0.0, "masks {a:06b}/{b:06b}: S={s}");
                disjoint += 1;
            }
        }
    }

    // a single-type weight ranks exactly by that type's node cosine
    let mut rankings = 0;
    for round in 0..20 {
        let graphs: Vec<_> = (0..30).map(|i| random_graph(&mut rng, &format!("r{round}-{i:02}"))).collect();
        let index = build(graphs, &embedder);
        let query = embed_graph_nodes(&random_graph(&mut rng, "query"), &embedder).unwrap();
        for t in NodeType::ALL {
            let got = index
                .retrieve_top_k(&query, index.len(), &TypeWeights::single(t), ClassFilter::All)
                .map_err(|e| e.to_string())?;
            let mut want: Vec<(String, f64)> = index
                .graphs()
                .iter()
                .map(|g| {
                    let cos = match (query.node(t), g.node(t)) {
                        (Some(q), Some(c)) => precedent_core::cosine_similarity(
                            q.embedding.as_ref().unwrap(),
                            c.embedding.as_ref().unwrap(),
                        )
                        .unwrap(),
                        _ => 0.0,
                    };
                    (g.graph_id.clone(), cos)
                })
                .collect();
            want.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let got_ids: Vec<&str> = got.iter().map(|r| r.graph_id.as_str()).collect();
            let want_ids: Vec<&str> = want.iter().map(|(id, _)| id.as_str()).collect();
            ensure!(got_ids == want_ids, "round {round}, single {t}: ranking differs");
            rankings += 1;
        }
    }
    Ok(format!(
        "{self_checks} self-similarity, {disjoint} disjoint-pair, {rankings} single-type ranking checks"
    ))
}

fn ingestion_reproducibility() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    ingest_fixtures(&a).map_err(|e| e.to_string())?;
    ingest_fixtures(&b).map_err(|e| e.to_string())?;
    let (ba, bb) = (std::fs::read(&a).map_err(|e| e.to_string())?, std::fs::read(&b).map_err(|e| e.to_string())?);
    ensure!(ba == bb, "two runs differ");
    check_golden("corpus.jsonl", &String::from_utf8_lossy(&ba))?;
    let graphs = read_corpus(&a).map_err(|e| e.to_string())?;
    let negatives: Vec<_> = graphs.iter().filter(|g| g.data_class == DataClass::Negative).collect();
    ensure!(negatives.len() == 5, "{} negative records", negatives.len());
    ensure!(
        negatives.iter().all(|g| g.has_type(NodeType::Outcome)),
        "a negative record has no outcome node"
    );
    let lint = lint_corpus(&a);
    ensure!(lint.passed(), "corpus-lint: {:?}", lint.problems);
    Ok(format!("{} records, {} bytes, identical across runs, lint clean", graphs.len(), ba.len()))
}

/// Answers UNSAFE iff a NEGATIVE precedent in the prompt names the
/// proposed action, SAFE otherwise.
fn echo_provider() -> FnChat<impl Fn(&[ChatMessage]) -> Result<String, ProviderError> + Send + Sync> {
    FnChat(|messages: &[ChatMessage]| {
        let user = &messages.last().expect("user message").content;
        let action = user
            .split("PROPOSED ACTION:\n")
            .nth(1)
            .and_then(|s| s.lines().next())
            .unwrap_or_default()
            .to_string();
        let retrieved = user
            .split("RETRIEVED SCENARIOS:\n")
            .nth(1)
            .and_then(|s| s.split("\n\nPROPOSED ACTION:").next())
            .unwrap_or_default();
        let hit = retrieved
            .split("\n\n[")
            .any(|entry| entry.contains("NEGATIVE ") && entry.contains(&format!("EGO_ACTION: {action}")));
        Ok(if hit { "The precedents show a crash.\nUNSAFE" } else { "No crash precedent.\nSAFE" }.to_string())
    })
}

fn fixture_graphs(embedder: &HashEmbedder) -> Result<Vec<SceneActionGraph>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = dir.path().join("corpus.jsonl");
    ingest_fixtures(&corpus).map_err(|e| e.to_string())?;
    let graphs = read_corpus(&corpus).map_err(|e| e.to_string())?;
    ensure!(graphs.iter().all(|g| g.source.embed_fingerprint == Some(embedder.fingerprint())), "fixture fingerprint");
    Ok(graphs)
}

const LANE_CHANGE_SCENE: &str = "The ego vehicle was traveling straight ahead in the left lane of a four-lane \
    divided highway. The other vehicle was traveling in the same direction as the ego vehicle in the right lane \
    ahead of the ego vehicle.";

fn contrastive_evidence() -> Check {
    let embedder = HashEmbedder::new(DIM).unwrap();
    let graphs = fixture_graphs(&embedder)?;
    let positives: Vec<_> = graphs.iter().filter(|g| g.data_class == DataClass::Positive).cloned().collect();
    let without = build(positives, &embedder);
    let with = build(graphs.clone(), &embedder);
    let echo = echo_provider();
    let query = SceneQuery::new(LANE_CHANGE_SCENE, DrivingAction::MergeRight);
    let rag = EngineConfig::new(EngineKind::Rag);
    let pos_only = EngineConfig::new(EngineKind::RagPosOnly);

    let run = |index: &PrecedentIndex, cfg: &EngineConfig| {
        Adjudicator::new(&echo, &RuleBasedTransformer, &embedder)
            .with_index(index)
            .adjudicate(&query, cfg)
            .map_err(|e| e.to_string())
    };
    let before = run(&without, &rag)?;
    let after = run(&with, &rag)?;
    let ablated = run(&with, &pos_only)?;
    ensure!(before.verdict == OutcomeLabel::Safe, "positive-only corpus gave {}", before.verdict);
    ensure!(after.verdict == OutcomeLabel::Unsafe, "with the crash graph gave {}", after.verdict);
    ensure!(
        after.retrievals.iter().any(|p| p.result.graph_id == "crash:2019-0412"),
        "near-duplicate crash graph not retrieved"
    );
    ensure!(ablated.verdict == OutcomeLabel::Safe, "PosOnly gave {}", ablated.verdict);
    ensure!(
        ablated.retrievals.iter().all(|p| p.result.data_class == DataClass::Positive),
        "PosOnly retrieved a negative graph"
    );
    Ok(format!(
        "SAFE -> UNSAFE after inserting crash:2019-0412 (rank {}), PosOnly stays SAFE",
        after.retrievals.iter().position(|p| p.result.graph_id == "crash:2019-0412").unwrap() + 1
    ))
}

const TRIAL_ONE: &str = "temporary stop to assess surroundings";
const TRIAL_TWO: &str = "brief deceleration followed by a gentle arc to the left within the lane";

fn scripted_conversation() -> ScriptedChat {
    ScriptedChat::new([
        format!("Pausing would give time to re-check every gap around the ego vehicle.\nALTERNATE ACTION: {TRIAL_ONE}"),
        "Pausing is legal and collision-free but holds up the flow behind.\nSAFE".to_string(),
        format!("Easing off and drifting left inside the lane widens the margin to the right.\nALTERNATE ACTION: {TRIAL_TWO}"),
        "It keeps clear of every neighbour while the ego vehicle keeps moving.\nREASONABLE".to_string(),
        "The alternatives cover the options well enough.\nFINALIZE".to_string(),
        "Drifting left matches the evaluated alternative and the retrieved logs.\nREASONABLE".to_string(),
    ])
}

fn agentic_query() -> SceneQuery {
    let mut q = SceneQuery::new(
        "The ego vehicle is driving on an urban road with cars close by on both sides.",
        DrivingAction::NudgeLeft,
    );
    q.metadata.agent_types = vec!["VEHICLE".into(), "VEHICLE".into(), "VEHICLE".into()];
    q.metadata.relative_positions = vec!["REAR_RIGHT".into(), "FRONT_RIGHT".into(), "LEFT".into()];
    q.metadata.map_note = "The ego vehicle is on a road with no mergers or intersections.".into();
    q
}

fn agentic_protocol() -> Check {
    let embedder = HashEmbedder::new(DIM).unwrap();
    let index = build(fixture_graphs(&embedder)?, &embedder);
    let q = agentic_query();
    let cfg = EngineConfig::new(EngineKind::Agentic);

    let script = scripted_conversation();
    let ep = Adjudicator::new(&script, &RuleBasedTransformer, &embedder)
        .with_index(&index)
        .adjudicate(&q, &cfg)
        .map_err(|e| e.to_string())?;
    ensure!(ep.verdict == OutcomeLabel::Reasonable, "verdict {}", ep.verdict);
    ensure!(ep.iteration_count == 2 && ep.trials.len() == 2, "{} trials", ep.trials.len());
    ensure!(ep.trials[0].proposed_action.canonical() == TRIAL_ONE, "trial 1 action");
    ensure!(ep.trials[1].proposed_action.canonical() == TRIAL_TWO, "trial 2 action");
    ensure!(
        [ep.trials[0].trial_label, ep.trials[1].trial_label] == [OutcomeLabel::Safe, OutcomeLabel::Reasonable],
        "trial labels"
    );
    ensure!(ep.stop_reason == Some(StopReason::Finalized), "stop reason {:?}", ep.stop_reason);
    ensure!(ep.transcript.len() == 6 && script.remaining() == 0, "transcript has {} calls", ep.transcript.len());
    let replayed = Adjudicator::new(&ep.replay_provider(), &RuleBasedTransformer, &embedder)
        .with_index(&index)
        .adjudicate(&q, &cfg)
        .map_err(|e| e.to_string())?;
    ensure!(replayed == ep, "replay differs");

    let counter = Mutex::new(0usize);
    let never_stops = FnChat(|m: &[ChatMessage]| {
        let user = &m[1].content;
        let mut n = counter.lock().unwrap();
        *n += 1;
        Ok(if user.ends_with("answer with FINALIZE instead.") {
            format!("ALTERNATE ACTION: option number {n}")
        } else {
            "SAFE".to_string()
        })
    });
    let ep3 = Adjudicator::new(&never_stops, &RuleBasedTransformer, &embedder)
        .with_index(&index)
        .adjudicate(&q, &cfg)
        .map_err(|e| e.to_string())?;
    ensure!(ep3.trials.len() == 3 && ep3.iteration_count == 3, "never-stopping script ran {} trials", ep3.trials.len());
    ensure!(ep3.stop_reason == Some(StopReason::MaxIterations), "stop reason {:?}", ep3.stop_reason);

    let rag_ep = Adjudicator::new(&ScriptedChat::new(["SAFE"]), &RuleBasedTransformer, &embedder)
        .with_index(&index)
        .adjudicate(&q, &EngineConfig::new(EngineKind::Rag))
        .map_err(|e| e.to_string())?;
    let zero = Adjudicator::new(&ScriptedChat::new(["SAFE"]), &RuleBasedTransformer, &embedder)
        .with_index(&index)
        .adjudicate(&q, &cfg.clone().with_max_iterations(0))
        .map_err(|e| e.to_string())?;
    ensure!(zero.trials.is_empty() && zero.transcript.len() == 1, "max_iterations=0 made extra calls");
    ensure!(zero.retrievals == rag_ep.retrievals, "max_iterations=0 retrievals differ from rag");
    ensure!(
        zero.transcript[0].messages[1] == rag_ep.transcript[0].messages[1],
        "max_iterations=0 prompt differs from rag"
    );
    Ok("scripted run REASONABLE with 2 trials and 6 calls, replay identical; never-stop capped at 3; max 0 equals rag prompt".into())
}

fn eval_run(provider: &dyn precedent_core::ChatProvider) -> Result<EvaluationReport, String> {
    let records = load_benchmark(&fixtures().join("benchmark9.jsonl")).map_err(|e| e.to_string())?;
    let embedder = HashEmbedder::new(DIM).unwrap();
    let adj = Adjudicator::new(provider, &RuleBasedTransformer, &embedder);
    let report = run_benchmark(&records, &EngineConfig::new(EngineKind::Base), &adj, None).map_err(|e| e.to_string())?;
    ensure!(report.is_conserved(), "confusion conservation broken");
    Ok(report)
}

fn evaluation_exactness() -> Check {
    use OutcomeLabel::*;
    let records = load_benchmark(&fixtures().join("benchmark9.jsonl")).map_err(|e| e.to_string())?;
    let truths: Vec<&str> = records.iter().map(|r| r.human_label.canonical()).collect();

    let oracle = eval_run(&ScriptedChat::new(truths.clone()))?;
    ensure!(OutcomeLabel::ALL.iter().all(|l| oracle.recall(*l) == Some(1.0)), "oracle recall {:?}", oracle.per_class_recall);
    ensure!(oracle.confusion == [[3, 0, 0], [0, 3, 0], [0, 0, 3]], "oracle confusion {:?}", oracle.confusion);

    let constant = eval_run(&ScriptedChat::new(vec!["UNSAFE"; 9]))?;
    ensure!(
        [constant.recall(Unsafe), constant.recall(Safe), constant.recall(Reasonable)] == [Some(1.0), Some(0.0), Some(0.0)],
        "constant recall {:?}",
        constant.per_class_recall
    );

    // predictions for b-01..b-09; truth is U U U S S S R R R
    let script = ["UNSAFE", "UNSAFE", "SAFE", "UNSAFE", "SAFE", "REASONABLE", "SAFE", "REASONABLE", "REASONABLE"];
    let expected: [[u64; 3]; 3] = [[2, 1, 0], [1, 1, 1], [0, 1, 2]];
    let scripted = eval_run(&ScriptedChat::new(script))?;
    ensure!(scripted.confusion == expected, "confusion {:?}, hand-computed {expected:?}", scripted.confusion);

    let delta = compare_reports(&constant, &oracle).map_err(|e| e.to_string())?;
    ensure!(
        [delta.recall[&Unsafe], delta.recall[&Safe], delta.recall[&Reasonable]] == [Some(0.0), Some(1.0), Some(1.0)],
        "delta {:?}",
        delta.recall
    );

    // one record fails twice to produce a label; it lands in failures only
    let mut with_failure: Vec<&str> = truths.clone();
    with_failure.splice(0..1, ["no label", "still no label"]);
    let failing = eval_run(&ScriptedChat::new(with_failure))?;
    ensure!(failing.failures.len() == 1 && failing.failures[0].record_id == "b-01", "failures {:?}", failing.failures);
    ensure!(failing.confusion[0] == [2, 0, 0], "failed record counted in confusion");
    Ok(format!("oracle diagonal, constant {{1,0,0}}, scripted {expected:?}, conservation held on 4 runs"))
}

fn persistence_parity() -> Check {
    let embedder = HashEmbedder::new(DIM).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0007);
    let mut graphs = fixture_graphs(&embedder)?;
    graphs.extend((0..40).map(|i| random_graph(&mut rng, &format!("p-{i:02}"))));
    let index = build(graphs, &embedder);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    index.save(dir.path()).map_err(|e| e.to_string())?;
    let loaded = PrecedentIndex::load(dir.path()).map_err(|e| e.to_string())?;
    for i in 0..20 {
        let q = embed_graph_nodes(&random_graph(&mut rng, &format!("q{i}")), &embedder).unwrap();
        let k = rng.gen_range(1..=12);
        let w = random_weights(&mut rng);
        let f = random_filter(&mut rng);
        let a = index.retrieve_top_k(&q, k, &w, f).map_err(|e| e.to_string())?;
        let b = loaded.retrieve_top_k(&q, k, &w, f).map_err(|e| e.to_string())?;
        let bits = |r: &[precedent_core::RetrievalResult]| {
            r.iter().map(|x| (x.graph_id.clone(), x.score.to_bits())).collect::<Vec<_>>()
        };
        ensure!(bits(&a) == bits(&b) && a == b, "query {i}: retrievals differ after reload");
    }
    Ok(format!("{} graphs, 20 queries bit-identical after save/load", index.len()))
}

/// Returns `None` when the endpoints are not configured.
fn live_smoke() -> Option<Check> {
    let configured = ["LLM_ENDPOINT", "LLM_MODEL", "EMBED_ENDPOINT", "EMBED_DIM"]
        .iter()
        .all(|v| std::env::var_os(v).is_some());
    if !configured {
        return None;
    }
    Some((|| {
        let embed_cfg = EmbeddingProviderConfig::remote_from_env().map_err(|e| e.to_string())?;
        let embedder = embed_cfg.build().map_err(|e| e.to_string())?;
        let transformer = ExtractionProviderConfig::remote_from_env()
            .and_then(|c| c.build())
            .map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let corpus = dir.path().join("corpus.jsonl");
        let pipeline = Pipeline {
            transformer: transformer.as_ref(),
            embedder: embedder.as_ref(),
        };
        for n in read_crash_inputs(&fixtures().join("crashes"), "crash-sample").map_err(|e| e.to_string())? {
            pipeline.ingest_crash_report(&n, &corpus).map_err(|e| e.to_string())?;
        }
        let graphs = read_corpus(&corpus).map_err(|e| e.to_string())?;
        let index = PrecedentIndex::build(graphs, TypeWeights::uniform(), &embed_cfg, embedder.as_ref())
            .map_err(|e| e.to_string())?;
        let chat = RemoteChat::from_env().map_err(|e| e.to_string())?;
        let records = load_benchmark(&fixtures().join("benchmark9.jsonl")).map_err(|e| e.to_string())?;
        let adj = Adjudicator::new(&chat, transformer.as_ref(), embedder.as_ref()).with_index(&index);
        let report = run_benchmark(&records[..5], &EngineConfig::new(EngineKind::Rag), &adj, None)
            .map_err(|e| e.to_string())?;
        ensure!(report.failures.is_empty(), "failures: {:?}", report.failures);
        Ok(format!("5 records adjudicated live, confusion {:?}", report.confusion))
    })())
}

fn main() {
    let checks: Vec<(&str, CheckFn)> = vec![
        ("retrieval oracle equivalence", retrieval_oracle_equivalence),
        ("similarity identities", similarity_identities),
        ("ingestion reproducibility", ingestion_reproducibility),
        ("contrastive evidence", contrastive_evidence),
        ("agentic protocol", agentic_protocol),
        ("evaluation exactness", evaluation_exactness),
        ("persistence parity", persistence_parity),
    ];
    let total = checks.len() + 1;
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name}: {why}");
            }
        }
    }
    match live_smoke() {
        None => println!("[SKIP] live smoke test: LLM_ENDPOINT, LLM_MODEL, EMBED_ENDPOINT and EMBED_DIM not all set"),
        Some(Ok(detail)) => println!("[PASS] live smoke test: {detail}"),
        Some(Err(why)) => {
            failed += 1;
            println!("[FAIL] live smoke test: {why}");
        }
    }
    println!("{total} checks, {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
