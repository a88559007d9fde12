//! The `precedent` command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde_json::json;

use precedent_core::evaluation::{self, compare_reports};
use precedent_core::graph::{deserialize_graph, read_corpus};
use precedent_core::ingestion::{self, embed_graph_nodes, lint_corpus, Pipeline};
use precedent_core::index::IndexError;
use precedent_core::{ClassFilter, EvaluationReport, PrecedentIndex, TypeWeights};

use crate::annotation::{self, AnnotationStore};
use crate::error::{ErrorCode, ServiceError};
use crate::runtime::{self, AdjudicationRequest, EpisodeSummary, Runtime, SceneInput, DEFAULT_EMBED_DIM};
use crate::server::{self, AppState};
use crate::API_VERSION;

#[derive(Debug, Parser)]
#[command(name = "precedent", version, about = "Precedent-grounded adjudication of driving actions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Embedding selection for commands that embed new text.
#[derive(Debug, Clone, clap::Args)]
pub struct EmbedArgs {
    /// Use the remote embedding endpoint (EMBED_ENDPOINT, EMBED_MODEL, EMBED_DIM).
    #[arg(long)]
    pub remote_embeddings: bool,
    /// Dimension of the deterministic test embedder.
    #[arg(long, default_value_t = DEFAULT_EMBED_DIM)]
    pub dim: usize,
}

/// Chat and prompt selection for commands that call a model.
#[derive(Debug, Clone, clap::Args)]
pub struct ModelArgs {
    /// Answer chat calls from a script file instead of LLM_ENDPOINT.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Directory overriding the built-in prompt templates.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Extract query graphs with the remote chat model instead of rules.
    #[arg(long)]
    pub remote_extraction: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed a corpus and persist it as an index directory.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-type weights such as `EGO=0.5,EGO_ACTION=0.5`; uniform if absent.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        k_default: Option<usize>,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Print the top-k precedents for a graph record.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        /// File holding one corpus record.
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "all")]
        class: String,
        /// Overrides the index's weights.
        #[arg(long)]
        weights: Option<String>,
    },
    /// Ingest crash narratives (one `.txt` per report) as negative records.
    IngestCrash {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "unknown")]
        agency: String,
        #[arg(long)]
        remote_extraction: bool,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Ingest driving-log captures (`.json`/`.jsonl`) as positive records.
    IngestLog {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        remote_extraction: bool,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Check a corpus for invalid records and mixed embeddings.
    CorpusLint {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Label one candidate action for one scene.
    Adjudicate {
        #[arg(long)]
        engine: String,
        /// Needed by every engine except `base`.
        #[arg(long)]
        index: Option<PathBuf>,
        /// JSON file with `description`, optional `image_ref` and `metadata`.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        action: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long = "max-iter")]
        max_iter: Option<usize>,
        /// Where to write the full episode.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run an engine over a benchmark file and write a report.
    Eval {
        #[arg(long)]
        engine: String,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        episodes_out: Option<PathBuf>,
        #[arg(long)]
        report_out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long = "max-iter")]
        max_iter: Option<usize>,
        /// Evaluate a class-balanced sample of this many records per label.
        #[arg(long)]
        sample_per_class: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Print the b minus a differences between two reports.
    EvalCompare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Also write the delta as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Corpus to index in memory when `--index` does not exist yet. The
        /// built index is saved to `--index` when that is given.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Annotation task pool (JSONL).
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, default_value = "annotations.jsonl")]
        annotations: PathBuf,
        /// Root for task image refs; defaults to the task file's directory.
        #[arg(long)]
        media_root: Option<PathBuf>,
        /// File of allowed annotator ids, one per line.
        #[arg(long)]
        annotators: Option<PathBuf>,
        #[arg(long)]
        episodes_dir: Option<PathBuf>,
        /// Seconds an adjudication request waits before returning a poll ticket.
        #[arg(long, default_value_t = 60)]
        deadline_secs: u64,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Rewrite the annotation log without duplicates or a torn last line.
    AnnotationsCompact {
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Expand stored annotations into a benchmark file.
    AnnotationsExport {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_weights(text: Option<&str>) -> Result<Option<TypeWeights>, ServiceError> {
    text.map(|s| s.parse::<TypeWeights>().map_err(ServiceError::from)).transpose()
}

fn load_index(path: Option<&Path>) -> Result<Option<PrecedentIndex>, ServiceError> {
    path.map(|p| PrecedentIndex::load(p).map_err(|e| ServiceError::from(e).context(p.display())))
        .transpose()
}

fn runtime_for(index: Option<PrecedentIndex>, model: &ModelArgs, lenient: bool) -> Result<Runtime, ServiceError> {
    Runtime::new(
        runtime::chat_provider(model.script.as_deref(), lenient)?,
        runtime::extraction(model.remote_extraction)?,
        index,
        runtime::load_templates(model.prompts.as_deref())?,
    )
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, ServiceError> {
    serde_json::to_string_pretty(value).map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))
}

fn ingest_each<T>(
    items: &[T],
    id: impl Fn(&T) -> &str,
    mut ingest: impl FnMut(&T) -> Result<precedent_core::SceneActionGraph, ingestion::IngestError>,
    out: &mut dyn Write,
) -> Result<(), ServiceError> {
    let mut first_err = None;
    let mut ok = 0;
    for item in items {
        match ingest(item) {
            Ok(g) => {
                ok += 1;
                writeln!(out, "ingested {}", g.graph_id)?;
            }
            Err(e) => {
                writeln!(out, "failed {}: {e}", id(item))?;
                first_err.get_or_insert(e);
            }
        }
    }
    writeln!(out, "{ok} of {} records ingested", items.len())?;
    match first_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

/// Runs one command, writing its normal output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), ServiceError> {
    match cli.command {
        Command::BuildIndex {
            corpus,
            out: dir,
            weights,
            k_default,
            embed,
        } => {
            let graphs = read_corpus(&corpus).map_err(|e| ServiceError::from(e).context(corpus.display()))?;
            let cfg = runtime::embedding_config(embed.remote_embeddings, embed.dim)?;
            let provider = cfg.build()?;
            let weights = parse_weights(weights.as_deref())?.unwrap_or_default();
            let mut index = PrecedentIndex::build(graphs, weights, &cfg, provider.as_ref())?;
            if let Some(k) = k_default {
                index = index.with_k_default(k)?;
            }
            index.save(&dir)?;
            writeln!(
                out,
                "indexed {} graphs with {} into {}",
                index.len(),
                index.fingerprint(),
                dir.display()
            )?;
        }
        Command::Retrieve {
            index,
            query,
            k,
            class,
            weights,
        } => {
            let index = load_index(Some(&index))?.expect("path given");
            let filter: ClassFilter = class.parse().map_err(|e: IndexError| ServiceError::invalid(e.to_string()))?;
            let text = std::fs::read_to_string(&query)?;
            let line = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .ok_or_else(|| ServiceError::invalid(format!("{} is empty", query.display())))?;
            let mut graph = deserialize_graph(line)?;
            if !graph.is_fully_embedded() || graph.source.embed_fingerprint.is_none() {
                let embedder = index.manifest().embed_config.build()?;
                graph = embed_graph_nodes(&graph, embedder.as_ref())?;
            }
            let weights = parse_weights(weights.as_deref())?.unwrap_or_else(|| *index.weights());
            let results = index.retrieve_top_k(&graph, k.unwrap_or(index.k_default()), &weights, filter)?;
            writeln!(out, "{}", to_json(&json!({"api_version": API_VERSION, "results": results}))?)?;
        }
        Command::IngestCrash {
            input,
            corpus,
            agency,
            remote_extraction,
            embed,
        } => {
            let transformer = runtime::extraction(remote_extraction)?;
            let embedder = runtime::embedding_config(embed.remote_embeddings, embed.dim)?.build()?;
            let pipeline = Pipeline {
                transformer: transformer.as_ref(),
                embedder: embedder.as_ref(),
            };
            let narratives = ingestion::read_crash_inputs(&input, &agency)?;
            ingest_each(
                &narratives,
                |n| n.report_id.as_str(),
                |n| pipeline.ingest_crash_report(n, &corpus),
                out,
            )?;
        }
        Command::IngestLog {
            input,
            corpus,
            remote_extraction,
            embed,
        } => {
            let transformer = runtime::extraction(remote_extraction)?;
            let embedder = runtime::embedding_config(embed.remote_embeddings, embed.dim)?.build()?;
            let pipeline = Pipeline {
                transformer: transformer.as_ref(),
                embedder: embedder.as_ref(),
            };
            let captures = ingestion::read_log_inputs(&input)?;
            ingest_each(
                &captures,
                |c| c.capture_id.as_str(),
                |c| pipeline.ingest_driving_log(c, &corpus),
                out,
            )?;
        }
        Command::CorpusLint { corpus } => {
            let report = lint_corpus(&corpus);
            writeln!(
                out,
                "{} records ({} positive, {} negative)",
                report.count, report.positives, report.negatives
            )?;
            for p in &report.problems {
                writeln!(out, "problem: {p}")?;
            }
            if !report.passed() {
                return Err(ServiceError::new(
                    ErrorCode::LintFailed,
                    format!("{} problem(s) in {}", report.problems.len(), corpus.display()),
                )
                .with_details(json!({"problems": report.problems})));
            }
            writeln!(out, "lint passed")?;
        }
        Command::Adjudicate {
            engine,
            index,
            scene,
            action,
            k,
            max_iter,
            out: episode_out,
            model,
        } => {
            let req = AdjudicationRequest {
                engine,
                scene: SceneInput::load(&scene)?,
                action,
                k,
                max_iterations: max_iter,
            };
            req.resolve()?;
            let rt = runtime_for(load_index(index.as_deref())?, &model, false)?;
            let ep = rt.adjudicate(&req)?;
            ep.save(&episode_out)?;
            let mut summary = serde_json::to_value(EpisodeSummary::of(&ep))
                .map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?;
            summary["api_version"] = json!(API_VERSION);
            writeln!(out, "{}", to_json(&summary)?)?;
        }
        Command::Eval {
            engine,
            benchmark,
            index,
            episodes_out,
            report_out,
            k,
            max_iter,
            sample_per_class,
            seed,
            model,
        } => {
            let cfg = runtime::engine_config(&engine, k, max_iter)?;
            let mut records = evaluation::load_benchmark(&benchmark)?;
            if let Some(n) = sample_per_class {
                records = evaluation::balanced_sample(&records, n, seed)?;
            }
            let rt = runtime_for(load_index(index.as_deref())?, &model, false)?;
            let report = evaluation::run_benchmark(&records, &cfg, &rt.adjudicator(), episodes_out.as_deref())?;
            report.save(&report_out)?;
            write!(out, "{}", report.render_table())?;
        }
        Command::EvalCompare { a, b, out: delta_out } => {
            let ra = EvaluationReport::load(&a)?;
            let rb = EvaluationReport::load(&b)?;
            let delta = compare_reports(&ra, &rb)?;
            if let Some(path) = delta_out {
                std::fs::write(&path, format!("{}\n", to_json(&delta)?))?;
            }
            write!(out, "{}", delta.render_table(&ra, &rb))?;
        }
        Command::Serve {
            port,
            corpus,
            index,
            tasks,
            annotations,
            media_root,
            annotators,
            episodes_dir,
            deadline_secs,
            model,
            embed,
        } => {
            let index = match (&index, &corpus) {
                (Some(dir), _) if dir.join("manifest.json").exists() => load_index(Some(dir))?,
                (_, Some(corpus)) => {
                    let cfg = runtime::embedding_config(embed.remote_embeddings, embed.dim)?;
                    let provider = cfg.build()?;
                    let built = PrecedentIndex::build(read_corpus(corpus)?, TypeWeights::default(), &cfg, provider.as_ref())?;
                    if let Some(dir) = &index {
                        built.save(dir)?;
                    }
                    Some(built)
                }
                (Some(dir), None) => {
                    return Err(ServiceError::new(
                        ErrorCode::NotFound,
                        format!("no index at {} and no --corpus to build one", dir.display()),
                    ))
                }
                (None, None) => None,
            };
            let rt = runtime_for(index, &model, true)?;
            let mut state = AppState::new(rt).with_deadline(Duration::from_secs(deadline_secs));
            if let Some(dir) = episodes_dir {
                std::fs::create_dir_all(&dir)?;
                state = state.with_episodes_dir(dir);
            }
            if let Some(tasks) = tasks {
                let pool = annotation::read_task_pool(&tasks)?;
                let root = media_root.unwrap_or_else(|| tasks.parent().map(Path::to_path_buf).unwrap_or_default());
                let mut store = AnnotationStore::open(pool, annotations)?.with_media_root(root);
                if let Some(list) = annotators {
                    let ids = std::fs::read_to_string(&list)?
                        .lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty())
                        .map(String::from)
                        .collect::<Vec<_>>();
                    store = store.with_annotators(ids);
                }
                state = state.with_annotations(store);
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(Arc::new(state), port))?;
        }
        Command::AnnotationsCompact { annotations } => {
            let (kept, dropped) = annotation::compact(&annotations)?;
            writeln!(out, "kept {kept} submission(s), dropped {dropped} line(s)")?;
        }
        Command::AnnotationsExport {
            tasks,
            annotations,
            out: bench_out,
        } => {
            let store = AnnotationStore::open(annotation::read_task_pool(&tasks)?, annotations)?;
            let records = store.records();
            evaluation::write_benchmark(&bench_out, &records)?;
            writeln!(out, "wrote {} benchmark records to {}", records.len(), bench_out.display())?;
        }
    }
    Ok(())
}
