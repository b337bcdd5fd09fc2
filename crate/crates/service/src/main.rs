use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fmsel::{one_shot_select, router, AppState, AutoAnswer, Runtime};
use fmsel_core::catalog::{load_catalog, Catalog};
use fmsel_core::config::Config;
use fmsel_core::eval::{
    builtin_templates, instantiate_benchmark, parse_ratings, run_comparison, score_comparison, BenchmarkQuery,
    SlotVocabulary, SystemName, TemplateCategory,
};
use fmsel_core::extraction::run_extraction;
use fmsel_core::orchestrator::{AgentOutput, OutputStatus};
use fmsel_core::retrieval::build_index;

#[derive(Parser)]
#[command(name = "fmsel", version, about = "Constraint-aware foundation model selection")]
struct Cli {
    /// TOML config file; FMSEL_* environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select models for a free-text request.
    Select {
        query: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Let the simulated user answer clarification questions.
        #[arg(long)]
        auto_answer: bool,
        /// Print the full output document instead of a summary.
        #[arg(long)]
        json: bool,
    },
    /// Extract one catalog record from source documents (paper text, README, ...).
    Ingest {
        #[arg(required = true)]
        sources: Vec<PathBuf>,
        /// Write flagged low-confidence fields here, one JSON line each.
        #[arg(long)]
        review_out: Option<PathBuf>,
        /// Add the record to the configured catalog file.
        #[arg(long)]
        append: bool,
    },
    /// Run baselines and the agent over benchmark queries.
    Eval {
        /// JSONL of benchmark queries, or one request per line. Defaults to
        /// instantiating the built-in templates.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Expert ratings CSV. Without it only selections are printed.
        #[arg(long)]
        ratings: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "agent,naive_agent,db_retrieval,unstructured_rag")]
        systems: Vec<String>,
        /// Also write the machine-readable report here.
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
    /// Retrieval index maintenance.
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Embed the catalog and write the index cache.
    Build {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "fmsel=info,fmsel_core=warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Select {
            query,
            k,
            auto_answer,
            json,
        } => {
            let runtime = Runtime::from_config(config)?;
            let mode = if auto_answer { AutoAnswer::Scripted } else { AutoAnswer::None };
            let output = one_shot_select(&runtime, &query, k, mode)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&output)?);
            } else {
                print_summary(&output);
            }
        }
        Command::Ingest {
            sources,
            review_out,
            append,
        } => ingest(&config, &sources, review_out.as_deref(), append)?,
        Command::Eval {
            queries,
            ratings,
            systems,
            json_out,
        } => eval(config, queries.as_deref(), ratings.as_deref(), &systems, json_out.as_deref())?,
        Command::Serve { port } => {
            let mut config = config;
            if let Some(p) = port {
                config.server.port = p;
            }
            serve(config)?;
        }
        Command::Index {
            command: IndexCommand::Build { out },
        } => {
            let out = out
                .or_else(|| config.paths.index_cache.clone())
                .context("no output path: pass --out or set paths.index_cache")?;
            let (catalog, _) = load_catalog(&config.paths.catalog)?;
            let embedder = config.build_embedder()?;
            let index = build_index(&catalog, embedder.as_ref())?;
            index.save(&out)?;
            println!("indexed {} records at dimension {} -> {}", index.len(), index.dimension(), out.display());
        }
    }
    Ok(())
}

fn print_summary(output: &AgentOutput) {
    match output.status {
        OutputStatus::NeedsClarification => {
            println!("needs clarification:");
            for q in output.clarification.iter().flat_map(|c| &c.questions) {
                println!("  [{}] {}", q.field_path, q.question);
            }
        }
        OutputStatus::FallbackDone => {
            println!("no model satisfies every constraint; closest match:");
        }
        _ => {
            if let Some(c) = output.overall_confidence {
                println!("overall confidence {c:.3}");
            }
        }
    }
    for r in &output.recommendations {
        println!("{}. {} (confidence {:.3})", r.rank, r.model_name, r.selection_confidence);
        for line in &r.explanation {
            println!("   - {line}");
        }
        if let Some(l) = &r.paper_link {
            println!("   paper: {l}");
        }
        if let Some(l) = &r.repository {
            println!("   code:  {l}");
        }
    }
    if output.metadata.incomplete_query {
        println!("note: some mandatory fields were never specified");
    }
}

fn ingest(config: &Config, sources: &[PathBuf], review_out: Option<&Path>, append: bool) -> Result<()> {
    let texts = sources
        .iter()
        .map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let generator = config.build_generator()?;
    let output = run_extraction(generator.as_ref(), &texts, &config.extraction)?;
    println!("{}", serde_json::to_string(&output.record)?);
    let flagged = output.flagged().count();
    eprintln!(
        "{} fields extracted, {flagged} flagged for review, {} unparseable iterations",
        output.fields.len(),
        output.unparseable_iterations
    );
    if let Some(path) = review_out {
        fs::write(path, output.review_jsonl())?;
    }
    if append {
        let catalog = if config.paths.catalog.exists() {
            load_catalog(&config.paths.catalog)?.0
        } else {
            Catalog::default()
        };
        catalog.with_record(output.record)?.save(&config.paths.catalog)?;
    }
    Ok(())
}

fn read_queries(path: &Path) -> Result<Vec<BenchmarkQuery>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        if line.starts_with('{') {
            out.push(serde_json::from_str(line).with_context(|| format!("query line {}", i + 1))?);
        } else {
            out.push(BenchmarkQuery {
                query_id: format!("Q{}", i + 1),
                template_id: "custom".into(),
                category: TemplateCategory::Composite,
                text: line.to_string(),
            });
        }
    }
    Ok(out)
}

fn eval(config: Config, queries: Option<&Path>, ratings: Option<&Path>, systems: &[String], json_out: Option<&Path>) -> Result<()> {
    let systems = systems
        .iter()
        .map(|s| SystemName::parse(s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    if systems.is_empty() {
        bail!("no systems selected");
    }
    let queries = match queries {
        Some(p) => read_queries(p)?,
        None => instantiate_benchmark(
            &builtin_templates(),
            &SlotVocabulary::default(),
            config.eval.count_per_template,
            config.eval.seed,
        )?,
    };
    let weights = config.eval.weights;
    let hq = config.eval.hq_threshold;
    let runtime = Runtime::from_config(config)?;
    let selections = run_comparison(&runtime.eval_context(), &queries, &systems)?;
    match ratings {
        None => {
            println!("system\tquery_id\trank\tmodel_id");
            for s in &selections {
                for r in &s.ranked {
                    println!("{}\t{}\t{}\t{}", s.system.as_str(), s.query_id, r.rank, r.model_id);
                }
            }
            if let Some(path) = json_out {
                fs::write(path, serde_json::to_string_pretty(&selections)?)?;
            }
        }
        Some(path) => {
            let ratings = parse_ratings(&fs::read_to_string(path)?)?;
            let report = score_comparison(&selections, &ratings, &weights, hq)?;
            print!("{}", report.to_table());
            if let Some(path) = json_out {
                fs::write(path, report.to_json())?;
            }
        }
    }
    Ok(())
}

fn serve(config: Config) -> Result<()> {
    let addr: SocketAddr = format!("{}:{}", config.server.host, config.server.port)
        .parse()
        .context("invalid server address")?;
    // Built outside the async runtime: the live provider uses a blocking client.
    let runtime = Runtime::from_config(config)?;
    let app = router(AppState::new(runtime));
    tokio::runtime::Runtime::new()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(%addr, "listening");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
