//! Command-line front end: embedding inspection, PCA fitting, threshold
//! tuning, adapter training (local and federated), evaluation, benchmarking,
//! the caching proxy server, and cache-file maintenance.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use meancache::adapter::{AdapterModel, LabeledPair, TrainingHyperparams};
use meancache::cache::{CacheEngine, LookupConfig};
use meancache::compression::{fit_pca, PcaModel, DEFAULT_COMPRESSED_DIM};
use meancache::config::AppConfig;
use meancache::embedding::{
    embed, EmbeddingProvider, RemoteProvider, StubProvider, STUB_DEFAULT_DIM,
};
use meancache::evaluation::{
    contextual_stream, generate_workload, run_benchmark, synonym_paraphrase, ContextualRecord,
};
use meancache::federated::{partition_pairs, run_simulation, FlConfig};
use meancache::threshold::{tune, DEFAULT_BETA, DEFAULT_GRID_STEP};

#[derive(Parser)]
#[command(name = "meancache", version, about = "User-side semantic cache for LLM services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PipelineArgs {
    /// Embedding dimension of the stub provider.
    #[arg(long, default_value_t = STUB_DEFAULT_DIM)]
    embedding_dim: usize,
    /// Remote embedding endpoint; the deterministic stub is used when unset.
    #[arg(long)]
    embedding_url: Option<String>,
    /// Adapter weights file (JSON) applied after the provider.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// PCA model file applied after the adapter.
    #[arg(long)]
    pca: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a query and print the vector as JSON.
    Embed {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// The text to embed.
        #[arg(long)]
        text: String,
    },
    /// Fit a PCA compression model on a file of queries (one per line).
    FitPca {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        queries: PathBuf,
        /// Output dimension.
        #[arg(long, default_value_t = DEFAULT_COMPRESSED_DIM)]
        k: usize,
        /// Where to write the model.
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune the similarity threshold on labeled pairs (JSONL).
    TuneThreshold {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// JSONL file of {"q1", "q2", "duplicate"} records.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
        #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
        grid_step: f64,
    },
    /// Train a linear adapter locally on labeled pairs (JSONL).
    TrainAdapter {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 6)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0.5)]
        margin: f64,
        #[arg(long, default_value_t = 20.0)]
        mnr_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the trained adapter (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate federated adapter training over partitioned pairs.
    FlTrain {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 20)]
        num_clients: usize,
        #[arg(long, default_value_t = 4)]
        clients_per_round: usize,
        #[arg(long, default_value_t = 50)]
        rounds: usize,
        #[arg(long, default_value_t = 6)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-round metrics CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Where to write the final global adapter (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a contextual query stream (JSONL) and report cache metrics.
    Eval {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// JSONL of {"id", "query", "response", "parent_id", "duplicate_of"}.
        #[arg(long)]
        stream: PathBuf,
        #[arg(long, default_value_t = 0.83)]
        tau: f64,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
        /// Disable context-chain verification.
        #[arg(long)]
        no_verify_context: bool,
    },
    /// Generate a synthetic workload and benchmark the cache on it.
    Bench {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// File of base queries, one per line.
        #[arg(long)]
        base_queries: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Fraction of queries that are paraphrased duplicates.
        #[arg(long, default_value_t = 0.31)]
        duplicate_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.83)]
        tau: f64,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
    },
    /// Run the OpenAI-compatible caching proxy.
    Serve {
        /// Config file (TOML or JSON); overrides SEMCACHE_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Inspect or maintain a cache file.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Send hit feedback to a running proxy.
    Feedback {
        /// Proxy base URL, e.g. http://127.0.0.1:8080.
        #[arg(long)]
        url: String,
        #[arg(long)]
        entry_id: u64,
        /// "accepted" or "rejected".
        #[arg(long)]
        judgment: String,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    /// Print a summary of a cache file.
    Inspect {
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value_t = STUB_DEFAULT_DIM)]
        embedding_dim: usize,
        /// Also list every entry.
        #[arg(long)]
        entries: bool,
    },
    /// Evict entries down to a capacity and rewrite the file.
    Compact {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        capacity: usize,
        #[arg(long, default_value_t = STUB_DEFAULT_DIM)]
        embedding_dim: usize,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the same path; those are not
            // usage errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn build_provider(dim: usize, url: &Option<String>) -> Arc<dyn EmbeddingProvider> {
    match url {
        Some(url) => Arc::new(RemoteProvider::new(url.clone(), dim)),
        None => Arc::new(StubProvider::new(dim)),
    }
}

fn load_adapter(path: &Path) -> anyhow::Result<AdapterModel> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn save_adapter(path: &Path, adapter: &AdapterModel) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string(adapter)?)?;
    Ok(())
}

fn build_engine(pipeline: &PipelineArgs) -> anyhow::Result<CacheEngine> {
    let provider = build_provider(pipeline.embedding_dim, &pipeline.embedding_url);
    let mut engine = CacheEngine::new(provider);
    if let Some(path) = &pipeline.adapter {
        engine = engine.with_adapter(load_adapter(path)?);
    }
    if let Some(path) = &pipeline.pca {
        let mut file = fs::File::open(path)?;
        engine = engine.with_pca(PcaModel::read_from(&mut file)?);
    }
    Ok(engine)
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let file = fs::File::open(path)?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

fn read_pairs(path: &Path) -> anyhow::Result<Vec<LabeledPair>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))
        })
        .collect()
}

/// Cosine scores of labeled pairs through the engine's full pipeline.
fn score_pairs(engine: &CacheEngine, pairs: &[LabeledPair]) -> anyhow::Result<Vec<(f64, bool)>> {
    pairs
        .iter()
        .map(|p| {
            let a = engine.embed_query(&p.q1)?;
            let b = engine.embed_query(&p.q2)?;
            Ok((meancache::embedding::similarity_or_zero(&a, &b)?, p.duplicate))
        })
        .collect()
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Embed { pipeline, text } => {
            let engine = build_engine(&pipeline)?;
            let vector = engine.embed_query(&text)?;
            println!("{}", serde_json::to_string(vector.values())?);
        }
        Command::FitPca { pipeline, queries, k, out } => {
            let provider = build_provider(pipeline.embedding_dim, &pipeline.embedding_url);
            let adapter = pipeline.adapter.as_deref().map(load_adapter).transpose()?;
            let samples: Vec<_> = read_lines(&queries)?
                .iter()
                .map(|q| {
                    let e = embed(provider.as_ref(), q)?;
                    match &adapter {
                        Some(a) => meancache::adapter::apply_adapter(a, &e),
                        None => Ok(e),
                    }
                })
                .collect::<meancache::Result<_>>()?;
            let model = fit_pca(&samples, k)?;
            let mut file = fs::File::create(&out)?;
            model.write_to(&mut file)?;
            let retained: f64 = model.explained_variance().iter().sum();
            println!(
                "fitted {} -> {} on {} samples; retained variance {:.4}; wrote {}",
                model.in_dim(),
                model.k(),
                samples.len(),
                retained,
                out.display()
            );
        }
        Command::TuneThreshold { pipeline, pairs, beta, grid_step } => {
            let engine = build_engine(&pipeline)?;
            let labeled = read_pairs(&pairs)?;
            let scored = score_pairs(&engine, &labeled)?;
            let profile = tune(&scored, beta, grid_step)?;
            println!("{}", serde_json::to_string_pretty(&profile)?);
        }
        Command::TrainAdapter {
            pipeline,
            pairs,
            epochs,
            batch_size,
            learning_rate,
            margin,
            mnr_scale,
            seed,
            out,
        } => {
            let provider = build_provider(pipeline.embedding_dim, &pipeline.embedding_url);
            let labeled = read_pairs(&pairs)?;
            let base = match &pipeline.adapter {
                Some(path) => load_adapter(path)?,
                None => AdapterModel::identity(pipeline.embedding_dim, pipeline.embedding_dim),
            };
            let hp = TrainingHyperparams {
                epochs,
                batch_size,
                learning_rate,
                margin,
                mnr_scale,
                seed,
            };
            let (trained, metrics) =
                meancache::adapter::train_local(&base, &labeled, provider.as_ref(), &hp)?;
            save_adapter(&out, &trained)?;
            println!(
                "trained on {} pairs; final contrastive loss {:.6}{}; wrote {}",
                labeled.len(),
                metrics.contrastive,
                metrics
                    .mnr
                    .map(|m| format!(", mnr loss {m:.6}"))
                    .unwrap_or_default(),
                out.display()
            );
        }
        Command::FlTrain {
            pipeline,
            pairs,
            num_clients,
            clients_per_round,
            rounds,
            epochs,
            seed,
            csv,
            out,
        } => {
            let provider = build_provider(pipeline.embedding_dim, &pipeline.embedding_url);
            let labeled = read_pairs(&pairs)?;
            // hold out the tail 20% of the pool for global evaluation
            let held = labeled.len() / 5;
            let (train_pool, held_out) = labeled.split_at(labeled.len() - held);
            let clients = partition_pairs(train_pool, num_clients);
            let cfg = FlConfig {
                num_clients,
                clients_per_round,
                rounds,
                seed,
                hyperparams: TrainingHyperparams { epochs, seed, ..TrainingHyperparams::default() },
            };
            let mut csv_file = csv.as_deref().map(fs::File::create).transpose()?;
            let (global, reports) = run_simulation(
                provider.as_ref(),
                &clients,
                held_out,
                &cfg,
                pipeline.embedding_dim,
                csv_file.as_mut().map(|f| f as &mut dyn std::io::Write),
            )?;
            let adapter = AdapterModel::from_flat(
                pipeline.embedding_dim,
                pipeline.embedding_dim,
                global.weights.clone(),
            )?;
            save_adapter(&out, &adapter)?;
            if let Some(last) = reports.last() {
                println!(
                    "round {}: f_beta {:.4}, precision {:.4}, recall {:.4}, tau {:.2}",
                    last.round,
                    last.metrics.f_beta,
                    last.metrics.precision,
                    last.metrics.recall,
                    last.tau_global
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { pipeline, stream, tau, beta, no_verify_context } => {
            let mut engine = build_engine(&pipeline)?;
            let records: Vec<ContextualRecord> = read_lines(&stream)?
                .iter()
                .enumerate()
                .map(|(i, line)| {
                    serde_json::from_str(line)
                        .map_err(|e| anyhow::anyhow!("{}:{}: {e}", stream.display(), i + 1))
                })
                .collect::<anyhow::Result<_>>()?;
            let items = contextual_stream(&records)?;
            let responses: std::collections::HashMap<&str, &str> = records
                .iter()
                .map(|r| (r.query.as_str(), r.response.as_str()))
                .collect();
            let cfg = LookupConfig {
                tau,
                verify_context: !no_verify_context,
                ..LookupConfig::default()
            };
            let result = run_benchmark(&mut engine, &items, &cfg, beta, &|q: &str| {
                responses.get(q).copied().unwrap_or("response").to_string()
            })?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::Bench { pipeline, base_queries, count, duplicate_ratio, seed, tau, beta } => {
            let mut engine = build_engine(&pipeline)?;
            let base = read_lines(&base_queries)?;
            let items =
                generate_workload(&base, count, duplicate_ratio, &synonym_paraphrase, seed)?;
            let cfg = LookupConfig { tau, ..LookupConfig::default() };
            let result = run_benchmark(&mut engine, &items, &cfg, beta, &|q: &str| {
                format!("response to: {q}")
            })?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::Serve { config } => {
            let cfg = AppConfig::resolve(config.as_deref())?;
            println!("resolved config: {}", serde_json::to_string_pretty(&cfg)?);
            let provider = build_provider(cfg.embedding_dim, &cfg.embedding_url);
            let mut engine = match &cfg.cache_path {
                Some(path) if path.exists() => CacheEngine::load(path, provider)?,
                _ => CacheEngine::new(provider),
            };
            if let Some(path) = &cfg.adapter_path {
                engine = engine.with_adapter(load_adapter(path)?);
            }
            if let Some(path) = &cfg.pca_path {
                if engine.pca().is_none() {
                    let mut file = fs::File::open(path)?;
                    engine = engine.with_pca(PcaModel::read_from(&mut file)?);
                }
            }
            if let Some(capacity) = cfg.capacity {
                engine = engine.with_capacity(capacity);
            }
            engine.set_threshold(meancache::ThresholdProfile {
                tau: cfg.tau,
                beta: cfg.beta,
                ..engine.threshold().clone()
            });
            let state = meancache::proxy::AppState::new(
                engine,
                cfg.lookup_config(),
                meancache::proxy::Upstream::from_config(&cfg.proxy),
            );
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(&cfg.proxy.bind_addr).await?;
                log::info!("proxy listening on {}", listener.local_addr()?);
                axum::serve(listener, meancache::proxy::build_router(state.clone()))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
            })?;
            if let Some(path) = &cfg.cache_path {
                state.engine.lock().unwrap().save(path)?;
                println!("saved cache to {}", path.display());
            }
        }
        Command::Cache { action } => match action {
            CacheAction::Inspect { file, embedding_dim, entries } => {
                let engine =
                    CacheEngine::load(&file, Arc::new(StubProvider::new(embedding_dim)))?;
                println!(
                    "{} entries, stored dim {}, tau {:.2}, pca {}",
                    engine.len(),
                    engine.stored_dim(),
                    engine.threshold().tau,
                    if engine.pca().is_some() { "present" } else { "absent" }
                );
                if entries {
                    for e in engine.entries() {
                        println!(
                            "#{} parent={} context_only={} {:?}",
                            e.id,
                            e.parent_id,
                            e.is_context_only(),
                            e.query_text
                        );
                    }
                }
            }
            CacheAction::Compact { file, capacity, embedding_dim } => {
                let mut engine =
                    CacheEngine::load(&file, Arc::new(StubProvider::new(embedding_dim)))?;
                let before = engine.len();
                engine.compact(capacity);
                engine.save(&file)?;
                println!("compacted {} -> {} entries", before, engine.len());
            }
        },
        Command::Feedback { url, entry_id, judgment } => {
            let client = reqwest::blocking::Client::new();
            let resp = client
                .post(format!("{}/feedback", url.trim_end_matches('/')))
                .json(&serde_json::json!({ "entry_id": entry_id, "judgment": judgment }))
                .send()?;
            let status = resp.status();
            let body: serde_json::Value = resp.json()?;
            println!("{body}");
            if !status.is_success() {
                anyhow::bail!("proxy returned {status}");
            }
        }
    }
    Ok(())
}
