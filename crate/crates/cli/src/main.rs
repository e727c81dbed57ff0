use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use facecot_core::client::{AnnotatorClient, LiveClient, ScriptedClient};
use facecot_core::dataset::{dataset_stats, emit_stage_manifests, sample_balanced, SamplingPlan};
use facecot_core::eval::{discover_score_files, run_protocol, ThresholdPolicy};
use facecot_core::manifest::{read_manifest_file, write_manifest_file, ATTEMPTS, SAMPLES, STAGE1, STAGE2};
use facecot_core::pipeline::{annotate_batch, summarize, AttemptLog, PipelineConfig, DEFAULT_MAX_ROUNDS};
use facecot_core::prompt::PromptConfig;
use facecot_core::reward::score_stream;
use facecot_core::schema::{extract_conclusion, validate_annotation, Strictness};
use facecot_core::taxonomy::SampleRecord;
use facecot_service::{load_store, AppState, ServiceConfig, StoreSources};

#[derive(Parser)]
#[command(name = "facecot", version, about = "Chain-of-thought annotation tooling for face anti-spoofing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClientKind {
    Live,
    /// Answers every prompt with a well-formed annotation matching the label.
    Mock,
}

#[derive(Subcommand)]
enum Command {
    /// Annotate a samples manifest, verifying each answer against its label.
    Annotate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "live")]
        client: ClientKind,
        #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
        max_rounds: u32,
        #[arg(long, default_value_t = 8)]
        max_in_flight: usize,
        #[arg(long, default_value_t = 3)]
        max_transient_retries: u32,
        /// Attempt log; existing entries are reused when resuming.
        #[arg(long)]
        out: PathBuf,
        /// Prompt configuration (system prompt, question, hints) as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score (raw_output, truth) pairs with the accuracy and format rewards.
    Score {
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Draw a category- and subtype-balanced manifest from a pool.
    Sample {
        #[arg(long)]
        pool: PathBuf,
        /// Sampling plan as JSON.
        #[arg(long)]
        plan: PathBuf,
        /// Overrides the plan's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-subtype sample counts of a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write the stage-1 and stage-2 training manifests from accepted attempts.
    EmitStages {
        #[arg(long)]
        attempts: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate every score file in a directory.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// `eer`, `fixed:<t>` or `dev:<path>`.
        #[arg(long, default_value = "eer")]
        policy: ThresholdPolicy,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Check an annotation against the template (`-` reads stdin).
    Validate {
        file: PathBuf,
        #[arg(long, default_value = "strict")]
        strictness: Strictness,
    },
    /// Print the default prompt configuration as JSON.
    PromptConfig,
    /// Run the review service.
    Serve {
        #[arg(long, env = "FACECOT_ADDR", default_value = "127.0.0.1:8080")]
        addr: String,
        /// Event log, replayed at startup.
        #[arg(long, env = "FACECOT_STORE")]
        store: Option<PathBuf>,
        #[arg(long, env = "FACECOT_SAMPLES")]
        samples: Option<PathBuf>,
        #[arg(long, env = "FACECOT_ATTEMPTS")]
        attempts: Option<PathBuf>,
        #[arg(long, default_value_t = facecot_service::api::DEFAULT_MAX_BATCH)]
        max_batch: usize,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_writer(io::stderr).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Annotate {
            manifest,
            client,
            max_rounds,
            max_in_flight,
            max_transient_retries,
            out,
            config,
        } => {
            let prompt = match config {
                Some(p) => PromptConfig::load(&p).with_context(|| format!("loading {}", p.display()))?,
                None => PromptConfig::default(),
            };
            let cfg = PipelineConfig {
                max_rounds,
                max_in_flight,
                max_transient_retries,
                prompt,
                ..PipelineConfig::default()
            };
            annotate(&manifest, client, &cfg, &out)
        }
        Command::Score { pairs } => {
            let reader = BufReader::new(File::open(&pairs).with_context(|| format!("opening {}", pairs.display()))?);
            let stdout = io::stdout().lock();
            score_stream(reader, BufWriter::new(stdout))?;
            Ok(())
        }
        Command::Sample { pool, plan, seed, out } => {
            let pool: Vec<SampleRecord> = read_manifest_file(&pool, SAMPLES)?;
            let mut plan: SamplingPlan = serde_json::from_reader(File::open(&plan)?)
                .with_context(|| format!("parsing plan {}", plan.display()))?;
            if let Some(seed) = seed {
                plan.seed = seed;
            }
            let (manifest, report) = sample_balanced(&pool, &plan)?;
            write_manifest_file(&out, SAMPLES, &manifest)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Stats { manifest, json } => {
            let stats = dataset_stats(BufReader::new(File::open(&manifest)?))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                print!("{}", stats.render_table());
            }
            Ok(())
        }
        Command::EmitStages {
            attempts,
            samples,
            out_dir,
        } => {
            let attempts = read_manifest_file(&attempts, ATTEMPTS)?;
            let samples: Vec<SampleRecord> = read_manifest_file(&samples, SAMPLES)?;
            let stages = emit_stage_manifests(&attempts, &samples)?;
            std::fs::create_dir_all(&out_dir)?;
            write_manifest_file(&out_dir.join("stage1.jsonl"), STAGE1, &stages.stage1)?;
            write_manifest_file(&out_dir.join("stage2.jsonl"), STAGE2, &stages.stage2)?;
            println!("stage1: {} rows, stage2: {} rows", stages.stage1.len(), stages.stage2.len());
            Ok(())
        }
        Command::Eval {
            scores,
            policy,
            json_out,
        } => {
            let files = discover_score_files(&scores).with_context(|| format!("listing {}", scores.display()))?;
            if files.is_empty() {
                bail!("no score files in {}", scores.display());
            }
            let report = run_protocol(&files, &policy);
            print!("{}", report.render_table());
            if let Some(path) = json_out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(())
        }
        Command::Validate { file, strictness } => {
            let mut text = String::new();
            if file == Path::new("-") {
                io::stdin().read_to_string(&mut text)?;
            } else {
                text = std::fs::read_to_string(&file)?;
            }
            let report = validate_annotation(&text, strictness);
            let out = serde_json::json!({
                "ok": report.ok,
                "errors": report.errors,
                "conclusion": extract_conclusion(&text),
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
            if !report.ok {
                std::process::exit(1);
            }
            Ok(())
        }
        Command::PromptConfig => {
            println!("{}", PromptConfig::default().to_json());
            Ok(())
        }
        Command::Serve {
            addr,
            store,
            samples,
            attempts,
            max_batch,
        } => {
            let store = load_store(&StoreSources {
                events: store.as_deref(),
                samples: samples.as_deref(),
                attempts: attempts.as_deref(),
            })?;
            let state = AppState::new(store, ServiceConfig { max_batch });
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                tracing::info!(addr = %listener.local_addr()?, "listening");
                facecot_service::serve(listener, state).await
            })?;
            Ok(())
        }
    }
}

fn annotate(manifest: &Path, kind: ClientKind, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let samples: Vec<SampleRecord> = read_manifest_file(manifest, SAMPLES)?;
    let client: Box<dyn AnnotatorClient> = match kind {
        ClientKind::Live => Box::new(LiveClient::from_env()?),
        ClientKind::Mock => Box::new(ScriptedClient::echo()),
    };
    let mut log = AttemptLog::open(out)?;
    let rt = tokio::runtime::Runtime::new()?;
    let attempts = rt.block_on(annotate_batch(&samples, client.as_ref(), cfg, &mut log))?;
    let summary = summarize(&attempts);
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}
