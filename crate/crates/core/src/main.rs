use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use mova::adapter::{load_params, save_params, AdapterConfig};
use mova::experts::{load_registry, ExpertRegistry, Sample};
use mova::harness::ablation::{parse_modes, run_ablation};
use mova::harness::gradcheck::{summarize, GradInstance, Scope};
use mova::harness::pipeline::{route_with_fallback, run_pipeline, EmptyFallback, PipelineRequest};
use mova::harness::properties::PropertySuite;
use mova::harness::train::{train_on_corpus, ToyTrainConfig};
use mova::routing::{RoutingContext, Strategy, DEFAULT_CAP};
use mova::routing_data::{
    build_annotations, generate_synthetic_corpus, load_corpus, read_jsonl, read_losses,
    score_routing_accuracy, GroundTruth, RoutingAnnotation, SyntheticConfig,
};
use mova::{MovaError, Result};

const SEED_ENV: &str = "MOVA_SEED";

#[derive(Parser)]
#[command(name = "mova", version, about = "Coarse-to-fine vision expert routing and fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Route one question over the expert pool.
    Route(RouteArgs),
    /// Turn a loss table into routing annotations.
    BuildRoutingData {
        #[arg(long)]
        experts: Option<PathBuf>,
        #[arg(long)]
        losses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: usize,
    },
    /// Write a seeded synthetic corpus with planted ground truth.
    GenSynthetic {
        #[arg(long)]
        experts: Option<PathBuf>,
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 4)]
        answer_dim: usize,
        /// Plant every sample in this expert.
        #[arg(long)]
        plant: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fraction of samples whose annotation contains the planted expert.
    ScoreRouting {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Route, generate features, run the adapter and write the tokens.
    Fuse(FuseArgs),
    /// Train the adapter on the toy objective.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for the trained parameters.
        #[arg(long)]
        params_out: Option<PathBuf>,
    },
    /// Compare routing and gating variants on shared seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        modes: String,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "checked")]
        scope: String,
        /// Entries probed per tensor; every entry when absent.
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the property suite.
    Check {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RoutingArgs {
    #[arg(long)]
    experts: Option<PathBuf>,
    #[arg(long)]
    question: String,
    #[arg(long, default_value = "scripted")]
    strategy: String,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    losses: Option<PathBuf>,
    #[arg(long, default_value = "query")]
    sample_id: String,
    #[arg(long)]
    response: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: usize,
}

#[derive(Args)]
struct RouteArgs {
    #[command(flatten)]
    routing: RoutingArgs,
    /// base-only or error.
    #[arg(long, default_value = "base-only")]
    on_empty: String,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    routing: RoutingArgs,
    #[arg(long, default_value = "error")]
    on_empty: String,
    #[arg(long, default_value_t = 0)]
    image_seed: u64,
    /// Adapter config JSON; the desk config when absent.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Saved parameter directory; seeded initialization when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    grid: usize,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Error(MovaError),
    /// A check ran and did not pass.
    Check(String),
}

impl From<MovaError> for Failure {
    fn from(e: MovaError) -> Self {
        Failure::Error(e)
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| MovaError::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn seed_or(flag: Option<u64>, fallback: u64) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(fallback),
    })
}

fn registry(path: &Option<PathBuf>) -> Result<ExpertRegistry> {
    match path {
        Some(p) => load_registry(p),
        None => Ok(ExpertRegistry::desk_default()),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| MovaError::json("serializing report", e))
}

/// Write a report to `path`, or standard output when absent.
fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut text = to_json(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text).map_err(|e| MovaError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn routing_context(args: &RoutingArgs, registry: &ExpertRegistry) -> Result<RoutingContext> {
    let mut context = RoutingContext {
        seed: seed_or(args.seed, 0)?,
        cap: args.cap,
        response: args.response.clone(),
        ..RoutingContext::default()
    };
    if let Some(p) = &args.annotations {
        let rows: Vec<RoutingAnnotation> = read_jsonl(p)?;
        context.annotations = rows.into_iter().map(|a| (a.sample_id.clone(), a)).collect();
    }
    if let Some(p) = &args.losses {
        context.losses = read_losses(p, registry)?
            .into_iter()
            .map(|r| (r.sample_id.clone(), r))
            .collect::<HashMap<_, _>>();
    }
    Ok(context)
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Route(args) => {
            let r = &args.routing;
            let registry = registry(&r.experts)?;
            let strategy: Strategy = r.strategy.parse()?;
            let fallback: EmptyFallback = args.on_empty.parse()?;
            let context = routing_context(r, &registry)?;
            let sample = Sample {
                sample_id: r.sample_id.clone(),
                image_seed: 0,
                question: r.question.clone(),
                answer_vector: Vec::new(),
                planted_expert: None,
            };
            let decision = route_with_fallback(strategy, &registry, &sample, &context, fallback)?;
            let text = serde_json::to_string(&decision.to_json(&registry))
                .map_err(|e| MovaError::json("serializing decision", e))?;
            println!("{text}");
        }
        Command::BuildRoutingData {
            experts,
            losses,
            out,
            cap,
        } => {
            let registry = registry(&experts)?;
            let n = build_annotations(&losses, &registry, cap, &out)?;
            emit(&json!({ "records": n, "out": out }), None)?;
        }
        Command::GenSynthetic {
            experts,
            samples,
            seed,
            noise,
            answer_dim,
            plant,
            out,
        } => {
            let registry = registry(&experts)?;
            let config = SyntheticConfig {
                num_samples: samples,
                seed: seed_or(seed, SyntheticConfig::default().seed)?,
                noise,
                answer_dim,
                plant,
            };
            let manifest = generate_synthetic_corpus(&registry, &config, &out)?;
            emit(&manifest, None)?;
        }
        Command::ScoreRouting { annotations, truth } => {
            let ann: Vec<RoutingAnnotation> = read_jsonl(&annotations)?;
            let gt: Vec<GroundTruth> = read_jsonl(&truth)?;
            let accuracy = score_routing_accuracy(&ann, &gt)?;
            emit(&json!({ "accuracy": accuracy, "samples": gt.len() }), None)?;
        }
        Command::Fuse(args) => {
            let r = &args.routing;
            let registry = registry(&r.experts)?;
            let mut adapter = match &args.adapter {
                Some(p) => AdapterConfig::load(p)?,
                None => AdapterConfig::desk(),
            };
            adapter.seed = seed_or(r.seed, adapter.seed)?;
            let params = match &args.params {
                Some(dir) => Some(load_params(dir, &adapter, &registry)?),
                None => None,
            };
            let req = PipelineRequest {
                context: routing_context(r, &registry)?,
                registry,
                question: r.question.clone(),
                sample_id: r.sample_id.clone(),
                image_seed: args.image_seed,
                strategy: r.strategy.parse()?,
                fallback: args.on_empty.parse()?,
                adapter,
                params,
                grid: args.grid,
            };
            let summary = run_pipeline(&req, &args.out)?;
            emit(&summary, None)?;
        }
        Command::TrainToy {
            config,
            report,
            seed,
            params_out,
        } => {
            let mut cfg = ToyTrainConfig::load(&config)?;
            cfg.seed = seed_or(seed, cfg.seed)?;
            let registry = cfg.registry()?;
            let corpus = load_corpus(&cfg.corpus, &registry)?;
            let started = Instant::now();
            let (train_report, params) = train_on_corpus(&cfg, &registry, &corpus)?;
            eprintln!("trained {} steps in {:.2?}", cfg.steps, started.elapsed());
            if let Some(dir) = params_out {
                save_params(&params, dir)?;
            }
            emit(&train_report, report.as_deref())?;
        }
        Command::Ablate {
            config,
            modes,
            report,
            seed,
        } => {
            let modes = parse_modes(&modes)?;
            let mut cfg = ToyTrainConfig::load(&config)?;
            cfg.seed = seed_or(seed, cfg.seed)?;
            let started = Instant::now();
            let result = run_ablation(&modes, &cfg)?;
            eprintln!("ran {} arms in {:.2?}", modes.len(), started.elapsed());
            emit(&result, report.as_deref())?;
        }
        Command::Gradcheck {
            eps,
            tol,
            seed,
            scope,
            probes,
            report,
        } => {
            let scope: Scope = serde_json::from_value(json!(scope))
                .map_err(|_| MovaError::Usage(format!("unknown gradient-check scope `{scope}`")))?;
            if !(eps > 0.0 && tol > 0.0) {
                return Err(MovaError::Usage("eps and tol must be positive".into()).into());
            }
            let instance = GradInstance::desk(seed_or(seed, 0)?)?;
            let summary = summarize(instance.check(scope, eps, probes)?, eps, tol);
            emit(&summary, report.as_deref())?;
            if !summary.passed {
                return Err(Failure::Check(format!(
                    "gradient check failed: {} at relative error {:e} (tolerance {:e})",
                    summary.worst, summary.max_rel_error, tol
                )));
            }
        }
        Command::Check { seed, report } => {
            let suite = PropertySuite {
                seed: seed_or(seed, PropertySuite::default().seed)?,
                ..PropertySuite::default()
            };
            let started = Instant::now();
            let result = suite.run();
            let mut out = std::io::stdout().lock();
            for g in &result.groups {
                let _ = writeln!(out, "{g}");
                for f in &g.failures {
                    let _ = writeln!(out, "    {f}");
                }
            }
            drop(out);
            eprintln!("property suite finished in {:.2?}", started.elapsed());
            if let Some(p) = report {
                emit(&result, Some(&p))?;
            }
            if !result.passed() {
                return Err(Failure::Check("property suite failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            match e.stage() {
                Some(stage) => eprintln!("error [{stage}]: {}", e.root()),
                None => eprintln!("error: {e}"),
            }
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}
