mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;
use trustshift_core::agents::run_simulation;
use trustshift_core::analysis::{branch_report, write_outputs, AnalysisError, Strictness};
use trustshift_core::content::Content;
use trustshift_core::dataset::{synthetic_students, write_semicolon_file, Course, FeatureSchema};
use trustshift_core::explainer::ExplainError;
use trustshift_core::pipeline::{load_experiment, train_models, PipelineError, TrainedModels};
use trustshift_core::protocol::Session;
use trustshift_core::service::{
    ExperimentService, IdSource, ManualClock, ServiceConfig, SystemClock,
};
use trustshift_core::store::{load_results, results_file, Store, StoreError};
use trustshift_server::AppState;

use config::Config;

/// Fixed start time for simulated sessions, so a pinned seed gives
/// byte-identical stores.
const SIM_EPOCH_MS: u64 = 1_700_000_000_000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match e {
            PipelineError::Config(_) => CliError::Config(msg),
            PipelineError::Dataset(_)
            | PipelineError::Io { .. }
            | PipelineError::Format { .. }
            | PipelineError::StaleExplanations { .. }
            | PipelineError::Explain(
                ExplainError::Io { .. }
                | ExplainError::Format(_)
                | ExplainError::MissingCached { .. },
            ) => CliError::Data(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Corrupt { .. } => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "trustshift",
    version,
    about = "Prepare, simulate, serve and analyze the two-step grade prediction experiment"
)]
struct Cli {
    /// TOML config file; flags and TRUSTSHIFT_* variables override its values.
    /// `trustshift show-config` prints every default.
    #[arg(long, global = true, env = "TRUSTSHIFT_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CourseArg {
    Math,
    Portuguese,
}

impl From<CourseArg> for Course {
    fn from(c: CourseArg) -> Self {
        match c {
            CourseArg::Math => Course::Math,
            CourseArg::Portuguese => Course::Portuguese,
        }
    }
}

#[derive(Args)]
struct ArtifactArgs {
    /// Directory holding good.json and poor.json [default: artifacts/models]
    #[arg(long, env = "TRUSTSHIFT_MODELS")]
    models: Option<PathBuf>,
    /// Explanation cache file [default: artifacts/explanations.json]
    #[arg(long, env = "TRUSTSHIFT_EXPLANATIONS")]
    explanations: Option<PathBuf>,
    /// Session store directory [default: artifacts/store]
    #[arg(long, env = "TRUSTSHIFT_STORE")]
    store: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a schema-valid stand-in dataset (semicolon CSV, UCI layout).
    SynthDataset {
        #[arg(long)]
        out: PathBuf,
        /// [default: 395]
        #[arg(long)]
        rows: Option<usize>,
        /// [default: 395]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the Good (lr 0.003) and Poor (lr 0.00065) networks and write them
    /// with an RMSE report.
    TrainModels {
        /// Student-performance CSV; without it the stand-in generator is used.
        #[arg(long, env = "TRUSTSHIFT_DATASET")]
        dataset: Option<PathBuf>,
        /// [default: math]
        #[arg(long, value_enum)]
        course: Option<CourseArg>,
        /// First training seed [default: 42]
        #[arg(long)]
        seed: Option<u64>,
        /// Seeds tried until Good beats Poor on held-out RMSE [default: 20]
        #[arg(long)]
        max_seed_attempts: Option<usize>,
        /// [default: 100]
        #[arg(long)]
        epochs: Option<usize>,
        /// Output directory [default: artifacts/models]
        #[arg(long, env = "TRUSTSHIFT_MODELS")]
        out: Option<PathBuf>,
    },
    /// Compute surrogate explanations for every protocol stimulus under both
    /// networks.
    CacheExplanations {
        /// [default: artifacts/models]
        #[arg(long, env = "TRUSTSHIFT_MODELS")]
        models: Option<PathBuf>,
        /// Output file [default: artifacts/explanations.json]
        #[arg(long, env = "TRUSTSHIFT_EXPLANATIONS")]
        out: Option<PathBuf>,
        /// Perturbations per explanation [default: 5000]
        #[arg(long)]
        perturbations: Option<usize>,
        /// [default: 8]
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run synthetic agents through every branch via the session API. The
    /// store is rebuilt; a store holding participant sessions is refused.
    Simulate {
        /// Total agents, a multiple of 12 [default: 600]
        #[arg(long)]
        agents: Option<usize>,
        /// [default: 2024]
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        artifacts: ArtifactArgs,
    },
    /// Compute the analysis report from completed sessions.
    Analyze {
        /// Store directory or results.jsonl [default: artifacts/store]
        #[arg(long, env = "TRUSTSHIFT_STORE")]
        store: Option<PathBuf>,
        /// Output directory [default: artifacts/analysis]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report thin branches as warnings instead of failing.
        #[arg(long)]
        lenient: bool,
    },
    /// Serve the participant API.
    Serve {
        /// [default: 127.0.0.1]
        #[arg(long)]
        host: Option<String>,
        /// [default: 8080]
        #[arg(long)]
        port: Option<u16>,
        /// Content file replacing the shipped placeholder text.
        #[arg(long, env = "TRUSTSHIFT_CONTENT")]
        content: Option<PathBuf>,
        #[command(flatten)]
        artifacts: ArtifactArgs,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("trustshift: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::SynthDataset { out, rows, seed } => {
            let rows = rows.unwrap_or(cfg.data.synthetic_rows);
            let seed = seed.unwrap_or(cfg.data.synthetic_seed);
            let schema = FeatureSchema::student();
            write_semicolon_file(&out, &schema, &synthetic_students(rows, seed))
                .map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
            println!("wrote {rows} rows to {}", out.display());
            Ok(())
        }
        Command::TrainModels {
            dataset,
            course,
            seed,
            max_seed_attempts,
            epochs,
            out,
        } => {
            if dataset.is_some() {
                cfg.data.path = dataset;
            }
            if let Some(c) = course {
                cfg.data.course = c.into();
            }
            set(&mut cfg.training.seed, seed);
            set(&mut cfg.training.max_seed_attempts, max_seed_attempts);
            set(&mut cfg.training.epochs, epochs);
            set(&mut cfg.paths.models, out);
            cfg.validate()?;
            if let Some(p) = &cfg.data.path {
                if !p.exists() {
                    return Err(CliError::Data(format!(
                        "dataset {} does not exist",
                        p.display()
                    )));
                }
            }
            train(&cfg)
        }
        Command::CacheExplanations {
            models,
            out,
            perturbations,
            k,
        } => {
            set(&mut cfg.paths.models, models);
            set(&mut cfg.paths.explanations, out);
            set(&mut cfg.explainer.n_perturbations, perturbations);
            set(&mut cfg.explainer.k_features, k);
            cfg.validate()?;
            cache_explanations(&cfg)
        }
        Command::Simulate {
            agents,
            seed,
            artifacts,
        } => {
            if let Some(n) = agents {
                if n == 0 || n % 12 != 0 {
                    return Err(CliError::Config(format!(
                        "--agents must be a positive multiple of 12, got {n}"
                    )));
                }
                cfg.simulation.n_agents_per_branch = n / 12;
            }
            set(&mut cfg.simulation.seed, seed);
            apply_artifacts(&mut cfg, artifacts);
            cfg.validate()?;
            simulate(&cfg)
        }
        Command::Analyze {
            store,
            out,
            lenient,
        } => {
            set(&mut cfg.paths.store, store);
            set(&mut cfg.paths.analysis, out);
            analyze(
                &cfg,
                if lenient {
                    Strictness::Lenient
                } else {
                    Strictness::Strict
                },
            )
        }
        Command::Serve {
            host,
            port,
            content,
            artifacts,
        } => {
            set(&mut cfg.server.host, host);
            set(&mut cfg.server.port, port);
            if content.is_some() {
                cfg.server.content = content;
            }
            apply_artifacts(&mut cfg, artifacts);
            cfg.validate()?;
            serve(&cfg)
        }
        Command::ShowConfig => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_artifacts(cfg: &mut Config, a: ArtifactArgs) {
    set(&mut cfg.paths.models, a.models);
    set(&mut cfg.paths.explanations, a.explanations);
    set(&mut cfg.paths.store, a.store);
}

fn require(path: &Path, what: &str, hint: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{what} {} not found; {hint}",
            path.display()
        )))
    }
}

fn train(cfg: &Config) -> Result<(), CliError> {
    let models = train_models(&FeatureSchema::student(), &cfg.pipeline())?;
    models.save(&cfg.paths.models)?;
    let r = &models.report;
    println!(
        "records {} (model train {}, held out {})",
        r.n_records, r.n_model_train, r.n_model_test
    );
    for a in &r.attempts {
        println!(
            "seed {:>4}  good held-out RMSE {:.3}  poor held-out RMSE {:.3}  {}",
            a.seed,
            a.good.heldout_rmse,
            a.poor.heldout_rmse,
            if a.accepted { "accepted" } else { "rejected" }
        );
    }
    if !r.ordered {
        tracing::warn!(
            "no seed gave good RMSE below poor; kept seed {}",
            r.chosen_seed
        );
    }
    println!("wrote {}", cfg.paths.models.display());
    Ok(())
}

fn cache_explanations(cfg: &Config) -> Result<(), CliError> {
    require(
        &cfg.paths.models,
        "models directory",
        "run train-models first",
    )?;
    let models = TrainedModels::load(&cfg.paths.models)?;
    let cache = models.explain(&FeatureSchema::student(), &cfg.explainer)?;
    cache
        .save(&cfg.paths.explanations)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let fid: Vec<f64> = cache
        .entries
        .iter()
        .map(|e| e.explanation.fidelity_r2)
        .collect();
    let min = fid.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = fid.iter().sum::<f64>() / fid.len() as f64;
    println!(
        "{} explanations, fidelity R2 mean {mean:.3} min {min:.3}; wrote {}",
        fid.len(),
        cfg.paths.explanations.display()
    );
    Ok(())
}

fn load_exp(cfg: &Config) -> Result<Arc<trustshift_core::protocol::Experiment>, CliError> {
    require(
        &cfg.paths.models,
        "models directory",
        "run train-models first",
    )?;
    require(
        &cfg.paths.explanations,
        "explanation cache",
        "run cache-explanations first",
    )?;
    Ok(Arc::new(load_experiment(
        &cfg.paths.models,
        &cfg.paths.explanations,
        cfg.score,
    )?))
}

/// Refuse to replace a store that holds anything but synthetic sessions.
fn check_replaceable(store: &Path) -> Result<(), CliError> {
    if !store.exists() {
        return Ok(());
    }
    let s = Store::open(store, false)?;
    for id in s.session_ids()? {
        let session = Session::replay(&s.load_events(&id)?)
            .map_err(|e| CliError::Data(format!("session {id}: {e}")))?;
        if !session.synthetic {
            return Err(CliError::Config(format!(
                "{} holds participant session {id}; choose another --store",
                store.display()
            )));
        }
    }
    Ok(())
}

fn simulate(cfg: &Config) -> Result<(), CliError> {
    let exp = load_exp(cfg)?;
    let store = &cfg.paths.store;
    check_replaceable(store)?;
    let staging = store.with_extension("staging");
    let io = |p: &Path, e: std::io::Error| CliError::Runtime(format!("{}: {e}", p.display()));
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| io(&staging, e))?;
    }
    let clock = Arc::new(ManualClock::new(SIM_EPOCH_MS));
    let service = ExperimentService::open(
        exp,
        &staging,
        ServiceConfig {
            fsync: false,
            ..Default::default()
        },
        clock.clone(),
        IdSource::seeded(cfg.simulation.seed),
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let start = std::time::Instant::now();
    let tokens = run_simulation(&service, &clock, &cfg.simulation)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    drop(service);
    if store.exists() {
        std::fs::remove_dir_all(store).map_err(|e| io(store, e))?;
    }
    std::fs::rename(&staging, store).map_err(|e| io(store, e))?;
    println!(
        "{} synthetic sessions in {:.1}s; store {}",
        tokens.len(),
        start.elapsed().as_secs_f64(),
        store.display()
    );
    Ok(())
}

fn analyze(cfg: &Config, strictness: Strictness) -> Result<(), CliError> {
    let file = results_file(&cfg.paths.store);
    require(
        &file,
        "results file",
        "run simulate or collect sessions first",
    )?;
    let sessions: Vec<Session> = load_results(&file)?
        .into_iter()
        .map(|r| r.session)
        .collect();
    let report = branch_report(&sessions, strictness).map_err(|e| match e {
        AnalysisError::Empty
        | AnalysisError::MissingBranch(_)
        | AnalysisError::InsufficientTrials { .. } => CliError::Data(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    })?;
    write_outputs(&report, &sessions, &cfg.paths.analysis)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "{} sessions, {} testing trials",
        report.n_sessions, report.n_trials
    );
    for t in &report.tests {
        println!(
            "{:<38} {:<28} n={:<5} p={:<10.3e} adj={:<10.3e} {}",
            t.family, t.comparison, t.n, t.raw_p, t.adjusted_p, t.stars
        );
    }
    for w in &report.warnings {
        tracing::warn!("{w}");
    }
    println!("wrote {}", cfg.paths.analysis.display());
    Ok(())
}

fn serve(cfg: &Config) -> Result<(), CliError> {
    let exp = load_exp(cfg)?;
    let content = match &cfg.server.content {
        Some(p) => Content::load(p).map_err(|e| CliError::Data(e.to_string()))?,
        None => Content::shipped(),
    };
    let service = ExperimentService::open(
        exp,
        &cfg.paths.store,
        ServiceConfig {
            timeout_ms: cfg.server.session_timeout_minutes * 60_000,
            fsync: cfg.server.fsync,
        },
        Arc::new(SystemClock),
        IdSource::Random,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let state = AppState::new(Arc::new(service), content);
    let addr = format!("{}:{}", cfg.server.host, cfg.server.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Runtime(format!("bind {addr}: {e}")))?;
        tracing::info!("listening on http://{addr}");
        trustshift_server::serve(listener, state)
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}
