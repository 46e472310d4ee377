//! `racon`: data generation, database building, training, evaluation and serving.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use racon_core::checkpoint::Checkpoint;
use racon_core::eval::{emit_report, evaluate_system, save_records, EvalConfig};
use racon_core::motion::{generate_synthetic_clips, load_clips, save_clips};
use racon_core::retrieval::{build_database, load_database, save_database, RetrievalEnv};
use racon_core::trainer::{TrainConfig, Trainer};
use racon_service::{port_from_env, serve, AppState, ServeOptions, ServiceError, Shared};

#[derive(Debug, Parser)]
#[command(name = "racon", version, about = "Retrieval-augmented locomotion control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic motion clips.
    GenData {
        /// walk, run, turn, skip or zombie.
        #[arg(long)]
        style: String,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a retrieval database from clip files.
    BuildDb {
        /// Clip file; repeat for several.
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        /// Database name; defaults to the output file stem.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the retriever, controller and discriminator.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for metrics and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint that carries discriminator buffers.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Database files, comma separated or repeated.
        #[arg(long = "db", value_delimiter = ',', required = true)]
        dbs: Vec<PathBuf>,
        /// Report path; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-episode records as JSON lines.
        #[arg(long)]
        records: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Run the steering server.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        dbs: Vec<PathBuf>,
        /// Overrides RACON_PORT.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "0.0.0.0")]
        host: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a database file as JSON.
    InspectDb {
        #[arg(long)]
        db: PathBuf,
    },
    /// Print the effective training (or evaluation) configuration as TOML.
    PrintConfig {
        #[command(flatten)]
        config: ConfigArgs,
        /// Print evaluation settings instead.
        #[arg(long)]
        eval: bool,
        #[command(flatten)]
        eval_args: EvalArgs,
    },
}

/// Training configuration: flags override the file, which overrides defaults.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Database files, comma separated or repeated; replaces `databases`.
    #[arg(long = "db", value_delimiter = ',')]
    dbs: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    env_count: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    retriever_lr: Option<f64>,
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    ra_discriminator: Option<bool>,
    #[arg(long)]
    learnable_retriever: Option<bool>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
                TrainConfig::from_toml(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => TrainConfig::default(),
        };
        if !self.dbs.is_empty() {
            cfg.databases = self.dbs.clone();
        }
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f {
                    cfg.$f = v;
                }
            )*};
        }
        set!(
            seed,
            iterations,
            env_count,
            horizon,
            lr,
            retriever_lr,
            minibatch,
            checkpoint_every,
            ra_discriminator,
            learnable_retriever
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// TOML evaluation settings.
    #[arg(long = "eval-config")]
    eval_config: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long = "eval-seed")]
    eval_seed: Option<u64>,
    #[arg(long)]
    fid_samples: Option<usize>,
    #[arg(long)]
    mmodality_goals: Option<usize>,
    #[arg(long)]
    mmodality_runs: Option<usize>,
}

impl EvalArgs {
    fn resolve(&self) -> Result<EvalConfig, CliError> {
        let mut e = match &self.eval_config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => EvalConfig::default(),
        };
        if let Some(v) = self.episodes {
            e.episodes = v;
        }
        if let Some(v) = self.max_len {
            e.max_len = v;
        }
        if let Some(v) = self.eval_seed {
            e.seed = v;
        }
        if let Some(v) = self.fid_samples {
            e.fid_samples = v;
        }
        if let Some(v) = self.mmodality_goals {
            e.mmodality_goals = v;
        }
        if let Some(v) = self.mmodality_runs {
            e.mmodality_runs = v;
        }
        if e.episodes == 0 || e.max_len == 0 {
            return Err(CliError::Validation("episodes and max_len must be positive".into()));
        }
        Ok(e)
    }
}

#[derive(Debug)]
enum CliError {
    /// Bad input: exit code 1.
    Validation(String),
    /// Failure while doing the work: exit code 2.
    Runtime(String),
}

impl From<racon_core::Error> for CliError {
    fn from(e: racon_core::Error) -> Self {
        use racon_core::Error as E;
        match e {
            E::Io { .. } | E::IoBare(_) | E::Format(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Core(c) => c.into(),
            ServiceError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn load_env(paths: &[PathBuf], period: usize) -> Result<RetrievalEnv, CliError> {
    if paths.is_empty() {
        return Err(CliError::Validation(
            "no databases given (use --db or `databases` in the config)".into(),
        ));
    }
    let mut dbs = Vec::with_capacity(paths.len());
    for p in paths {
        dbs.push(Arc::new(load_database(p)?));
    }
    Ok(RetrievalEnv::new(dbs, period)?)
}

fn write_json(value: &serde_json::Value, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json serializes") + "\n";
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { style, count, seed, out } => {
            let clips = generate_synthetic_clips(&style, count, seed)?;
            save_clips(&clips, &out)?;
            tracing::info!(clips = clips.len(), path = %out.display(), "wrote clips");
        }
        Command::BuildDb { input, name, out } => {
            let mut clips = Vec::new();
            for p in &input {
                clips.extend(load_clips(p)?);
            }
            let name = match name {
                Some(n) => n,
                None => out
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| CliError::Validation("cannot derive a name from --out; pass --name".into()))?
                    .to_string(),
            };
            let db = build_database(clips, &name)?;
            save_database(&db, &out)?;
            tracing::info!(name, clips = db.len(), path = %out.display(), "wrote database");
        }
        Command::Train { config, out, resume } => {
            let mut trainer = match resume {
                Some(p) => {
                    let mut ckpt = Checkpoint::load(&p)?;
                    if let Some(n) = config.iterations {
                        ckpt.config.iterations = n;
                    }
                    let paths = if config.dbs.is_empty() { ckpt.config.databases.clone() } else { config.dbs.clone() };
                    let env = load_env(&paths, ckpt.config.period)?;
                    Trainer::from_checkpoint(ckpt, env)?
                }
                None => {
                    let cfg = config.resolve()?;
                    let env = load_env(&cfg.databases, cfg.period)?;
                    Trainer::new(cfg, env)?
                }
            };
            std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
            std::fs::write(out.join("config.toml"), trainer.cfg.to_toml())
                .map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
            let metrics = trainer.run(Some(&out))?;
            if let Some(m) = metrics.last() {
                tracing::info!(iteration = m.iteration, goal_return = m.goal_return, trate = m.trate, "training done");
            }
        }
        Command::Eval {
            checkpoint,
            dbs,
            out,
            records,
            eval,
        } => {
            let eval = eval.resolve()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let env = load_env(&dbs, ckpt.config.period)?;
            ckpt.check_compatible(&env)?;
            let names: Vec<String> = env.names().map(str::to_string).collect();
            let (report, recs) = evaluate_system(&ckpt.agent, &env, &ckpt.config, &eval, &names)?;
            if let Some(p) = records {
                save_records(&recs, p)?;
            }
            match out {
                Some(p) => emit_report(&report, p)?,
                None => write_json(&serde_json::to_value(&report).expect("report serializes"), None)?,
            }
        }
        Command::Serve {
            checkpoint,
            dbs,
            port,
            host,
            seed,
        } => {
            let shared = Shared::load(&checkpoint, &dbs)?;
            let port = match port {
                Some(p) => p,
                None => port_from_env()?,
            };
            let opts = ServeOptions {
                seed,
                ..ServeOptions::default()
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .map_err(|e| CliError::Runtime(format!("bind {host}:{port}: {e}")))?;
                serve(listener, AppState::new(shared, opts)).await.map_err(CliError::from)
            })?;
        }
        Command::InspectDb { db } => {
            let d = load_database(&db)?;
            let ids = d.clips().iter().map(|c| c.clip_id);
            let (h_lo, h_hi) = d.height_range();
            let styles: std::collections::BTreeSet<&str> = d.clips().iter().map(|c| c.style_tag.as_str()).collect();
            let v = serde_json::json!({
                "name": d.name(),
                "clips": d.len(),
                "key_dim": d.dim(),
                "frames_per_clip": d.frames_per_clip(),
                "endpoints": d.endpoint_count(),
                "styles": styles,
                "id_min": ids.clone().min(),
                "id_max": ids.max(),
                "height_range": [h_lo, h_hi],
                "key_mean": d.norm_stats().mean,
                "key_std": d.norm_stats().std,
            });
            write_json(&v, None)?;
        }
        Command::PrintConfig { config, eval, eval_args } => {
            if eval {
                let e = eval_args.resolve()?;
                print!("{}", toml::to_string(&e).expect("config serializes"));
            } else {
                print!("{}", config.resolve()?.to_toml());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
