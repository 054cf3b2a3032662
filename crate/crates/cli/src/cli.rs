//! Argument definitions and dispatch for the `granu` binary.

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use clap::{Args, Parser, Subcommand};
use granu::checkpoint::Checkpoint;
use granu::dataset::Dataset;
use granu::eval::EvalConfig;
use granu::matching::Strategy;
use granu::scene::DataType;

use crate::commands::{
    ablate, eval_checkpoint, gen_dataset, heldout_scenes, object_by_name, train_config_for, train_to, GenConfig,
};
use crate::error::CliResult;
use crate::server::{serve, AppState};

/// True when `GRANU_LOG` is set to anything but `off`, `0` or the empty string.
pub fn log_enabled() -> bool {
    static ON: OnceLock<bool> = OnceLock::new();
    *ON.get_or_init(|| std::env::var("GRANU_LOG").is_ok_and(|v| !matches!(v.as_str(), "" | "0" | "off")))
}

#[derive(Debug, Parser)]
#[command(name = "granu", version, about = "Multi-granularity promptable segmentation on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset file of synthetic scenes.
    GenData(GenArgs),
    /// Train a model and write a checkpoint plus a CSV log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train with many-to-one and many-to-many matching on identical data and compare.
    Ablate(AblateArgs),
    /// Serve click and box inference over HTTP.
    Serve(ServeArgs),
}

fn parse_mixture(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated weights, got {s:?}"));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("bad weight {p:?}"))?;
    }
    Ok(out)
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: granu::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output dataset file.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fractions of class-agnostic, object-level and part-level scenes.
    #[arg(long, value_parser = parse_mixture, default_value = "1,0,0")]
    pub mixture: [f64; 3],
    /// Object concept (name or index) whose part labels are dropped.
    #[arg(long)]
    pub withhold: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output checkpoint; the log goes to the same path with a `.csv` suffix.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    /// Sampling weights of class-agnostic, object-level and part-level data.
    #[arg(long, value_parser = parse_mixture)]
    pub mixture: Option<[f64; 3]>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Leading fraction of steps that see class-agnostic data only.
    #[arg(long)]
    pub stage1: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub clicks: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Object concept (name or index) whose part recognition is scored.
    #[arg(long)]
    pub transfer: Option<String>,
    /// Print `key=value` lines instead of a table.
    #[arg(long)]
    pub kv: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Held-out class-agnostic scenes to score on.
    #[arg(long, default_value_t = 60)]
    pub heldout: usize,
    /// Also run one-to-one matching.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
}

pub fn run(cli: Cli, out: &mut impl Write) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => {
            let data = gen_dataset(&gen_config(&a)?)?;
            data.dump(&a.dataset)?;
            writeln!(out, "wrote {} scenes to {}", data.samples.len(), a.dataset.display())?;
        }
        Command::Train(a) => {
            let data = Dataset::load(&a.dataset)?;
            let mut cfg = train_config_for(&data);
            cfg.seed = a.seed;
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            if let Some(s) = a.strategy {
                cfg.strategy = s;
            }
            if let Some(m) = a.mixture {
                cfg.mixture = m;
            }
            if let Some(lr) = a.lr {
                cfg.lr = lr;
            }
            if let Some(f) = a.stage1 {
                cfg.stage1_fraction = f;
            }
            let log = a.checkpoint.with_extension("csv");
            let ckpt = train_to(&cfg, &data, &a.checkpoint, &log)?;
            writeln!(
                out,
                "trained {} steps ({}), checkpoint {}, log {}, final loss {:.4}",
                ckpt.step,
                cfg.strategy,
                a.checkpoint.display(),
                log.display(),
                ckpt.metrics.get("final_loss").copied().unwrap_or(f64::NAN)
            )?;
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let data = Dataset::load(&a.dataset)?;
            let transfer_object = a.transfer.as_deref().map(|n| object_by_name(&data.vocab, n)).transpose()?;
            let cfg = EvalConfig {
                clicks_per_scene: a.clicks,
                seed: a.seed,
                transfer_object,
                ..EvalConfig::default()
            };
            let report = eval_checkpoint(&ckpt, &data, &cfg)?;
            if a.kv {
                write!(out, "{}", report.to_kv())?;
            } else {
                write!(out, "{}", report.to_table())?;
            }
        }
        Command::Ablate(a) => {
            let data = Dataset::load(&a.dataset)?;
            let mut cfg = train_config_for(&data);
            cfg.seed = a.seed;
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            if let Some(lr) = a.lr {
                cfg.lr = lr;
            }
            let held = heldout_scenes(a.seed, a.heldout, DataType::ClassAgnostic)?;
            let strategies: &[Strategy] = if a.all {
                &Strategy::ALL
            } else {
                &[Strategy::ManyToOne, Strategy::ManyToMany]
            };
            let res = ablate(&cfg, &data, &held, &EvalConfig::default(), strategies)?;
            writeln!(out, "{} steps, seed {}, {} held-out scenes", cfg.steps, cfg.seed, held.len())?;
            write!(out, "{}", res.to_table())?;
        }
        Command::Serve(a) => {
            let bytes = std::fs::read(&a.checkpoint)?;
            let data = Dataset::load(&a.dataset)?;
            let state = Arc::new(AppState::new(&bytes, data)?);
            let addr = SocketAddr::new(a.host, a.port);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("serving {} scenes on http://{}", state.scene_count(), listener.local_addr()?);
                serve(listener, state).await
            })?;
        }
    }
    Ok(())
}

fn gen_config(a: &GenArgs) -> CliResult<GenConfig> {
    let mut cfg = GenConfig {
        count: a.count,
        seed: a.seed,
        mixture: a.mixture,
        ..GenConfig::default()
    };
    if let Some(name) = &a.withhold {
        cfg.withhold_parts_for = Some(object_by_name(&cfg.scene.vocab, name)?);
    }
    Ok(cfg)
}

/// Parses the process arguments, runs, and returns the exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
