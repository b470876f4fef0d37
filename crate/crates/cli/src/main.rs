//! `tempedit`: data generation, training, sampling, distillation and
//! evaluation from the command line.
//!
//! Every command takes `--config <json>` (a config or a previous run's
//! `repro.json`) plus flag overrides, writes into `--out`, and leaves a
//! `repro.json` there that re-executes the run bit for bit.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tempedit::sampler::Solver;
use tempedit::worldgen::TaskKind;

use config::{load_config, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Engine(#[from] tempedit::Error),
    #[error("{0}")]
    Input(String),
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "tempedit", version, about = "Image editing as two-frame video generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config or a `repro.json` from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct SamplerFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    reason_steps: Option<usize>,
    #[arg(long)]
    reason_len: Option<usize>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long, value_parser = parse_solver)]
    solver: Option<Solver>,
}

#[derive(Args, Debug, Clone, Default)]
struct SourceFlags {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory with `manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    episode: Option<usize>,
    /// Condition frame as a PPM file (with --instruction).
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    instruction: Option<usize>,
    /// Use the closed-form world from the config.
    #[arg(long)]
    oracle: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural edit dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Episodes per task kind, e.g. `--count move=100`.
        #[arg(long = "count", value_parser = parse_count)]
        counts: Vec<(TaskKind, usize)>,
        /// Re-render the episodes listed in an existing dataset directory.
        #[arg(long)]
        from_manifest: Option<PathBuf>,
    },
    /// Train the denoiser with the flow objective.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Edit one frame.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceFlags,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Export the full reasoning trajectory as a frame strip.
    Trajectory {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceFlags,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Distill a few-step student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceFlags,
        #[arg(long)]
        student_steps: Option<usize>,
        #[arg(long)]
        update_ratio: Option<usize>,
        /// Student updates.
        #[arg(long)]
        cycles: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score a checkpoint on dataset episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceFlags,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Episode range `start..end`.
        #[arg(long, value_parser = parse_range)]
        range: Option<[usize; 2]>,
    },
    /// Run the sampler on a closed-form world and report moments and
    /// solver order.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn parse_solver(s: &str) -> Result<Solver, String> {
    match s {
        "euler" => Ok(Solver::Euler),
        "heun" => Ok(Solver::Heun),
        _ => Err(format!("unknown solver '{s}' (euler or heun)")),
    }
}

fn parse_count(s: &str) -> Result<(TaskKind, usize), String> {
    let (k, n) = s.split_once('=').ok_or("expected KIND=N")?;
    let kind = serde_json::from_value(serde_json::Value::String(k.to_uppercase())).map_err(|_| format!("unknown task kind '{k}'"))?;
    Ok((kind, n.parse().map_err(|e| format!("bad count '{n}': {e}"))?))
}

fn parse_range(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once("..").ok_or("expected START..END")?;
    let a = a.parse().map_err(|e| format!("bad start: {e}"))?;
    let b = b.parse().map_err(|e| format!("bad end: {e}"))?;
    if a >= b {
        return Err("empty range".into());
    }
    Ok([a, b])
}

fn base_config(common: &Common, name: &str) -> CliResult<RunConfig> {
    match &common.config {
        Some(path) => load_config(path, name),
        None => Ok(RunConfig::default()),
    }
}

fn apply_sampler(cfg: &mut RunConfig, f: &SamplerFlags, seed: Option<u64>) {
    let s = &mut cfg.sampler;
    s.steps = f.steps.unwrap_or(s.steps);
    s.reason_steps = f.reason_steps.unwrap_or(s.reason_steps);
    s.reason_len = f.reason_len.unwrap_or(s.reason_len);
    s.shift = f.shift.unwrap_or(s.shift);
    s.solver = f.solver.unwrap_or(s.solver);
    s.seed = seed.unwrap_or(s.seed);
}

fn apply_source(cfg: &mut RunConfig, f: &SourceFlags) {
    let i = &mut cfg.inputs;
    if f.checkpoint.is_some() {
        i.checkpoint = f.checkpoint.clone();
    }
    if f.manifest.is_some() {
        i.manifest = f.manifest.clone();
    }
    if f.image.is_some() {
        i.image = f.image.clone();
    }
    i.episode = f.episode.unwrap_or(i.episode);
    i.instruction = f.instruction.unwrap_or(i.instruction);
    cfg.use_oracle |= f.oracle;
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, counts, from_manifest } => {
            let mut cfg = base_config(&common, "gen-data")?;
            if !counts.is_empty() {
                cfg.data.counts = counts.into_iter().collect();
            }
            cfg.data.seed = common.seed.unwrap_or(cfg.data.seed);
            commands::gen_data(cfg, from_manifest, &common.out)
        }
        Command::Train { common, manifest, steps, lr, batch_size, checkpoint_every } => {
            let mut cfg = base_config(&common, "train")?;
            if manifest.is_some() {
                cfg.inputs.manifest = manifest;
            }
            let t = &mut cfg.train;
            t.steps = steps.unwrap_or(t.steps);
            t.lr = lr.unwrap_or(t.lr);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.seed = common.seed.unwrap_or(t.seed);
            cfg.checkpoint_every = checkpoint_every.unwrap_or(cfg.checkpoint_every);
            commands::train(cfg, &common.out)
        }
        Command::Sample { common, source, sampler } => {
            let mut cfg = base_config(&common, "sample")?;
            apply_source(&mut cfg, &source);
            apply_sampler(&mut cfg, &sampler, common.seed);
            commands::sample(cfg, &common.out, false)
        }
        Command::Trajectory { common, source, sampler } => {
            let mut cfg = base_config(&common, "trajectory")?;
            apply_source(&mut cfg, &source);
            apply_sampler(&mut cfg, &sampler, common.seed);
            commands::sample(cfg, &common.out, true)
        }
        Command::Distill { common, source, student_steps, update_ratio, cycles, lr } => {
            let mut cfg = base_config(&common, "distill")?;
            apply_source(&mut cfg, &source);
            let d = &mut cfg.distill;
            d.student_steps = student_steps.unwrap_or(d.student_steps);
            d.update_ratio = update_ratio.unwrap_or(d.update_ratio);
            d.steps = cycles.unwrap_or(d.steps);
            d.lr = lr.unwrap_or(d.lr);
            d.seed = common.seed.unwrap_or(d.seed);
            commands::distill(cfg, &common.out)
        }
        Command::Eval { common, source, sampler, range } => {
            let mut cfg = base_config(&common, "eval")?;
            apply_source(&mut cfg, &source);
            apply_sampler(&mut cfg, &sampler, common.seed);
            if range.is_some() {
                cfg.inputs.range = range;
            }
            commands::eval(cfg, &common.out)
        }
        Command::OracleCheck { common, sampler, samples } => {
            let mut cfg = base_config(&common, "oracle-check")?;
            apply_sampler(&mut cfg, &sampler, common.seed);
            cfg.oracle_samples = samples.unwrap_or(cfg.oracle_samples);
            commands::oracle_check(cfg, &common.out)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
