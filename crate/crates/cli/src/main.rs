use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use tedsim_core::cost::{plan_to_csv, plan_to_json, PlanCaps, DEFAULT_BASE_SIZES};
use tedsim_core::harness::{self, Mode, PlanArgs, RunConfig};
use tedsim_core::Error;

#[derive(Parser)]
#[command(name = "tedsim", version, about = "Simulate tensor-expert-data parallel MoE training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run training steps and emit a report.
    Train(RunArgs),
    /// Run the invariant suite on a config and the built-in sweep.
    Verify(RunArgs),
    /// Run training steps and emit only the communication ledger.
    Ledger(RunArgs),
    /// Largest MoE per GPU count, TED against the tensor-parallel-free baseline.
    Plan(PlanCli),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Output {
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    world_size: Option<usize>,
    #[arg(long)]
    tensor_parallel: Option<usize>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Tokens per data-parallel shard.
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    dtd: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    cac: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    ckpt: Option<bool>,
    /// Optimizer tile size in parameters; 0 disables tiling.
    #[arg(long)]
    tile_size: Option<usize>,
    #[arg(long, hide = true)]
    corrupt_drop_order: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct PlanCli {
    /// Memory per GPU in bytes.
    #[arg(long, default_value_t = 16e9)]
    memory: f64,
    /// GPU counts to plan for.
    #[arg(long, value_delimiter = ',', default_values_t = [32, 64, 128, 256, 512])]
    gpus: Vec<usize>,
    #[arg(long, default_value_t = 6)]
    tensor_max: usize,
    #[arg(long, default_value_t = 4)]
    experts_min: usize,
    #[arg(long, default_value_t = 128)]
    experts_max: usize,
    /// Candidate base-model sizes in parameters.
    #[arg(long, value_delimiter = ',')]
    base_sizes: Vec<u64>,
    #[command(flatten)]
    output: Output,
}

/// Failures mapped to exit codes.
enum Failure {
    Invariant(String),
    Config(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::InvalidConfig(_)) => Failure::Config(e),
            _ => Failure::Other(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl RunArgs {
    fn resolve(&self, mode: Mode) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .map_err(Failure::Config)?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.world_size, self.world_size);
        set(&mut cfg.tensor_parallel, self.tensor_parallel);
        set(&mut cfg.experts, self.experts);
        set(&mut cfg.layers, self.layers);
        set(&mut cfg.hidden, self.hidden);
        set(&mut cfg.tokens_per_shard, self.tokens);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.steps = self.steps.unwrap_or(cfg.steps);
        cfg.flags.dtd = self.dtd.unwrap_or(cfg.flags.dtd);
        cfg.flags.cac = self.cac.unwrap_or(cfg.flags.cac);
        cfg.flags.ckpt = self.ckpt.unwrap_or(cfg.flags.ckpt);
        match self.tile_size {
            Some(0) => cfg.flags.tiling = false,
            Some(ts) => {
                cfg.flags.tiling = true;
                cfg.flags.tile_size = ts;
            }
            None => {}
        }
        cfg.flags.corrupt_drop_order |= self.corrupt_drop_order;
        cfg.mode = mode;
        cfg.resolve()?;
        for w in cfg.warnings() {
            warn!("{w}");
        }
        Ok(cfg)
    }
}

fn emit(output: &Output, text: &str) -> anyhow::Result<()> {
    match &output.out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            info!("wrote {}", path.display());
        }
        None => {
            let mut stdout = io::stdout().lock();
            match writeln!(stdout, "{}", text.trim_end()) {
                Err(e) if e.kind() == io::ErrorKind::BrokenPipe => {}
                r => r.context("writing stdout")?,
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve(Mode::Train)?;
            let report = harness::train(&cfg)?;
            let text = match args.output.format {
                Format::Json => report.to_json()?,
                Format::Csv => report.ledger_snapshot().to_csv()?,
            };
            emit(&args.output, &text)?;
            let failed: Vec<_> = report.equivalence.iter().filter(|c| !c.passed).collect();
            if let Some(c) = failed.first() {
                return Err(Failure::Invariant(format!("{} failed for {}", c.name, c.subject)));
            }
        }
        Command::Ledger(args) => {
            let cfg = args.resolve(Mode::Ledger)?;
            let ledger = harness::train(&cfg)?.ledger_snapshot();
            let text = match args.output.format {
                Format::Json => ledger.to_json()?,
                Format::Csv => ledger.to_csv()?,
            };
            emit(&args.output, &text)?;
        }
        Command::Verify(args) => {
            if args.output.format == Format::Csv {
                return Err(Failure::Config(anyhow::anyhow!("verify reports are JSON only")));
            }
            let cfg = args.resolve(Mode::Verify)?;
            let report = harness::verify(&cfg)?;
            emit(&args.output, &report.to_json()?)?;
            let failures: Vec<String> = report
                .failures()
                .map(|c| format!("{} [{}] {}", c.name, c.subject, c.detail))
                .collect();
            eprintln!("{} checks, {} failed", report.checks.len(), failures.len());
            if !failures.is_empty() {
                for f in &failures {
                    eprintln!("FAIL {f}");
                }
                return Err(Failure::Invariant(format!("{} invariant checks failed", failures.len())));
            }
        }
        Command::Plan(args) => {
            let plan = PlanArgs {
                memory_bytes: args.memory,
                world_sizes: args.gpus.clone(),
                caps: PlanCaps {
                    tensor_max: args.tensor_max,
                    experts_min: args.experts_min,
                    experts_max: args.experts_max,
                },
                base_sizes: if args.base_sizes.is_empty() {
                    DEFAULT_BASE_SIZES.to_vec()
                } else {
                    args.base_sizes.clone()
                },
            };
            let rows = harness::plan(&plan)?;
            let text = match args.output.format {
                Format::Json => plan_to_json(&rows)?,
                Format::Csv => plan_to_csv(&rows)?,
            };
            emit(&args.output, &text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
