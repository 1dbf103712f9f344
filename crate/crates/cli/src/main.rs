//! `sdd`: train score models, sample, and run whole-score/self-score defect
//! detection from a flat configuration file.

mod commands;
mod config;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::DetectOptions;
use config::RunConfig;
use setup::CliResult;

#[derive(Parser)]
#[command(name = "sdd", version, about = "Score-based diffusion defect detection")]
struct Cli {
    /// Worker threads for data-parallel loops (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; overrides `seed` from the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to load; overrides `checkpoint` from the file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(p) = &self.checkpoint {
            let abs = std::path::absolute(p).unwrap_or_else(|_| p.clone());
            cfg.set("checkpoint", &abs.display().to_string())?;
        }
        cfg.check_paths()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DetectArgs {
    /// Override `detect.combine`.
    #[arg(long)]
    combine: Option<String>,
    /// Use the exact toy-mixture score instead of a checkpoint.
    #[arg(long, conflicts_with = "oracle_stub")]
    oracle: bool,
    /// Use each input's own self-score as the model; all maps become zero.
    #[arg(long)]
    oracle_stub: bool,
    /// Record wall-clock time (makes outputs run-dependent).
    #[arg(long)]
    timing: bool,
}

impl DetectArgs {
    fn apply(&self, cfg: &mut RunConfig) -> CliResult<DetectOptions> {
        if let Some(c) = &self.combine {
            cfg.set("detect.combine", c)?;
        }
        Ok(DetectOptions {
            oracle: self.oracle,
            stub: self.oracle_stub,
            timing: self.timing,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset to disk with a manifest.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train a score network by denoising score matching.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Draw samples by integrating from the prior.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        #[arg(short, long, default_value_t = 16)]
        n: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Compute anomaly maps and scores for the test split.
    Detect {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        detect: DetectArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Image and pixel AUROC for one or more `detect` output directories.
    Eval {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Trajectories of the three reference points on the 2-D toy.
    Toy2d {
        #[command(flatten)]
        run: RunArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Count network evaluations for multi-scale and continuous detection.
    Nfe {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        detect: DetectArgs,
        #[arg(short, long, default_value_t = 10)]
        n: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        sdd_core::exec::set_threads(n);
    }
    match cli.command {
        Command::GenData { run, out } => commands::gen_data(&run.load()?, &out),
        Command::Train { run, out } => commands::train(&run.load()?, &out),
        Command::Sample { run, n, out } => commands::sample(&run.load()?, n, &out),
        Command::Detect { run, detect, out } => {
            let mut cfg = run.load()?;
            let opts = detect.apply(&mut cfg)?;
            commands::detect(&cfg, &opts, &out)
        }
        Command::Eval { runs, out } => commands::eval(&runs, &out),
        Command::Toy2d { run, out } => {
            let checkpoint = run.checkpoint.is_some();
            let cfg = run.load()?;
            let checkpoint = checkpoint || cfg.has("checkpoint");
            commands::toy2d(&cfg, checkpoint, &out)
        }
        Command::Nfe { run, detect, n, out } => {
            let mut cfg = run.load()?;
            let opts = detect.apply(&mut cfg)?;
            commands::nfe(&cfg, &opts, n, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
