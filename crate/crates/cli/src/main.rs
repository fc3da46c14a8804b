//! `anomize` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 runtime
//! abort, 4 I/O error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use anomize::dataio::synth::SynthSpec;
use anomize::dataio::workspace_root;
use clap::{Parser, Subcommand, ValueEnum};

use commands::StagePlan;
use config::Overrides;
use error::{CliError, Result};

#[derive(Parser)]
#[command(name = "anomize", version, about = "Open-vocabulary video anomaly detection")]
struct Cli {
    /// Run configuration (TOML). Defaults to anomize.toml in the workspace.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root for relative paths. Falls back to $ANOMIZE_WORKSPACE, then the
    /// current directory.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    /// Overrides the training and initialization seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run directory name under the configured runs path.
    #[arg(long, global = true)]
    run: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate label descriptions and concept nouns, then embed both.
    PrepareText,
    /// Train the model.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Single-phase training of every module at once.
        #[arg(long, conflicts_with = "stage")]
        joint: bool,
        /// Let stage 2 start from a fresh model instead of the stage-1 checkpoint.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dynamic-stream share of the fused score.
        #[arg(long)]
        beta: Option<f64>,
        /// Output directory (default: <run>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one feature file frame by frame.
    Score {
        /// Feature file to score.
        features: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
        /// Output directory (default: <run>/score/<file stem>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic benchmark.
    Synth {
        /// Generator settings (JSON, or TOML by extension); defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory (default: the workspace).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    let workspace = workspace_root(cli.workspace.as_deref());
    let overrides = Overrides {
        seed: cli.seed,
        run: cli.run.clone(),
    };
    let load = || config::load(cli.config.as_deref(), &workspace, &overrides);
    match cli.command {
        Command::PrepareText => {
            for p in commands::prepare_text(&load()?)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train {
            stage,
            joint,
            from_scratch,
        } => {
            let plan = match (joint, stage) {
                (true, _) => StagePlan::Joint,
                (false, StageArg::One) => StagePlan::One,
                (false, StageArg::Two) => StagePlan::Two,
                (false, StageArg::All) => StagePlan::All,
            };
            print!("{}", commands::train(&load()?, plan, from_scratch)?);
        }
        Command::Eval { checkpoint, beta, out } => {
            let r = load()?;
            let out = out.map(|p| anomize::dataio::resolve(&workspace, &p));
            let report = commands::eval(&r, checkpoint.as_deref(), beta, out.as_deref())?;
            print!("{}", report.to_table());
        }
        Command::Score {
            features,
            checkpoint,
            beta,
            out,
        } => {
            let r = load()?;
            let out = out.map(|p| anomize::dataio::resolve(&workspace, &p));
            let pred = commands::score(&r, checkpoint.as_deref(), &features, beta, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&pred).expect("prediction serializes"));
        }
        Command::Synth { spec, out } => {
            let mut s = match spec {
                Some(p) => commands::load_spec(&anomize::dataio::resolve(&workspace, &p))?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let dir = out.map_or_else(|| workspace.clone(), |p| anomize::dataio::resolve(&workspace, &p));
            print!("{}", commands::synth(&s, &dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.code())
        }
    }
}
