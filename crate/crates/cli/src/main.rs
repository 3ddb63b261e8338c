//! `tss`: run continual-learning experiments and inspect their artifacts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tss_core::experiment::{self, ExperimentConfig};
use tss_core::{StreamKind, TssError, Variant};

#[derive(Debug, Parser)]
#[command(name = "tss", version, about = "Task-incremental sub-network training")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Shorthand for `tss inspect <PATH>`.
    #[arg(long, value_name = "PATH", conflicts_with = "compare")]
    inspect: Option<PathBuf>,

    /// Shorthand for `tss compare <RUN_DIR>...`.
    #[arg(long, value_name = "RUN_DIR", num_args = 1..)]
    compare: Option<Vec<PathBuf>>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every requested variant on every seed and write reports.
    Run(RunArgs),
    /// Summarize gate, importance and head files.
    Inspect { path: PathBuf },
    /// Tabulate results from several run directories sharing one stream.
    Compare {
        #[arg(required = true, num_args = 2..)]
        run_dirs: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON config file; flags given here override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stream: Option<StreamKind>,
    #[arg(long)]
    tasks: Option<usize>,
    /// Comma-separated variant names, e.g. `tss,one`.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_scores: Option<f64>,
    #[arg(long)]
    lr_heads: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl RunArgs {
    fn resolve(self) -> Result<ExperimentConfig, TssError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.stream {
            cfg.stream.kind = v;
        }
        if let Some(v) = self.tasks {
            cfg.stream.n_tasks = v;
        }
        if let Some(v) = self.variants {
            cfg.variants = v;
        }
        if let Some(v) = self.seeds {
            cfg.seeds = v;
        }
        if let Some(v) = self.out {
            cfg.out = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.max_epochs = v;
        }
        if let Some(v) = self.lr_scores {
            cfg.train.lr_scores = v;
        }
        if let Some(v) = self.lr_heads {
            cfg.train.lr_heads = v;
        }
        if let Some(v) = self.threshold {
            cfg.train.threshold = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(err: &TssError) -> u8 {
    match err {
        TssError::Config(_) | TssError::Invalid(_) | TssError::Json(_) => 2,
        TssError::Numerical { .. } => 3,
        TssError::Io { .. } | TssError::Corrupt { .. } | TssError::Format(_) => 4,
        TssError::Shape(_) | TssError::MissingHead(_) => 1,
    }
}

fn run(args: RunArgs) -> Result<(), TssError> {
    let cfg = args.resolve()?;
    let outcome = experiment::run_experiment(&cfg)?;
    for dir in &outcome.run_dirs {
        println!("wrote {}", dir.display());
    }
    let summary = cfg.out.join("summary.md");
    print!(
        "{}",
        std::fs::read_to_string(&summary).map_err(|e| TssError::Io {
            path: summary.clone(),
            source: e,
        })?
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), TssError> {
    if let Some(path) = cli.inspect {
        print!("{}", experiment::inspect(&path)?);
        return Ok(());
    }
    if let Some(dirs) = cli.compare {
        print!("{}", experiment::compare(&dirs)?.markdown);
        return Ok(());
    }
    match cli.command {
        Some(Command::Run(args)) => run(args),
        Some(Command::Inspect { path }) => {
            print!("{}", experiment::inspect(&path)?);
            Ok(())
        }
        Some(Command::Compare { run_dirs }) => {
            print!("{}", experiment::compare(&run_dirs)?.markdown);
            Ok(())
        }
        None => Err(TssError::Invalid(
            "no command given; try `tss run`, `tss inspect` or `tss compare`".into(),
        )),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
