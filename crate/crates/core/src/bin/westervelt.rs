use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use westervelt::error::exit_code;
use westervelt::scenario::{bundled, run, ScenarioConfig, BUNDLED};
use westervelt::Error;

/// Scenario runner for the Westervelt solvers.
#[derive(Parser, Debug)]
#[command(name = "westervelt", version)]
struct Cli {
    /// Output directory (overrides [output] dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for refinement studies and estimates.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for the randomized embedding estimates.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a config file or a bundled scenario by name.
    Run { config: String },
    /// List the bundled scenarios.
    List,
}

fn load(arg: &str) -> Result<ScenarioConfig, Error> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        return ScenarioConfig::parse(&text, path.parent());
    }
    match bundled(arg) {
        Some(text) => ScenarioConfig::parse(text, None),
        None => Err(Error::Config(format!("'{arg}' is neither a readable file nor a bundled scenario"))),
    }
}

fn execute(cli: &Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    match &cli.command {
        Command::List => {
            for (name, text) in BUNDLED {
                let kind = ScenarioConfig::parse(text, None).map(|c| c.kind.to_string()).unwrap_or_else(|e| format!("invalid: {e}"));
                println!("{name:<28} {kind}");
            }
            Ok(())
        }
        Command::Run { config } => {
            let cfg = load(config)?;
            let dir = cli
                .out
                .clone()
                .or_else(|| cfg.output.dir.clone())
                .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
            let out = run(&cfg, &dir, cli.seed)?;
            for (k, v) in &out.summary.entries {
                println!("{k:<36} {v}");
            }
            println!("wrote {}", out.dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::from(exit_code::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
