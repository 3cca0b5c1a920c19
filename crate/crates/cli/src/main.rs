use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use forge_core::acceptance::run_acceptance;
use forge_core::pipeline::{convergence_study, family, run_counterexample, write_csv};
use forge_core::{ForgeConfig, ForgeError};

#[derive(Parser)]
#[command(name = "forge", version, about = "Builds non-isometric conductivity pairs with equal DN maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single counterexample run; writes report.json to the output directory or stdout.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Convergence study over mesh resolutions.
    Converge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<usize>>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Family of n pairs with decreasing amplitude.
    Family {
        #[arg(long)]
        config: PathBuf,
        #[arg(short = 'n', long = "count")]
        n: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Runs every acceptance criterion and prints one line per criterion.
    Selftest,
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("FORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ForgeError::Config(format!("FORGE_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ForgeError::Config(format!("thread pool: {e}")))?;
    Ok(())
}

fn load(path: &Path, output: Option<PathBuf>) -> Result<ForgeConfig> {
    let mut cfg = ForgeConfig::load(path)?;
    if output.is_some() {
        cfg.output_dir = output;
    }
    Ok(cfg)
}

fn emit_csv<T: serde::Serialize>(rows: &[T], dir: Option<&Path>, name: &str) -> Result<()> {
    match dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(ForgeError::from)?;
            let path = d.join(name);
            write_csv(rows, std::fs::File::create(&path).map_err(ForgeError::from)?)?;
            eprintln!("wrote {}", path.display());
        }
        None => write_csv(rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<u8> {
    configure_threads()?;
    match cli.command {
        Command::Run { config, output } => {
            let cfg = load(&config, output)?;
            let report = run_counterexample(&cfg)?;
            match &cfg.output_dir {
                Some(dir) => eprintln!("wrote {}", dir.join("report.json").display()),
                None => std::io::stdout().write_all(report.to_json()?.as_bytes())?,
            }
            eprintln!("verdict: {}", report.verdict);
        }
        Command::Converge { config, resolutions, output } => {
            let cfg = load(&config, output)?;
            let res = resolutions.unwrap_or_else(|| cfg.resolutions.clone());
            let rows = convergence_study(&cfg, &res)?;
            emit_csv(&rows, cfg.output_dir.as_deref(), "convergence.csv")?;
        }
        Command::Family { config, n, output } => {
            let cfg = load(&config, output)?;
            let rows = family(&cfg, n)?;
            emit_csv(&rows, cfg.output_dir.as_deref(), "family.csv")?;
        }
        Command::Selftest => {
            let results = run_acceptance(|r| println!("{r}"));
            let passed = results.iter().filter(|r| r.passed).count();
            println!("{passed} of {} criteria passed", results.len());
            if passed < results.len() {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<ForgeError>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
