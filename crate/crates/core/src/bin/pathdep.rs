use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pathdep::experiment::{self, Experiment, ExperimentConfig, ExperimentError, Suite, EXIT_USAGE};

/// Simulate path-dependent jump SDEs and run statistical verification suites.
#[derive(Parser)]
#[command(name = "pathdep", version)]
struct Cli {
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured ensemble and write one CSV per path.
    Simulate(RunArgs),
    /// Run verification suites and write JSON/CSV reports.
    Verify {
        #[command(flatten)]
        run: RunArgs,
        /// Run only this suite instead of the ones listed in the config.
        #[arg(long, value_enum)]
        suite: Option<Suite>,
    },
    /// Summarise the suite reports found in a run directory.
    Report {
        /// Run directory holding suite reports.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed; overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(args: &RunArgs) -> Result<(Experiment, PathBuf), ExperimentError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args.config.parent().unwrap_or(Path::new(".")).join(&cfg.output.dir),
    };
    Ok((Experiment::new(cfg)?, out))
}

fn run(cli: Cli) -> Result<i32, ExperimentError> {
    match cli.command {
        Command::Simulate(args) => {
            let (x, out) = load(&args)?;
            let m = experiment::simulate(&x, &out)?;
            println!("wrote {} paths to {} (config {})", m.n_paths, out.display(), m.config_hash);
            Ok(experiment::EXIT_PASS)
        }
        Command::Verify { run, suite } => {
            let (x, out) = load(&run)?;
            let suites = match suite {
                Some(s) => vec![s],
                None => x.config.verify.suites.clone(),
            };
            let outcome = experiment::verify(&x, &suites, &out)?;
            for r in &outcome.reports {
                println!("{:<12} {}  ({}/{} cells failed)", r.suite.name(), if r.pass { "PASS" } else { "FAIL" }, r.n_failed, r.n_cells);
                for c in r.failed() {
                    println!("  failed: {}", c.id);
                }
            }
            Ok(outcome.exit_code())
        }
        Command::Report { out } => {
            let outcome = experiment::report(&out)?;
            print!("{}", outcome.summary);
            Ok(outcome.exit_code())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PATHDEP_LOG", "warn")).init();
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_USAGE as u8);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let code = pool.install(|| match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    });
    ExitCode::from(code as u8)
}
