use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ebkit::cli::{self, CliError, CliResult, Overrides, EXIT_CONFIG, EXIT_OK};
use ebkit::Error;

/// Early-bird lottery tickets for small transformers.
#[derive(Parser, Debug)]
#[command(name = "ebkit", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Root for run directories [default: config output_dir, then $EBKIT_OUTPUT_DIR, then ./runs]
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Training seed; a comma-separated list for `sweep`
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Prune ratio; a comma-separated list for `sweep`
    #[arg(long, global = true, value_delimiter = ',')]
    p: Vec<f64>,
    /// Detector threshold
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Consecutive sub-threshold distances required
    #[arg(long, global = true)]
    window: Option<usize>,
    /// Worker threads for `sweep` (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Replace an existing run directory
    #[arg(long, global = true)]
    force: bool,
    /// Exit 0 from `sweep` even when some children fail
    #[arg(long, global = true)]
    keep_going: bool,
    /// Log progress to stderr (repeat for more)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run search, retrain and baseline for one config
    Run {
        config: PathBuf,
        /// Override any config key, e.g. --set train.epochs=10
        #[arg(long = "set", value_parser = parse_pair)]
        set: Vec<(String, String)>,
    },
    /// Run the cross product of --p and --seed lists
    Sweep {
        config: PathBuf,
        #[arg(long = "set", value_parser = parse_pair)]
        set: Vec<(String, String)>,
    },
    /// Recompute the heatmap CSV from a masks directory
    Heatmap {
        masks_dir: PathBuf,
        /// Write here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a summary table for a finished run
    Report { run_dir: PathBuf },
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

fn single<T: Copy>(flag: &str, values: &[T]) -> CliResult<Option<T>> {
    match values {
        [] => Ok(None),
        [v] => Ok(Some(*v)),
        _ => Err(CliError::config(Error::Config(format!(
            "--{flag} takes one value outside `sweep`"
        )))),
    }
}

fn execute(cli: Cli) -> CliResult<i32> {
    let g = &cli.global;
    match cli.command {
        Command::Run { config, set } => {
            let overrides = Overrides {
                p: single("p", &g.p)?,
                seed: single("seed", &g.seed)?,
                epsilon: g.epsilon,
                window: g.window,
                set,
            };
            let cfg = cli::load_config(&config, &overrides)?;
            let root = cli::output_root(g.output_dir.as_deref(), &cfg);
            let outcome = cli::cmd_run(&cfg, &root, g.force)?;
            if let Some(f) = &outcome.report.failure {
                eprintln!(
                    "ebkit: run diverged in {} at epoch {}: {} (report written to {})",
                    f.stage,
                    f.epoch,
                    f.detail,
                    outcome.dir.display()
                );
            } else {
                println!("{}", outcome.dir.display());
            }
            Ok(outcome.exit_code())
        }
        Command::Sweep { config, set } => {
            let overrides = Overrides {
                epsilon: g.epsilon,
                window: g.window,
                set,
                ..Default::default()
            };
            let cfg = cli::load_config(&config, &overrides)?;
            let ps = if g.p.is_empty() {
                vec![cfg.train.p]
            } else {
                g.p.clone()
            };
            let seeds = if g.seed.is_empty() {
                vec![cfg.train.seed]
            } else {
                g.seed.clone()
            };
            let root = cli::output_root(g.output_dir.as_deref(), &cfg);
            let outcome = cli::cmd_sweep(&cfg, &ps, &seeds, &root, g.threads, g.force)?;
            for c in &outcome.children {
                if let Err(e) = &c.result {
                    eprintln!("ebkit: child p={} seed={} failed: {e}", c.p, c.seed);
                }
            }
            print!("{}", outcome.summary);
            Ok(if g.keep_going {
                EXIT_OK
            } else {
                outcome.worst_code()
            })
        }
        Command::Heatmap { masks_dir, out } => {
            let csv = cli::cmd_heatmap(&masks_dir)?;
            match out {
                Some(path) => {
                    ebkit::io::write_atomic(&path, csv.as_bytes()).map_err(CliError::other)?
                }
                None => print!("{csv}"),
            }
            Ok(EXIT_OK)
        }
        Command::Report { run_dir } => {
            print!("{}", cli::cmd_report(&run_dir)?);
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("ebkit: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
