use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use roughdyn::experiment::{builtin, catalog_json, run_experiment, ExperimentSpec};
use roughdyn::Error;

#[derive(Parser)]
#[command(name = "roughdyn", version, about = "Rough differential equation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a spec file or a built-in spec by name.
    Run {
        spec: String,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed (overrides `seeds.base`).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker thread cap.
        #[arg(long)]
        threads: Option<usize>,
        /// Evaluate the spec's `[check]` table; exit 4 on failure.
        #[arg(long)]
        check: bool,
    },
    /// Print the built-in catalog as JSON.
    List,
}

const EXIT_SPEC: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CHECK: u8 = 4;

fn load(spec: &str) -> Result<ExperimentSpec, Error> {
    let path = Path::new(spec);
    if path.exists() {
        return ExperimentSpec::from_path(path).map_err(|e| match e {
            Error::Spec(m) => Error::Spec(format!("{}: {m}", path.display())),
            other => other,
        });
    }
    match builtin(spec) {
        Some(b) => ExperimentSpec::from_toml_str(b.spec),
        None => Err(Error::Spec(format!("{spec}: no such file or built-in spec"))),
    }
}

fn run(spec: &str, out: Option<PathBuf>, seed: Option<u64>, threads: Option<usize>, check: bool) -> ExitCode {
    if let Some(k) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let mut spec = match load(spec) {
        Ok(s) => s,
        Err(e @ Error::Spec(_)) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_SPEC);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Some(s) = seed {
        spec.seeds.base = s;
    }
    let dir = out
        .or_else(|| spec.output.dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| {
            let label = spec.name.clone().unwrap_or_else(|| "experiment".into());
            PathBuf::from("out").join(label)
        });
    let outcome = match run_experiment(&spec, &dir) {
        Ok(o) => o,
        Err(e @ Error::Spec(_)) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_SPEC);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Some(f) = &outcome.failure {
        eprintln!("task failed: {f}");
        eprintln!("partial artifacts kept in {}", dir.display());
        return ExitCode::from(EXIT_NUMERICAL);
    }
    println!("wrote {} files to {}", outcome.files.len() + 1, dir.display());
    if check {
        for c in &outcome.checks {
            println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        if !outcome.checks_passed() {
            return ExitCode::from(EXIT_CHECK);
        }
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            spec,
            out,
            seed,
            threads,
            check,
        } => run(&spec, out, seed, threads, check),
        Command::List => match catalog_json() {
            Ok(text) => {
                // a closed pipe (e.g. `| head`) is not an error
                let _ = writeln!(std::io::stdout(), "{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
    }
}
