use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use microtopt_cli::commands;
use microtopt_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "microtopt", version, about = "Microstructure homogenization and inverse design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trace the homogenized stress-strain path of a stored design.
    Homogenize {
        #[command(flatten)]
        common: Common,
        /// Element density file.
        #[arg(long)]
        density: PathBuf,
        /// Number of load increments.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Optimize a layout toward a target tangent.
    Optimize {
        #[command(flatten)]
        common: Common,
    },
    /// Compare adjoint and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Element density file.
        #[arg(long)]
        density: PathBuf,
        /// Number of elements to sample.
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mesh resolution.
    #[arg(long, num_args = 2, value_names = ["NX", "NY"])]
    resolution: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for automatic.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(r) = &self.resolution {
            cfg.mesh.nx = r[0];
            cfg.mesh.ny = r[1];
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if cfg.threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build_global()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        }
        microtopt::init_backend();
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Homogenize { common, density, samples } => {
            let mut cfg = common.load()?;
            if let Some(n) = samples {
                cfg.homogenize.samples = n;
            }
            let path = commands::homogenize(&cfg, &density)?;
            if let Some(last) = path.last() {
                println!(
                    "{} samples, final S = [{:.6e}, {:.6e}, {:.6e}]",
                    path.len(),
                    last.s_int[0],
                    last.s_int[1],
                    last.s_int[2]
                );
            }
        }
        Command::Optimize { common } => {
            let cfg = common.load()?;
            let outcome = commands::optimize(&cfg)?;
            let r = &outcome.result;
            let last = r.history.last();
            println!(
                "{:?} after {} iterations, objective {:.6e}, volume fraction {:.4}",
                r.termination,
                r.history.len(),
                last.map_or(f64::NAN, |h| h.objective),
                last.map_or(f64::NAN, |h| h.volume_fraction)
            );
        }
        Command::Gradcheck { common, density, samples } => {
            let mut cfg = common.load()?;
            if let Some(n) = samples {
                cfg.gradcheck.samples = n;
            }
            let (report, table) = commands::gradcheck(&cfg, &density)?;
            print!("{table}");
            let failed = report.entries.iter().filter(|e| !e.passed).count();
            if failed > 0 {
                return Err(CliError::GradcheckFailed { failed, total: report.entries.len() });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MICROTOPT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
