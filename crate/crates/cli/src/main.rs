use clap::{Args, Parser, Subcommand};
use mlpmcmc_cli::config::{parse_config, RunConfig};
use mlpmcmc_cli::runner::{oracle_report, run, RunOutcome};
use mlpmcmc_cli::trace::{export_trace, from_csv, TraceFormat};
use mlpmcmc_cli::{diag, CliError};
use std::path::PathBuf;
use std::process::ExitCode;

/// Multi-level particle MCMC for partially observed stopped processes.
#[derive(Parser)]
#[command(name = "mlpmcmc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one multi-level SMC pass and print the log normalizing-constant
    /// estimate.
    Smc(RunArgs),
    /// Run a particle independent Metropolis-Hastings chain at the
    /// configured parameters.
    Pimh(RunArgs),
    /// Run particle marginal Metropolis-Hastings over the parameters.
    Pmmh(PmmhArgs),
    /// Print exact oracle values for the configured (small) model.
    Oracle(ConfigOnlyArgs),
    /// Summarize an exported trace.
    Diag(DiagArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the particle count.
    #[arg(long)]
    particles: Option<usize>,
    /// Override the iteration count.
    #[arg(long)]
    iters: Option<usize>,
    /// Directory for trace output (trace.csv and trace.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PmmhArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Re-draw the level schedule for every parameter proposal.
    #[arg(long)]
    adapt_levels: bool,
}

#[derive(Args)]
struct ConfigOnlyArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct DiagArgs {
    /// Path to a CSV trace.
    #[arg(long)]
    trace: PathBuf,
    /// Largest autocorrelation lag to report.
    #[arg(long, default_value_t = 20)]
    max_lag: usize,
}

fn main() -> ExitCode {
    match run_cli() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run_cli() -> Result<(), CliError> {
    configure_threads()?;
    let cli = Cli::try_parse().map_err(|e| {
        // Argument problems are validation failures; --help and --version
        // are handled by printing and succeeding.
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            let _ = e.print();
            std::process::exit(0);
        }
        CliError::Validation(e.to_string())
    })?;
    match cli.command {
        Command::Smc(args) => {
            let mut cfg = load_config(&args)?;
            cfg.algorithm = mlpmcmc_cli::config::Algorithm::Smc;
            match run(&cfg)? {
                RunOutcome::Smc { log_zhat, success } => {
                    println!("log_zhat = {log_zhat}");
                    println!("success = {success}");
                    Ok(())
                }
                RunOutcome::Chain(_) => unreachable!("smc produces an estimate"),
            }
        }
        Command::Pimh(args) => {
            let mut cfg = load_config(&args)?;
            cfg.algorithm = mlpmcmc_cli::config::Algorithm::Pimh;
            run_chain_command(&cfg, args.out.as_deref())
        }
        Command::Pmmh(args) => {
            let mut cfg = load_config(&args.run)?;
            cfg.algorithm = if args.adapt_levels {
                mlpmcmc_cli::config::Algorithm::AdaptivePmmh
            } else {
                mlpmcmc_cli::config::Algorithm::Pmmh
            };
            run_chain_command(&cfg, args.run.out.as_deref())
        }
        Command::Oracle(args) => {
            let text = read_file(&args.config)?;
            let cfg = parse_config(&text)?;
            for (name, value) in oracle_report(&cfg)? {
                println!("{name} = {value}");
            }
            Ok(())
        }
        Command::Diag(args) => {
            let text = read_file(&args.trace)?;
            let rows = from_csv(&text)?;
            let summary = diag::summarize(&rows, args.max_lag)?;
            let rendered = serde_json::to_string_pretty(&summary)
                .map_err(|e| CliError::Runtime(format!("summary serialization: {e}")))?;
            println!("{rendered}");
            Ok(())
        }
    }
}

fn read_file(path: &PathBuf) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("reading {}: {e}", path.display())))
}

fn load_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let text = read_file(&args.config)?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.particles {
        cfg.particles = n;
    }
    if let Some(k) = args.iters {
        cfg.iterations = k;
    }
    if args.out.is_some() {
        cfg.output_dir = args.out.clone();
    }
    Ok(cfg)
}

fn run_chain_command(cfg: &RunConfig, out: Option<&std::path::Path>) -> Result<(), CliError> {
    let record = match run(cfg)? {
        RunOutcome::Chain(record) => record,
        RunOutcome::Smc { .. } => unreachable!("chain algorithms produce records"),
    };
    let rows = mlpmcmc_cli::trace::rows_from_record(&record);
    let rate = diag::acceptance_rate(&rows)?;
    println!("iterations = {}", record.iterations());
    println!("acceptance_rate = {rate}");
    let out_dir = out.or(cfg.output_dir.as_deref());
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
        export_trace(&record, cfg, &dir.join("trace.csv"), TraceFormat::Csv)?;
        export_trace(&record, cfg, &dir.join("trace.json"), TraceFormat::Json)?;
        println!("trace = {}", dir.join("trace.csv").display());
    }
    Ok(())
}

/// Cap the rayon worker pool from MLPMCMC_THREADS (0 or unset means auto).
fn configure_threads() -> Result<(), CliError> {
    match std::env::var("MLPMCMC_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => {
            let n: usize = raw.parse().map_err(|_| {
                CliError::Validation(format!(
                    "MLPMCMC_THREADS must be a non-negative integer, got {raw:?}"
                ))
            })?;
            if n == 0 {
                return Ok(());
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
        }
    }
}
