use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use divopt_cli::config::{Mode, RunConfig};
use divopt_cli::{run, CliError, Status};

/// Optimal dividend policies under stochastic profitability.
#[derive(Parser)]
#[command(name = "divopt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the solver and the simulation.
    #[arg(long)]
    threads: Option<usize>,
    /// Seed for the Monte Carlo paths; overrides `mc.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the mode named in the config.
    Solve(Common),
    /// Repeat the grid solve over values of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of k, mu_bar, sigma_tilde, sigma, rho; overrides `sweep.parameter`.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values; overrides `sweep.values`.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Option<Vec<f64>>,
    },
    /// Tabulate the deterministic closed form.
    Deterministic(Common),
    /// Solve the real-option stopping problem.
    Auxiliary(Common),
    /// Solve, then price the extracted policy by simulation.
    Mc(Common),
    /// Check model assumptions and the grid without solving.
    Validate(Common),
}

fn load(common: &Common, mode: Option<Mode>) -> Result<(RunConfig, PathBuf), CliError> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::config("--threads", "must be >= 1"));
        }
        divopt::configure_threads(n).map_err(|e| CliError::config("--threads", e.to_string()))?;
    }
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    if let Some(seed) = common.seed {
        cfg.mc.get_or_insert_with(Default::default).seed = seed;
    }
    let out = common.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn single(common: &Common, mode: Option<Mode>) -> Result<Status, CliError> {
    let (cfg, out) = load(common, mode)?;
    let result = run::run(&cfg, &out)?;
    if let Some(s) = &result.solved {
        log::info!("{} iterations, halt {:?}", s.report.iterations, s.report.halt_reason);
        for c in s.invariants.iter().filter(|c| !c.passed) {
            log::warn!("invariant {} violated by {:e} at node {:?}", c.name, c.worst, c.node);
        }
    }
    if result.status == Status::MaxIter {
        eprintln!("solver stopped at solver.max_iter = {} before converging", cfg.solver.max_iter);
    }
    Ok(result.status)
}

fn dispatch(cli: Cli) -> Result<Status, CliError> {
    match cli.command {
        Command::Solve(c) => single(&c, None),
        Command::Deterministic(c) => single(&c, Some(Mode::Deterministic)),
        Command::Auxiliary(c) => single(&c, Some(Mode::Auxiliary)),
        Command::Mc(c) => single(&c, Some(Mode::Mc)),
        Command::Sweep { common, param, values } => {
            let (cfg, out) = load(&common, None)?;
            let section = cfg.sweep.clone();
            let param = param
                .or_else(|| section.as_ref().map(|s| s.parameter.clone()))
                .ok_or_else(|| CliError::config("sweep.parameter", "missing; pass --param or set it in the config"))?;
            let values = values.or_else(|| section.map(|s| s.values)).unwrap_or_default();
            run::sweep(&cfg, &param, &values, &out)
        }
        Command::Validate(c) => {
            let (cfg, _) = load(&c, None)?;
            let (status, report) = run::validate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(status)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let status = dispatch(cli).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        Status::Failed
    });
    ExitCode::from(status.code() as u8)
}
