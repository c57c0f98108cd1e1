//! `hedgegame`: super-hedging prices, certified supersolutions, hedge
//! simulations and dual Monte Carlo estimates from one JSON config.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Certification(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Certification(_) => 4,
            CliError::Io(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Numerical(_) => "numerical",
            CliError::Certification(_) => "certification",
            CliError::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "hedgegame", version, about = "Super-hedging under model uncertainty")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set sim.paths=100000`; repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory; overrides `output.directory`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve and print v(t0, x0).
    Price(PointArgs),
    /// Solve and write the surface, its summary and plot data.
    Solve(PointArgs),
    /// Build and certify a smooth supersolution.
    Regularize(RegularizeArgs),
    /// Hedge from a surface against adverse controls.
    Simulate(SimulateArgs),
    /// Regression Monte Carlo estimate of the dual value.
    Dual(DualArgs),
}

#[derive(Args, Debug)]
struct PointArgs {
    #[arg(long)]
    t0: Option<f64>,
    /// Comma-separated coordinates.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct RegularizeArgs {
    /// Decreasing comma-separated ladder.
    #[arg(long, value_delimiter = ',')]
    eps_ladder: Option<Vec<f64>>,
    /// Required margin `phi >= v + eta` on B.
    #[arg(long)]
    eta: Option<f64>,
    /// Allowed negative PDE residual.
    #[arg(long)]
    tol: Option<f64>,
    /// Box `t_lo,t_hi,lo_1..lo_d,hi_1..hi_d`.
    #[arg(long = "B", value_delimiter = ',', allow_hyphen_values = true)]
    b_box: Option<Vec<f64>>,
    /// `v-plus-margin:<m>`, or a surface written by `solve` (.csv or .bin).
    #[arg(long)]
    phi: Option<String>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Surface cache (`surface.bin` or `smooth.bin`); relative to the output directory.
    #[arg(long)]
    surface: Option<String>,
    /// `all`, `constant:<i>`, `random:<rate>` or `worst`.
    #[arg(long)]
    adversary: Option<String>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `auto` (the surface value at the start) or a number.
    #[arg(long, allow_hyphen_values = true)]
    y0: Option<String>,
    /// Added to `y0 = auto`.
    #[arg(long)]
    margin: Option<f64>,
}

#[derive(Args, Debug)]
struct DualArgs {
    /// Radius of the shaken control set.
    #[arg(long)]
    eps: Option<f64>,
    /// Number of control switching times.
    #[arg(long)]
    knots: Option<usize>,
    /// Levels per coordinate of the shaking lattice.
    #[arg(long)]
    gamma_grid: Option<usize>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also run the dynamic-programming check at this time.
    #[arg(long)]
    mid: Option<f64>,
}

/// Typed flag values as config overrides.
fn flag_overrides(cli: &Cli) -> Vec<(String, Value)> {
    let mut v: Vec<(String, Value)> = Vec::new();
    let mut put = |path: &str, val: Option<Value>| {
        if let Some(val) = val {
            v.push((path.to_string(), val));
        }
    };
    if let Some(out) = &cli.out {
        put("output.directory", Some(json!(out.to_string_lossy())));
    }
    match &cli.command {
        Command::Price(a) | Command::Solve(a) => {
            put("point.t0", a.t0.map(|x| json!(x)));
            put("point.x0", a.x0.as_ref().map(|x| json!(x)));
        }
        Command::Regularize(a) => {
            put("regularize.eps_ladder", a.eps_ladder.as_ref().map(|x| json!(x)));
            put("regularize.eta", a.eta.map(|x| json!(x)));
            put("regularize.tol", a.tol.map(|x| json!(x)));
            put("regularize.phi", a.phi.as_ref().map(|x| json!(x)));
            if let Some(b) = &a.b_box {
                // the dimension is checked once the config is parsed
                let d = b.len().saturating_sub(2) / 2;
                let bx = if b.len() >= 2 {
                    json!({"t_lo": b[0], "t_hi": b[1], "lo": &b[2..2 + d], "hi": &b[2 + d..]})
                } else {
                    json!({"t_lo": null})
                };
                put("regularize.b_box", Some(bx));
            }
        }
        Command::Simulate(a) => {
            put("sim.surface", a.surface.as_ref().map(|x| json!(x)));
            put("sim.adversary", a.adversary.as_ref().map(|x| json!(x)));
            put("sim.paths", a.paths.map(|x| json!(x)));
            put("sim.steps", a.steps.map(|x| json!(x)));
            put("sim.seed", a.seed.map(|x| json!(x)));
            put("sim.y0", a.y0.as_ref().map(|x| json!(x)));
            put("sim.margin", a.margin.map(|x| json!(x)));
        }
        Command::Dual(a) => {
            put("dual.eps", a.eps.map(|x| json!(x)));
            put("dual.knots", a.knots.map(|x| json!(x)));
            put("dual.gamma_grid", a.gamma_grid.map(|x| json!(x)));
            put("dual.degree", a.degree.map(|x| json!(x)));
            put("dual.paths", a.paths.map(|x| json!(x)));
            put("dual.seed", a.seed.map(|x| json!(x)));
            put("dual.mid", a.mid.map(|x| json!(x)));
        }
    }
    v
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("HEDGEGAME_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("HEDGEGAME_THREADS must be a nonnegative integer, got `{raw}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    init_threads()?;
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let cfg = config::RunConfig::load(path, &cli.set, &flag_overrides(cli))?;
    let name = match &cli.command {
        Command::Price(_) => "price",
        Command::Solve(_) => "solve",
        Command::Regularize(_) => "regularize",
        Command::Simulate(_) => "simulate",
        Command::Dual(_) => "dual",
    };
    commands::run(name, cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string(), "exit_code": code}));
            ExitCode::from(code)
        }
    }
}
