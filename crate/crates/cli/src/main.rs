mod config;
mod experiments;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::{builtin_space_time, parse_config, validate, ExperimentConfig, Kind, CATALOG};
use serde_json::json;

#[derive(Parser)]
#[command(name = "rwre-lab", version, about = "Large-deviation experiments for random walks in random environments")]
struct Cli {
    /// Worker threads for replica fan-out.
    #[arg(long, global = true, env = "RWRE_LAB_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Replace the master seed of the config.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Report directory; overrides the config's output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Print the experiment catalog.
    List,
    /// Meeting-time ledger for G_N on the built-in two-profile space-time environment.
    StGn {
        #[arg(long, value_delimiter = ',', default_value = "0")]
        theta: Vec<f64>,
        /// Largest N.
        #[arg(long, default_value_t = 14)]
        depth: usize,
        #[arg(long, default_value_t = 3)]
        dim: usize,
        /// Environment spec JSON replacing the built-in one.
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Doob-transformed kernel at the origin of a sampled space-time environment.
    StDoob {
        #[arg(long, value_delimiter = ',', default_value = "0")]
        theta: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        depth: usize,
        #[arg(long, default_value_t = 3)]
        dim: usize,
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Conditional empirical step frequency against the tilted prediction.
    StCondition {
        /// Target velocity.
        #[arg(long, value_delimiter = ',')]
        xi: Vec<f64>,
        /// Conditioning path lengths.
        #[arg(long, value_delimiter = ',', default_value = "20,40,60")]
        depth: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Harvest regeneration slabs to JSON lines, optionally evaluating the averaged LMGF.
    Slabs {
        /// Config of kind averaged-rate supplying the environment and harvest settings.
        config: PathBuf,
        /// Number of slabs to harvest.
        #[arg(long)]
        count: Option<usize>,
        /// Lookahead used to confirm a regeneration.
        #[arg(long)]
        horizon: Option<usize>,
        /// θ values along the harvest direction.
        #[arg(long, value_delimiter = ',')]
        theta_grid: Vec<f64>,
        /// Bootstrap resamples for the LMGF intervals.
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Read slabs from this file instead of harvesting.
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
}

enum Failure {
    Config(config::ConfigError),
    Other(String),
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl<E: std::fmt::Display> From<Box<E>> for Failure {
    fn from(e: Box<E>) -> Self {
        Failure::Other(e.to_string())
    }
}

fn other(e: impl std::fmt::Display) -> Failure {
    Failure::Other(e.to_string())
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| other(format!("{}: {e}", path.display())))?;
    Ok(parse_config(&text)?)
}

fn load_env(path: &Path) -> Result<rwre_core::env::EnvironmentSpec, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| other(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        Failure::Config(config::ConfigError {
            path: format!("environment.{}", e.path()),
            message: e.inner().to_string(),
            line: Some(e.inner().line()),
        })
    })
}

fn shortcut(kind: Kind, seed: u64, env: Option<&Path>, dim: usize, params: serde_json::Value) -> Result<ExperimentConfig, Failure> {
    let environment = match env {
        Some(p) => load_env(p)?,
        None => builtin_space_time(dim, seed),
    };
    Ok(ExperimentConfig { kind, seed, output: None, environment: Some(environment), chain: None, params })
}

fn execute(mut cfg: ExperimentConfig, output: &Output) -> Result<bool, Failure> {
    if let Some(s) = output.seed_override {
        cfg.seed = s;
    }
    let params = validate(&cfg)?;
    let dir = output
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("rwre-lab-{}", cfg.kind.name())));
    let start = std::time::Instant::now();
    let outcome = experiments::run(&cfg, &params).map_err(|e| other(e))?;
    let report = report::Report::new(&cfg, &params, &outcome, start.elapsed());
    report.write(&dir, outcome.table.as_ref()).map_err(other)?;
    for f in &outcome.flags {
        eprintln!("flag: {f}");
    }
    println!("{}", dir.join("report.json").display());
    Ok(outcome.flags.is_empty())
}

fn slabs_command(
    config: &Path,
    count: Option<usize>,
    horizon: Option<usize>,
    theta_grid: &[f64],
    bootstrap: Option<usize>,
    ensemble: Option<&Path>,
    output: &Output,
) -> Result<bool, Failure> {
    let mut cfg = load(config)?;
    if let Some(s) = output.seed_override {
        cfg.seed = s;
    }
    if cfg.kind != Kind::AveragedRate {
        return Err(Failure::Config(config::ConfigError {
            path: "kind".into(),
            message: "slabs needs an averaged-rate config".into(),
            line: None,
        }));
    }
    let config::Params::AveragedRate(mut p) = validate(&cfg)? else { unreachable!() };
    if let Some(c) = count {
        p.harvest.slabs = c;
    }
    if let Some(h) = horizon {
        p.harvest.horizon = h;
    }
    if let Some(b) = bootstrap {
        p.harvest.bootstrap_resamples = b;
    }
    let dir = output.out.clone().unwrap_or_else(|| PathBuf::from("rwre-lab-slabs"));
    std::fs::create_dir_all(&dir).map_err(other)?;
    let (ens, flags) = experiments::slabs(&cfg, &p.harvest, ensemble).map_err(|e| other(e))?;
    if ensemble.is_none() {
        let file = std::fs::File::create(dir.join("slabs.jsonl")).map_err(other)?;
        ens.write_jsonl(std::io::BufWriter::new(file)).map_err(other)?;
    }
    let rows = experiments::lambda_grid(&cfg, &p.harvest, &ens, theta_grid).map_err(|e| other(e))?;
    let summary = json!({ "slabs": ens.len(), "censored_fraction": ens.censored_fraction, "lambda_a": rows, "flags": flags });
    std::fs::write(dir.join("slabs.json"), serde_json::to_string_pretty(&summary).map_err(other)? + "\n").map_err(other)?;
    for f in &flags {
        eprintln!("flag: {f}");
    }
    println!("{}", dir.display());
    Ok(flags.is_empty())
}

fn dispatch(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::List => {
            for (_, name, line) in CATALOG {
                println!("{name}: {line}");
            }
            Ok(true)
        }
        Command::Run { config, output } => execute(load(&config)?, &output),
        Command::StGn { theta, depth, dim, env, seed, output } => {
            let params = json!({ "theta": theta, "n_max": depth, "k_max": depth.max(40) });
            execute(shortcut(Kind::SpacetimeGn, seed, env.as_deref(), dim, params)?, &output)
        }
        Command::StDoob { theta, depth, dim, env, seed, output } => {
            let params = json!({ "theta": theta, "depth": depth });
            execute(shortcut(Kind::SpacetimeDoob, seed, env.as_deref(), dim, params)?, &output)
        }
        Command::StCondition { xi, depth, dim, delta, env, seed, output } => {
            let mut step = vec![0i64; dim];
            step[0] = 1;
            let xi = if xi.is_empty() { vec![0.0; dim] } else { xi };
            let params = json!({ "xi": xi, "delta": delta, "n_grid": depth, "step": step });
            execute(shortcut(Kind::Conditioning, seed, env.as_deref(), dim, params)?, &output)
        }
        Command::Slabs { config, count, horizon, theta_grid, bootstrap, ensemble, output } => {
            slabs_command(&config, count, horizon, &theta_grid, bootstrap, ensemble.as_deref(), &output)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
