//! Report files: report.json with the resolved config echoed, and curves.csv.

use std::path::Path;
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use crate::config::{ExperimentConfig, Params};
use crate::experiments::{Outcome, Table};

#[derive(Serialize)]
struct Build {
    version: &'static str,
    git: &'static str,
}

#[derive(Serialize)]
struct Timing {
    wall_seconds: f64,
    threads: usize,
}

#[derive(Serialize)]
pub struct Report<'a> {
    kind: &'static str,
    /// Config with every default filled in; feeding it back to `run` reproduces the results.
    config: Value,
    results: &'a Value,
    flags: &'a [String],
    build: Build,
    timing: Timing,
}

fn resolved(cfg: &ExperimentConfig, params: &Params) -> Value {
    let p = match params {
        Params::QuenchedRate1d(p) => serde_json::to_value(p),
        Params::FiniteOracle(p) => serde_json::to_value(p),
        Params::AveragedRate(p) => serde_json::to_value(p),
        Params::SpacetimeGn(p) => serde_json::to_value(p),
        Params::SpacetimeDoob(p) => serde_json::to_value(p),
        Params::Conditioning(p) => serde_json::to_value(p),
        Params::CrossCheck(p) => serde_json::to_value(p),
    }
    .expect("params serialize");
    let mut c = cfg.clone();
    c.params = p;
    c.output = None;
    serde_json::to_value(c).expect("config serializes")
}

impl<'a> Report<'a> {
    pub fn new(cfg: &ExperimentConfig, params: &Params, outcome: &'a Outcome, elapsed: Duration) -> Self {
        Report {
            kind: cfg.kind.name(),
            config: resolved(cfg, params),
            results: &outcome.results,
            flags: &outcome.flags,
            build: Build { version: env!("CARGO_PKG_VERSION"), git: env!("RWRE_GIT_DESCRIBE") },
            timing: Timing { wall_seconds: elapsed.as_secs_f64(), threads: rayon::current_num_threads() },
        }
    }

    pub fn write(&self, dir: &Path, table: Option<&Table>) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("report.json"), text + "\n")?;
        if let Some(t) = table {
            let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
            w.write_record(&t.header)?;
            for r in &t.rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}
