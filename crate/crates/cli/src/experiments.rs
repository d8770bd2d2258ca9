//! One runner per experiment kind. Each returns JSON results, an optional
//! CSV table and the reliability flags raised along the way.

use rwre_core::env::{sample_environment, Environment, EnvironmentSpec};
use rwre_core::finitechain::{
    brute_force_lmgf, doob_minimizer, grid_min_pair_entropy, pair_entropy, perron_lambda, rate_from_dual,
    FiniteEnvChain,
};
use rwre_core::quenched1d::{critical_r, quenched_rate, quenched_rate_curve, Direction, RateOptions};
use rwre_core::regen::{
    averaged_rate, collect_slabs, conditioned_vs_tilted, lambda_a, lln_velocity, psi, slab_diagnostics,
    BootstrapOptions, ConditioningOptions, HarvestOptions, SlabEnsemble,
};
use rwre_core::rng::child_seed;
use rwre_core::spacetime::{
    conditioned_empirical_st, doob_kernel, cone_u, g_exact_sequence, g_norm, meeting_kernel, stationarity_check,
    sup_g_bound, ConditioningMode, GBound, GMethod, McOptions, RejectionOptions, TiltOptions,
};
use serde_json::{json, Value};

use crate::config::*;

/// Stream tags mixed into the master seed.
const ENV_STREAM: u64 = 0;
const HARVEST_STREAM: u64 = 1;
const BOOTSTRAP_STREAM: u64 = 2;
const REJECTION_STREAM: u64 = 3;
const TILT_STREAM: u64 = 4;
const MC_STREAM: u64 = 5;
const STATIONARY_STREAM: u64 = 6;

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }
    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

fn num(v: f64) -> String {
    format!("{v:.12e}")
}

pub struct Outcome {
    pub results: Value,
    pub table: Option<Table>,
    pub flags: Vec<String>,
}

type RunResult = Result<Outcome, Box<dyn std::error::Error + Send + Sync>>;

pub fn run(cfg: &ExperimentConfig, params: &Params) -> RunResult {
    match params {
        Params::QuenchedRate1d(p) => quenched(cfg, p),
        Params::CrossCheck(p) => cross_check(cfg, p),
        Params::FiniteOracle(p) => finite_oracle(cfg, p),
        Params::AveragedRate(p) => averaged(cfg, p),
        Params::SpacetimeGn(p) => spacetime_gn(cfg, p),
        Params::SpacetimeDoob(p) => spacetime_doob(cfg, p),
        Params::Conditioning(p) => conditioning(cfg, p),
    }
}

fn env_spec(cfg: &ExperimentConfig) -> &EnvironmentSpec {
    cfg.environment.as_ref().expect("validated")
}

fn realize(cfg: &ExperimentConfig, env_seed: Option<u64>) -> Result<(Environment, u64), rwre_core::Error> {
    let seed = env_seed.unwrap_or_else(|| child_seed(cfg.seed, ENV_STREAM));
    Ok((sample_environment(env_spec(cfg), seed)?, seed))
}

fn quenched(cfg: &ExperimentConfig, p: &QuenchedRateParams) -> RunResult {
    let (env, seed) = realize(cfg, p.env_seed)?;
    let opts = RateOptions { window: p.window, tol: p.tol };
    let curve = quenched_rate_curve(&env, &p.xi_grid, &opts)?;
    let check = curve.check();
    let crit = critical_r(&env, p.tol)?;
    let mut flags = Vec::new();
    if !check.all() {
        flags.push(format!("rate curve check failed: {check:?}"));
    }
    let mut table = Table::new(&["xi", "I", "r", "stderr"]);
    for pt in &curve.points {
        table.push(vec![num(pt.xi), num(pt.rate), num(pt.dual), num(pt.stderr)]);
    }
    Ok(Outcome {
        results: json!({ "env_seed": seed, "critical_r": crit, "curve": curve, "check": check }),
        table: Some(table),
        flags,
    })
}

fn cross_check(cfg: &ExperimentConfig, p: &CrossCheckParams) -> RunResult {
    let (env, seed) = realize(cfg, p.env_seed)?;
    let chain = FiniteEnvChain::from_env(&env)?;
    let opts = RateOptions { window: p.window, tol: p.tol };
    let mut table = Table::new(&["xi", "I_zeta", "I_perron", "abs_diff"]);
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for &xi in &p.xi_grid {
        let dir = if xi < 0.0 { Direction::Left } else { Direction::Right };
        let a = quenched_rate(&env, xi.abs(), dir, &opts)?;
        let b = rate_from_dual(&chain, xi)?;
        let diff = (a.rate - b.rate).abs();
        if diff > p.agreement_tol {
            flags.push(format!("routes disagree at xi = {xi}: {diff:e}"));
        }
        table.push(vec![num(xi), num(a.rate), num(b.rate), num(diff)]);
        rows.push(json!({ "xi": xi, "zeta_route": a, "perron_route": b, "abs_diff": diff }));
    }
    Ok(Outcome { results: json!({ "env_seed": seed, "points": rows }), table: Some(table), flags })
}

fn finite_oracle(cfg: &ExperimentConfig, p: &FiniteOracleParams) -> RunResult {
    let chain = match (&cfg.chain, &cfg.environment) {
        (Some(c), _) => FiniteEnvChain::new(c.steps.clone(), c.rows.clone())?,
        (None, Some(_)) => FiniteEnvChain::from_env(&realize(cfg, None)?.0)?,
        (None, None) => unreachable!("validated"),
    };
    let mut table = Table::new(&["xi", "I", "theta", "lambda", "pair_entropy", "ansatz_residual"]);
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for &xi in &p.xi_grid {
        let m = doob_minimizer(&chain, xi)?;
        let rate = rate_from_dual(&chain, xi)?;
        let h = pair_entropy(&chain, &m.mu);
        let mut row = json!({ "xi": xi, "rate": rate, "pair_entropy": h, "ansatz_residual": m.ansatz_residual,
                              "loop_residual": m.loop_residual, "unique_stationary": m.unique_stationary,
                              "kernel": m.kernel, "phi": m.phi });
        if let Some(res) = p.grid_resolution {
            let g = grid_min_pair_entropy(&chain, xi, res, &m.mu)?;
            if g.min < h - 5e-3 {
                flags.push(format!("grid search found a lower pair entropy at xi = {xi}"));
            }
            row["grid_search"] = json!({ "min": g.min, "feasible_points": g.feasible_points,
                                         "slice_dimension": g.slice_dimension });
        }
        table.push(vec![num(xi), num(rate.rate), num(rate.theta), num(rate.lambda), num(h), num(m.ansatz_residual)]);
        rows.push(row);
    }
    let mut results = json!({ "states": chain.states(), "points": rows });
    if let Some(n) = p.brute_force_n {
        let perron = perron_lambda(&chain, 0.5)?;
        let brute = brute_force_lmgf(&chain, 0.5, n)?;
        results["brute_force"] = json!({ "theta": 0.5, "n": n, "perron": perron.lambda, "finite_n": brute });
    }
    Ok(Outcome { results, table: Some(table), flags })
}

fn harvest(cfg: &ExperimentConfig, s: &SlabParams, keep_steps: bool) -> Result<SlabEnsemble, rwre_core::Error> {
    let opts = HarvestOptions { path_len: s.path_len, max_total_steps: s.max_total_steps, keep_steps };
    collect_slabs(env_spec(cfg), &s.direction, s.slabs, s.horizon, child_seed(cfg.seed, HARVEST_STREAM), &opts)
}

fn boot(cfg: &ExperimentConfig, s: &SlabParams) -> BootstrapOptions {
    BootstrapOptions { resamples: s.bootstrap_resamples, seed: child_seed(cfg.seed, BOOTSTRAP_STREAM), level: s.level }
}

fn slab_flags(ens: &SlabEnsemble, s: &SlabParams, flags: &mut Vec<String>) {
    if ens.censored_fraction > s.censoring_threshold {
        flags.push(format!("censoring: {:.4} of certified regenerations were contradicted later", ens.censored_fraction));
    }
}

fn averaged(cfg: &ExperimentConfig, p: &AveragedRateParams) -> RunResult {
    let s = &p.harvest;
    let ens = harvest(cfg, s, false)?;
    let bo = boot(cfg, s);
    let mut flags = Vec::new();
    slab_flags(&ens, s, &mut flags);
    let velocity = lln_velocity(&ens);
    let d = ens.dimension();
    let psi0 = psi(&ens, &vec![0.0; d], 0.0);
    let quenched_env = if p.compare_quenched { Some(realize(cfg, None)?.0) } else { None };
    let mut header = vec!["xi", "I_a", "ci_lo", "ci_hi", "theta1"];
    if p.compare_quenched {
        header.extend(["I_q", "I_q_stderr"]);
    }
    let mut table = Table::new(&header);
    let mut rows = Vec::new();
    for &x in &p.xi_grid {
        let mut xi = s.direction.iter().map(|u| u * x).collect::<Vec<_>>();
        if d == 1 {
            xi = vec![x];
        }
        match averaged_rate(&ens, &xi, &bo) {
            Ok(r) => {
                if r.heavy_tail {
                    flags.push(format!("heavy-tail: slab weights at xi = {x} are dominated by a few slabs"));
                }
                let lam = lambda_a(&ens, &r.theta, &bo)?;
                let mut row = vec![num(x), num(r.rate.value), num(r.rate.ci_lo), num(r.rate.ci_hi), num(r.theta[0])];
                let mut q = Value::Null;
                if let Some(env) = &quenched_env {
                    let dir = if x < 0.0 { Direction::Left } else { Direction::Right };
                    let qr = quenched_rate(env, x.abs(), dir, &RateOptions { window: p.window, tol: 1e-13 })?;
                    row.extend([num(qr.rate), num(qr.stderr)]);
                    q = json!(qr);
                }
                table.push(row);
                rows.push(json!({ "xi": xi, "averaged": r, "lambda_a": lam, "quenched": q }));
            }
            Err(e) => {
                flags.push(format!("xi = {x}: {e}"));
                rows.push(json!({ "xi": xi, "error": e.to_string() }));
            }
        }
    }
    Ok(Outcome {
        results: json!({
            "slabs": ens.len(), "paths_used": ens.paths_used, "discarded": ens.discarded,
            "censored_fraction": ens.censored_fraction, "nestling": ens.nestling,
            "diagnostics": slab_diagnostics(&ens), "velocity": velocity, "psi_at_origin": psi0, "points": rows,
        }),
        table: Some(table),
        flags,
    })
}

fn spacetime_gn(cfg: &ExperimentConfig, p: &SpacetimeGnParams) -> RunResult {
    let spec = env_spec(cfg);
    let g = g_exact_sequence(spec, &p.theta, p.n_max)?;
    let mk = meeting_kernel(spec, &p.theta, p.k_max, p.n_max)?;
    let residuals = mk.recursion_residuals(&g);
    let bound = sup_g_bound(&mk);
    let mut flags = Vec::new();
    if let GBound::Bounded { value } = bound {
        if g.iter().any(|v| *v > value) {
            flags.push("a computed G_N exceeds the sup bound".into());
        }
    }
    let mut table = Table::new(&["N", "G_N", "B_N", "C_N", "recursion_residual"]);
    for n in 1..=p.n_max {
        table.push(vec![n.to_string(), num(g[n]), num(mk.b[n]), num(mk.c[n - 1]), num(residuals[n - 1])]);
    }
    let mut results = json!({ "g": g, "meeting_kernel": mk, "residuals": residuals, "sup_bound": bound });
    if let Some(mc) = &p.monte_carlo {
        let est = g_norm(
            spec,
            &p.theta,
            mc.depth,
            GMethod::MonteCarlo { replicates: mc.replicates, seed: child_seed(cfg.seed, MC_STREAM) },
        )?;
        results["monte_carlo"] = json!({ "depth": mc.depth, "estimate": est });
    }
    Ok(Outcome { results, table: Some(table), flags })
}

fn spacetime_doob(cfg: &ExperimentConfig, p: &SpacetimeDoobParams) -> RunResult {
    let (env, seed) = realize(cfg, p.env_seed)?;
    let x = p.x.clone().unwrap_or_else(|| vec![0; env.dimension()]);
    let k = doob_kernel(&env, &p.theta, p.depth, p.time, &x)?;
    let cone = cone_u(&env, &p.theta, p.depth, p.time, &x)?;
    let fixed_point = cone.recursion_residual(&env);
    let mut flags = Vec::new();
    if k.row_sum_error > 1e-14 || fixed_point > 1e-12 {
        flags.push(format!("kernel normalization {:e}, fixed-point residual {fixed_point:e}", k.row_sum_error));
    }
    let mut table = Table::new(&["step", "probability"]);
    for (z, pr) in env.steps().steps().iter().zip(&k.probs) {
        let label: Vec<String> = z.iter().map(|c| c.to_string()).collect();
        table.push(vec![label.join(" "), num(*pr)]);
    }
    let mut results = json!({ "env_seed": seed, "kernel": k, "fixed_point_residual": fixed_point,
                              "cone_min": cone.min_value(), "cone_nodes": cone.nodes() });
    if let Some(s) = &p.stationarity {
        let target = s.profile;
        let report = stationarity_check(
            env_spec(cfg),
            &p.theta,
            s.depth,
            s.u_depth,
            |e| f64::from(u8::from(e.profile_index(&vec![0; e.address_len()]) == Some(target))),
            &McOptions { replicates: s.replicates, seed: child_seed(cfg.seed, STATIONARY_STREAM) },
        )?;
        if !report.residual.contains(0.0) {
            flags.push("stationarity residual interval excludes 0".into());
        }
        results["stationarity"] = json!(report);
    }
    Ok(Outcome { results, table: Some(table), flags })
}

fn conditioning(cfg: &ExperimentConfig, p: &ConditioningParams) -> RunResult {
    let spec = env_spec(cfg);
    let steps = spec.step_set()?;
    let target = steps
        .index_of(&p.step)
        .ok_or_else(|| format!("params.step: {:?} is not an allowed step", p.step))? as u16;
    let mut table = Table::new(&["n", "environment", "conditional", "cond_ci_lo", "cond_ci_hi", "tilted", "gap", "acceptance"]);
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    if spec.is_space_time() {
        let mode = match p.mode {
            ModeName::Averaged => ConditioningMode::Averaged,
            ModeName::Quenched => ConditioningMode::Quenched { environments: p.environments },
        };
        let rej = RejectionOptions {
            target_accepted: p.accepted,
            max_proposals: p.max_proposals,
            seed: child_seed(cfg.seed, REJECTION_STREAM),
        };
        let tilt = TiltOptions {
            n_before: p.n_before,
            m_after: p.m_after,
            mc: McOptions { replicates: p.tilt_replicates, seed: child_seed(cfg.seed, TILT_STREAM) },
        };
        let f = |_: &Environment, z: &[u16]| f64::from(u8::from(z[0] == target));
        for &n in &p.n_grid {
            let r = conditioned_empirical_st(spec, &p.xi, p.delta, n, f, 1, mode, &rej, &tilt)?;
            for row in &r.rows {
                let c = &row.conditional.estimate;
                table.push(vec![
                    n.to_string(),
                    row.environment.map_or("averaged".into(), |e| e.to_string()),
                    num(c.value),
                    num(c.ci_lo),
                    num(c.ci_hi),
                    num(r.tilted.value),
                    num(row.gap),
                    num(row.conditional.acceptance),
                ]);
            }
            rows.push(json!(r));
        }
    } else {
        let s = p.slabs.as_ref().expect("validated");
        let ens = harvest(cfg, s, true)?;
        slab_flags(&ens, s, &mut flags);
        let opts = ConditioningOptions {
            target_accepted: p.accepted,
            max_proposals: p.max_proposals,
            seed: child_seed(cfg.seed, REJECTION_STREAM),
        };
        let f = |z: &[u16]| f64::from(u8::from(z[0] == target));
        for &n in &p.n_grid {
            let r = conditioned_vs_tilted(spec, &ens, &p.xi, p.delta, n, f, 1, &opts, &boot(cfg, s))?;
            table.push(vec![
                n.to_string(),
                "averaged".into(),
                num(r.conditional.value),
                num(r.conditional.ci_lo),
                num(r.conditional.ci_hi),
                num(r.tilted.value),
                num(r.gap),
                num(r.acceptance),
            ]);
            rows.push(json!(r));
        }
    }
    Ok(Outcome { results: json!({ "runs": rows }), table: Some(table), flags })
}

/// Slab ensemble for the `slabs` command: harvested, or read back from JSON lines.
pub fn slabs(
    cfg: &ExperimentConfig,
    s: &SlabParams,
    from: Option<&std::path::Path>,
) -> Result<(SlabEnsemble, Vec<String>), Box<dyn std::error::Error + Send + Sync>> {
    let mut flags = Vec::new();
    let ens = match from {
        None => {
            let ens = harvest(cfg, s, true)?;
            slab_flags(&ens, s, &mut flags);
            ens
        }
        Some(path) => {
            // metadata (step set, direction, horizon) comes from a one-slab harvest
            let opts = HarvestOptions { path_len: s.path_len, max_total_steps: s.max_total_steps, keep_steps: true };
            let template = collect_slabs(env_spec(cfg), &s.direction, 1, s.horizon, cfg.seed, &opts)?;
            let file = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
            SlabEnsemble::read_jsonl(std::io::BufReader::new(file), &template)?
        }
    };
    Ok((ens, flags))
}

/// Lambda_a along the harvest direction at each grid value.
pub fn lambda_grid(
    cfg: &ExperimentConfig,
    s: &SlabParams,
    ens: &SlabEnsemble,
    grid: &[f64],
) -> Result<Vec<Value>, Box<dyn std::error::Error + Send + Sync>> {
    let bo = boot(cfg, s);
    let mut out = Vec::new();
    for &t in grid {
        let theta: Vec<f64> = s.direction.iter().map(|u| u * t).collect();
        out.push(match lambda_a(ens, &theta, &bo) {
            Ok(l) => json!(l),
            Err(e) => json!({ "theta": theta, "error": e.to_string() }),
        });
    }
    Ok(out)
}
