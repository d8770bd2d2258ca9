//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//! Runs without the libtest harness so the lines always reach the output.

use std::time::{Duration, Instant};

use rwre_core::env::{sample_environment, EnvironmentSpec, ProfileLaw};
use rwre_core::finitechain::{doob_minimizer, grid_min_pair_entropy, pair_entropy, rate_from_dual, FiniteEnvChain};
use rwre_core::quenched1d::{invariant_density, quenched_rate, tilted_kernel, Direction, RateOptions};
use rwre_core::regen::{collect_slabs, averaged_rate, lambda_a, lln_velocity, psi, BootstrapOptions, HarvestOptions};
use rwre_core::spacetime::{
    cone_u, conditioned_empirical_st, doob_kernel, g_exact_sequence, lambda_c, meeting_kernel, quenched_lmgf_st,
    stationarity_check, ConditioningMode, McOptions, RejectionOptions, TiltOptions,
};
use statrs::distribution::{Binomial, Discrete};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn period_two() -> rwre_core::env::Environment {
    sample_environment(&EnvironmentSpec::periodic_1d(vec![[0.9, 0.1], [0.2, 0.8]], 0), 0).unwrap()
}

fn space_time_two_profile(d: usize) -> EnvironmentSpec {
    let (a, b) = if d == 1 {
        (vec![0.8, 0.2], vec![0.4, 0.6])
    } else {
        let rest = 0.6 / (2 * d - 2) as f64;
        let mut a = vec![rest; 2 * d];
        let mut b = vec![rest; 2 * d];
        (a[0], a[1], b[0], b[1]) = (0.3, 0.1, 0.1, 0.3);
        (a, b)
    };
    EnvironmentSpec::space_time(d, ProfileLaw::Finite { profiles: vec![a, b], weights: vec![0.5, 0.5] }, 11)
}

/// Classical walk: rate of the binomial step law, written out directly.
fn cramer(p: f64, xi: f64) -> f64 {
    let (a, b) = ((1.0 + xi) / 2.0, (1.0 - xi) / 2.0);
    a * (a / p).ln() + b * (b / (1.0 - p)).ln()
}

fn c1_dual_routes() -> Outcome {
    let start = Instant::now();
    let env = period_two();
    let chain = FiniteEnvChain::from_env(&env).unwrap();
    let mut worst = 0.0f64;
    for xi in [0.75, 0.8, 0.85, 0.9] {
        let a = quenched_rate(&env, xi, Direction::Right, &RateOptions::default()).map_err(|e| e.to_string())?;
        let b = rate_from_dual(&chain, xi).map_err(|e| e.to_string())?;
        worst = worst.max((a.rate - b.rate).abs());
    }
    let t = start.elapsed();
    check(worst <= 1e-5 && t < Duration::from_secs(30), format!("max |I_zeta - I_perron| = {worst:.2e}, {t:.2?}"))
}

fn c2_classical_collapse() -> Outcome {
    let p = 0.75;
    let env = sample_environment(&EnvironmentSpec::deterministic_1d(p, 0), 0).unwrap();
    let chain = FiniteEnvChain::from_env(&env).unwrap();
    let mut worst = 0.0f64;
    for xi in [0.6, 0.7, 0.8, 0.9] {
        let q = quenched_rate(&env, xi, Direction::Right, &RateOptions::default()).map_err(|e| e.to_string())?.rate;
        let f = rate_from_dual(&chain, xi).map_err(|e| e.to_string())?.rate;
        let c = cramer(p, xi);
        worst = worst.max((q - c).abs()).max((f - c).abs()).max((q - f).abs());
    }
    let q0 = quenched_rate(&env, 0.5, Direction::Right, &RateOptions::default()).map_err(|e| e.to_string())?.rate;
    let f0 = rate_from_dual(&chain, 0.5).map_err(|e| e.to_string())?.rate;
    let zero = q0.abs().max(f0.abs()).max(cramer(p, 0.5).abs());
    check(worst <= 1e-6 && zero <= 1e-8, format!("max pairwise gap {worst:.2e}, |I(0.5)| = {zero:.2e}"))
}

fn c3_boundary_law() -> Outcome {
    let env = period_two();
    let q = quenched_rate(&env, 0.999, Direction::Right, &RateOptions::default()).map_err(|e| e.to_string())?.rate;
    let boundary = -0.5 * (0.9f64.ln() + 0.2f64.ln());
    check((q - boundary).abs() <= 1e-2, format!("I(0.999) = {q:.5}, window mean of -log pi(0,1) = {boundary:.5}"))
}

fn c4_minimizer() -> Outcome {
    let start = Instant::now();
    let chain = FiniteEnvChain::from_env(&period_two()).unwrap();
    let mut ansatz = 0.0f64;
    let mut margin = f64::INFINITY;
    for xi in [0.75, 0.8, 0.85, 0.9] {
        let m = doob_minimizer(&chain, xi).map_err(|e| e.to_string())?;
        ansatz = ansatz.max(m.ansatz_residual);
        let h = pair_entropy(&chain, &m.mu);
        let g = grid_min_pair_entropy(&chain, xi, 0.02, &m.mu).map_err(|e| e.to_string())?;
        margin = margin.min(g.min - (h - 5e-3));
    }
    let t = start.elapsed();
    check(
        ansatz <= 1e-12 && margin >= 0.0 && t < Duration::from_secs(120),
        format!("ansatz residual {ansatz:.2e}, min(grid - (J - 5e-3)) = {margin:.2e}, {t:.2?}"),
    )
}

fn c5_invariant_density() -> Outcome {
    let opts = RateOptions::default();
    let env = period_two();
    let mut periodic_res = 0.0f64;
    let mut vel_err = 0.0f64;
    for xi in [0.75, 0.85] {
        let k = tilted_kernel(&env, xi, &opts).map_err(|e| e.to_string())?;
        let d = invariant_density(&k.line_kernel(), 0, 1, 1e-13).map_err(|e| e.to_string())?;
        periodic_res = periodic_res.max(d.residual);
        vel_err = vel_err.max((d.velocity - xi).abs());
    }
    let spec = EnvironmentSpec::iid_1d(vec![[0.9, 0.1], [0.8, 0.2]], vec![0.5, 0.5], 0);
    let renv = sample_environment(&spec, 21).unwrap();
    let k = tilted_kernel(&renv, 0.9, &opts).map_err(|e| e.to_string())?;
    let d = invariant_density(&k.line_kernel(), -2000, 2000, 1e-10).map_err(|e| e.to_string())?;
    check(
        periodic_res <= 1e-12 && d.residual <= 1e-4 && vel_err <= 1e-4,
        format!("periodic residual {periodic_res:.2e}, random residual {:.2e}, |v - xi| = {vel_err:.2e}", d.residual),
    )
}

fn c6_regeneration() -> Outcome {
    let start = Instant::now();
    let (p, q) = (0.75f64, 0.25f64);
    let spec = EnvironmentSpec::deterministic_1d(p, 0);
    let ens = collect_slabs(&spec, &[1.0], 100_000, 60, 606, &HarvestOptions::default()).map_err(|e| e.to_string())?;
    let (fit, held) = (ens.subset(0, 50_000), ens.subset(50_000, 100_000));
    let boot = BootstrapOptions { seed: 61, ..BootstrapOptions::default() };
    let mut worst_psi = 0.0f64;
    let mut misses = Vec::new();
    let mut rows = Vec::new();
    for t in [-0.3, -0.1, 0.1, 0.3] {
        let l = lambda_a(&fit, &[t], &boot).map_err(|e| e.to_string())?;
        let ps = psi(&held, &[t], l.estimate.value);
        worst_psi = worst_psi.max((ps.value - 1.0).abs() / ps.stderr);
        let full = lambda_a(&ens, &[t], &boot).map_err(|e| e.to_string())?;
        let exact = (p * t.exp() + q * (-t).exp()).ln();
        if !full.estimate.contains(exact) {
            misses.push(t);
        }
        let tail = if full.heavy_tail { " heavy-tail" } else { "" };
        rows.push(format!(
            "{t}: {:.5} [{:.5}, {:.5}] vs {exact:.5}{tail}",
            full.estimate.value, full.estimate.ci_lo, full.estimate.ci_hi
        ));
    }
    let v = lln_velocity(&ens)[0];
    let vz = (v.value - 0.5).abs() / v.stderr;
    let t = start.elapsed();
    check(
        worst_psi <= 3.0 && misses.is_empty() && vz <= 3.0 && t < Duration::from_secs(300),
        format!(
            "held-out psi within {worst_psi:.2} se; Lambda {}; CI misses at {misses:?}; velocity {:.4} ({vz:.2} se), {t:.2?}",
            rows.join(", "),
            v.value
        ),
    )
}

fn c7_jensen() -> Outcome {
    let spec = EnvironmentSpec::iid_1d(vec![[0.9, 0.1], [0.8, 0.2]], vec![0.5, 0.5], 0);
    let ens = collect_slabs(&spec, &[1.0], 20_000_000, 60, 707, &HarvestOptions::default()).map_err(|e| e.to_string())?;
    let env = sample_environment(&spec, 7).unwrap();
    let boot = BootstrapOptions { seed: 71, ..BootstrapOptions::default() };
    let qopts = RateOptions { window: 1_000_000, tol: 1e-13 };
    let z99 = rwre_core::stats::Z99;
    let mut violations = Vec::new();
    let mut gap95 = (0.0, 0.0);
    for xi in [0.75, 0.8, 0.85, 0.9, 0.95] {
        let a = averaged_rate(&ens, &[xi], &boot).map_err(|e| e.to_string())?.rate;
        let qr = quenched_rate(&env, xi, Direction::Right, &qopts).map_err(|e| e.to_string())?;
        let ci = (a.half_width().powi(2) + (z99 * qr.stderr).powi(2)).sqrt();
        if a.value > qr.rate + ci {
            violations.push(xi);
        }
        if xi == 0.95 {
            gap95 = (qr.rate - a.value, ci);
        }
    }
    check(
        violations.is_empty() && gap95.0 > 3.0 * gap95.1,
        format!("ordering violated at {violations:?}; gap at 0.95 = {:.5} vs 3 CI = {:.5}", gap95.0, 3.0 * gap95.1),
    )
}

fn c8_meeting_ledger() -> Outcome {
    let start = Instant::now();
    let s3 = space_time_two_profile(3);
    let g0 = g_exact_sequence(&s3, &[0.0; 3], 14).map_err(|e| e.to_string())?;
    let g_err = g0.iter().map(|g| (g - 1.0).abs()).fold(0.0, f64::max);
    let mut resid = 0.0f64;
    let mut b0 = f64::NAN;
    for theta in [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]] {
        let g = g_exact_sequence(&s3, &theta, 14).map_err(|e| e.to_string())?;
        let mk = meeting_kernel(&s3, &theta, 40, 14).map_err(|e| e.to_string())?;
        resid = resid.max(mk.recursion_residuals(&g).into_iter().fold(0.0, f64::max));
        if theta[0] == 0.0 {
            b0 = mk.b_total;
        }
    }
    let b1 = meeting_kernel(&space_time_two_profile(1), &[0.0], 40, 14).map_err(|e| e.to_string())?.b_total;
    let t = start.elapsed();
    check(
        g_err <= 1e-12 && resid <= 1e-10 && b0 < 1.0 && b1 >= 1.0 - 1e-6 && t < Duration::from_secs(600),
        format!("|G_N(0) - 1| <= {g_err:.1e}, recursion residual {resid:.1e}, B(0) d=3 {b0:.4}, d=1 {b1:.6}, {t:.2?}"),
    )
}

fn c9_doob() -> Outcome {
    let spec = space_time_two_profile(3);
    let theta = [0.1, 0.0, 0.0];
    let mut row_err = 0.0f64;
    let mut fixed = 0.0f64;
    let mut consistency = 0.0f64;
    for seed in 0..5u64 {
        let env = sample_environment(&spec, seed).unwrap();
        let k = doob_kernel(&env, &theta, 12, 0, &[0, 0, 0]).map_err(|e| e.to_string())?;
        row_err = row_err.max(k.row_sum_error);
        let cone = cone_u(&env, &theta, 12, 0, &[0, 0, 0]).map_err(|e| e.to_string())?;
        fixed = fixed.max(cone.recursion_residual(&env));
        // a table rooted one layer down must reproduce the parent's values there
        for z in env.steps().steps() {
            let child = cone_u(&env, &theta, 11, 1, z).map_err(|e| e.to_string())?.root();
            let parent = cone.value(1, z).unwrap();
            consistency = consistency.max((child - parent).abs() / parent);
        }
    }
    let st = stationarity_check(
        &spec,
        &theta,
        10,
        10,
        |e| f64::from(u8::from(e.profile_index(&[0, 0, 0, 0]) == Some(0))),
        &McOptions { replicates: 2000, seed: 909 },
    )
    .map_err(|e| e.to_string())?;
    check(
        row_err <= 1e-14 && fixed <= 1e-12 && consistency <= 1e-12 && st.residual.contains(0.0),
        format!(
            "row sums {row_err:.1e}, fixed point {fixed:.1e}, table consistency {consistency:.1e}, stationarity residual {:.2e} in [{:.2e}, {:.2e}]",
            st.residual.value, st.residual.ci_lo, st.residual.ci_hi
        ),
    )
}

/// Frequency of +1 steps given |X_n/n - xi| <= delta, from the binomial law of the +1 count.
fn binomial_conditioned_frequency(n: u64, p: f64, xi: f64, delta: f64) -> f64 {
    let b = Binomial::new(p, n).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..=n {
        let x = 2.0 * k as f64 - n as f64;
        if (x / n as f64 - xi).abs() <= delta + 1e-12 {
            num += b.pmf(k) * k as f64 / n as f64;
            den += b.pmf(k);
        }
    }
    num / den
}

fn c10_conditioning() -> Outcome {
    let spec = EnvironmentSpec::space_time(1, ProfileLaw::Deterministic { profile: vec![0.6, 0.4] }, 0);
    let f = |_: &rwre_core::env::Environment, z: &[u16]| f64::from(u8::from(z[0] == 0));
    let mut gaps = Vec::new();
    let mut at40 = None;
    for n in [20, 40, 60] {
        let r = conditioned_empirical_st(
            &spec,
            &[0.4],
            0.05,
            n,
            f,
            1,
            ConditioningMode::Averaged,
            &RejectionOptions::default(),
            &TiltOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        let row = &r.rows[0];
        gaps.push(row.gap);
        if n == 40 {
            at40 = Some((row.conditional.estimate, r.tilted));
        }
    }
    let (cond, tilted) = at40.unwrap();
    let exact = binomial_conditioned_frequency(40, 0.6, 0.4, 0.05);
    let vs_tilted = (cond.value - tilted.value).abs() <= 3.0 * cond.half_width().hypot(tilted.half_width());
    let vs_exact = (cond.value - exact).abs() <= 3.0 * cond.half_width();
    check(
        vs_tilted && vs_exact && gaps[2] <= gaps[0],
        format!(
            "n=40 conditional {:.4} +- {:.4}, tilted {:.4} +- {:.4}, exact {exact:.4}; gaps n=20/40/60 {:.4}/{:.4}/{:.4}",
            cond.value,
            cond.half_width(),
            tilted.value,
            tilted.half_width(),
            gaps[0],
            gaps[1],
            gaps[2]
        ),
    )
}

fn c11_quenched_equals_averaged() -> Outcome {
    let spec = space_time_two_profile(3);
    let theta = [0.1, 0.0, 0.0];
    let lc = lambda_c(&spec.mean_kernel().unwrap(), &spec.step_set().unwrap(), &theta).unwrap().lambda;
    let ns = [10, 20, 40];
    let mut shrinking = true;
    let mut spreads = Vec::new();
    let mut table = Vec::new();
    for n in ns {
        let vals: Vec<f64> = (100..105u64)
            .map(|s| quenched_lmgf_st(&sample_environment(&spec, s).unwrap(), &theta, n).unwrap().value)
            .collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        spreads.push(hi - lo);
        table.push(vals);
    }
    for e in 0..5 {
        if (table[2][e] - lc).abs() >= (table[0][e] - lc).abs() {
            shrinking = false;
        }
    }
    let monotone = spreads.windows(2).all(|w| w[1] < w[0]);
    let devs: Vec<String> = (0..5).map(|e| format!("{:.1e}->{:.1e}", (table[0][e] - lc).abs(), (table[2][e] - lc).abs())).collect();
    check(
        shrinking && monotone,
        format!("deviations n=10->40 [{}]; spreads {:.2e}/{:.2e}/{:.2e}", devs.join(", "), spreads[0], spreads[1], spreads[2]),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("dual-route agreement", c1_dual_routes),
        ("classical-walk collapse", c2_classical_collapse),
        ("boundary law", c3_boundary_law),
        ("minimizer certification", c4_minimizer),
        ("invariant density", c5_invariant_density),
        ("regeneration identities", c6_regeneration),
        ("Jensen ordering", c7_jensen),
        ("space-time exact ledger", c8_meeting_ledger),
        ("Doob transform", c9_doob),
        ("conditioning at desk scale", c10_conditioning),
        ("quenched equals averaged", c11_quenched_equals_averaged),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let t = start.elapsed();
        match outcome {
            Ok(d) => println!("criterion {:>2} PASS {name}: {d} [{t:.1?}]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {d} [{t:.1?}]", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
