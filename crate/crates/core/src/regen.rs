//! Regeneration slabs under the averaged measure: harvesting, psi(theta, r),
//! the averaged LMGF and rate, and the tilted slab measure.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{nestling_classify, sample_environment, EnvironmentSpec, Nestling, StepSet};
use crate::error::{Error, Result};
use crate::rng::{child_seed, replica_rng};
use crate::stats::{bootstrap, mean_stderr, percentile_estimate, resample_counts, Estimate};
use crate::walk::{simulate_quenched, PathSample};

/// Levels <X_k, u>.
fn levels(path: &PathSample, direction: &[f64]) -> Vec<f64> {
    (0..=path.len())
        .map(|k| path.position(k).iter().zip(direction).map(|(x, u)| *x as f64 * u).sum())
        .collect()
}

/// Certified regeneration indices with the number of them that a later
/// part of the same path contradicts (a backtrack beyond the horizon).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Regenerations {
    pub indices: Vec<usize>,
    pub contradicted: usize,
}

/// Indices j > 0 that are strict records and are not undercut within
/// (j, j + horizon]; indices within `horizon` of the end are never certified.
pub fn find_regenerations(path: &PathSample, direction: &[f64], horizon: usize) -> Vec<usize> {
    find_regenerations_detailed(path, direction, horizon).indices
}

pub fn find_regenerations_detailed(path: &PathSample, direction: &[f64], horizon: usize) -> Regenerations {
    let lv = levels(path, direction);
    let n = path.len();
    // next strictly smaller level to the right
    let mut next_lower = vec![usize::MAX; n + 1];
    let mut stack: Vec<usize> = Vec::new();
    for k in (0..=n).rev() {
        while let Some(&top) = stack.last() {
            if lv[top] < lv[k] {
                break;
            }
            stack.pop();
        }
        next_lower[k] = stack.last().copied().unwrap_or(usize::MAX);
        stack.push(k);
    }
    let mut indices = Vec::new();
    let mut contradicted = 0;
    let mut best = lv[0];
    for j in 1..=n {
        let record = lv[j] > best;
        best = best.max(lv[j]);
        if !record || j + horizon > n {
            continue;
        }
        let nl = next_lower[j];
        if nl == usize::MAX || nl > j + horizon {
            indices.push(j);
            if nl != usize::MAX {
                contradicted += 1;
            }
        }
    }
    Regenerations { indices, contradicted }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarvestOptions {
    /// Steps simulated per path (a fresh environment per path).
    pub path_len: usize,
    /// Give up (Starved) after this many simulated steps.
    pub max_total_steps: u64,
    /// Keep the step sequence of every slab (needed for slab functionals).
    pub keep_steps: bool,
}

impl Default for HarvestOptions {
    fn default() -> Self {
        HarvestOptions { path_len: 50_000, max_total_steps: 2_000_000_000, keep_steps: false }
    }
}

/// One slab viewed inside an ensemble.
#[derive(Debug, Clone, Copy)]
pub struct RegenerationSlab<'a> {
    pub displacement: &'a [i64],
    pub duration: u32,
    /// Indices into the ensemble's step set, when kept.
    pub steps: Option<&'a [u16]>,
}

/// Distinct (displacement, duration) pairs with multiplicities.
#[derive(Debug, Clone)]
struct SlabTypes {
    disp: Vec<Vec<f64>>,
    dur: Vec<f64>,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlabEnsemble {
    dim: usize,
    step_set: StepSet,
    direction: Vec<f64>,
    disp: Vec<i64>,
    dur: Vec<u32>,
    steps: Option<Vec<u16>>,
    offsets: Option<Vec<usize>>,
    pub horizon: usize,
    pub paths_used: usize,
    pub discarded: usize,
    /// Fraction of certified regenerations contradicted later in the same path.
    pub censored_fraction: f64,
    pub total_steps: u64,
    /// None when the profile law has no finite support.
    pub nestling: Option<bool>,
    #[serde(skip)]
    types: OnceLock<SlabTypes>,
}

struct PathHarvest {
    disp: Vec<i64>,
    dur: Vec<u32>,
    steps: Vec<u16>,
    lens: Vec<usize>,
    certified: usize,
    contradicted: usize,
}

fn harvest_path(path: &PathSample, direction: &[f64], horizon: usize, keep: bool) -> PathHarvest {
    let reg = find_regenerations_detailed(path, direction, horizon);
    let d = path.dimension();
    let mut h = PathHarvest {
        disp: Vec::new(),
        dur: Vec::new(),
        steps: Vec::new(),
        lens: Vec::new(),
        certified: reg.indices.len(),
        contradicted: reg.contradicted,
    };
    // the stretch before the first regeneration has a different law: skip it
    for w in reg.indices.windows(2) {
        let (a, b) = (w[0], w[1]);
        for i in 0..d {
            h.disp.push(path.position(b)[i] - path.position(a)[i]);
        }
        h.dur.push((b - a) as u32);
        if keep {
            h.steps.extend_from_slice(&path.step_indices()[a..b]);
            h.lens.push(b - a);
        }
    }
    h
}

/// Harvest `count` slabs from fresh averaged paths in direction `direction`.
pub fn collect_slabs(
    spec: &EnvironmentSpec,
    direction: &[f64],
    count: usize,
    horizon: usize,
    seed: u64,
    opts: &HarvestOptions,
) -> Result<SlabEnsemble> {
    spec.validate()?;
    let step_set = spec.step_set()?;
    let d = step_set.dimension();
    if direction.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: direction.len() });
    }
    if count == 0 {
        return Err(Error::InvalidSpec("count must be positive".into()));
    }
    if opts.path_len <= 2 * horizon {
        return Err(Error::InvalidSpec("path length must exceed twice the horizon".into()));
    }
    let nestling = match nestling_classify(spec) {
        Ok(Nestling::Nestling) => Some(true),
        Ok(Nestling::NonNestling { .. }) => Some(false),
        Err(_) => None,
    };
    let mut ens = SlabEnsemble {
        dim: d,
        step_set,
        direction: direction.to_vec(),
        disp: Vec::new(),
        dur: Vec::new(),
        steps: opts.keep_steps.then(Vec::new),
        offsets: opts.keep_steps.then(|| vec![0]),
        horizon,
        paths_used: 0,
        discarded: 0,
        censored_fraction: 0.0,
        total_steps: 0,
        nestling,
        types: OnceLock::new(),
    };
    let origin = vec![0i64; d];
    let batch = rayon::current_num_threads().max(1) * 2;
    let mut next_replica = 0u64;
    let mut certified = 0usize;
    let mut contradicted = 0usize;
    while ens.dur.len() < count {
        if ens.total_steps >= opts.max_total_steps {
            return Err(Error::Starved { found: ens.dur.len(), requested: count });
        }
        let harvests: Result<Vec<PathHarvest>> = (next_replica..next_replica + batch as u64)
            .into_par_iter()
            .map(|r| {
                let env = sample_environment(spec, child_seed(seed, r))?;
                let path = simulate_quenched(&env, &origin, opts.path_len, &mut replica_rng(seed, r), None)?;
                Ok(harvest_path(&path, direction, horizon, opts.keep_steps))
            })
            .collect();
        next_replica += batch as u64;
        for h in harvests? {
            if ens.dur.len() >= count {
                break;
            }
            ens.paths_used += 1;
            ens.discarded += 1;
            ens.total_steps += opts.path_len as u64;
            certified += h.certified;
            contradicted += h.contradicted;
            let take = h.dur.len().min(count - ens.dur.len());
            ens.disp.extend_from_slice(&h.disp[..take * d]);
            ens.dur.extend_from_slice(&h.dur[..take]);
            if let (Some(steps), Some(offsets)) = (ens.steps.as_mut(), ens.offsets.as_mut()) {
                let used: usize = h.lens[..take].iter().sum();
                steps.extend_from_slice(&h.steps[..used]);
                for l in &h.lens[..take] {
                    let last = *offsets.last().unwrap();
                    offsets.push(last + l);
                }
            }
        }
    }
    ens.censored_fraction = if certified > 0 { contradicted as f64 / certified as f64 } else { 0.0 };
    Ok(ens)
}

impl SlabEnsemble {
    pub fn len(&self) -> usize {
        self.dur.len()
    }
    pub fn is_empty(&self) -> bool {
        self.dur.is_empty()
    }
    pub fn dimension(&self) -> usize {
        self.dim
    }
    pub fn step_set(&self) -> &StepSet {
        &self.step_set
    }
    pub fn direction(&self) -> &[f64] {
        &self.direction
    }
    pub fn has_steps(&self) -> bool {
        self.steps.is_some()
    }

    pub fn slab(&self, i: usize) -> RegenerationSlab<'_> {
        RegenerationSlab {
            displacement: &self.disp[i * self.dim..(i + 1) * self.dim],
            duration: self.dur[i],
            steps: match (&self.steps, &self.offsets) {
                (Some(s), Some(o)) => Some(&s[o[i]..o[i + 1]]),
                _ => None,
            },
        }
    }

    pub fn durations(&self) -> &[u32] {
        &self.dur
    }

    /// Slabs [from, to) as a new ensemble with the same metadata.
    pub fn subset(&self, from: usize, to: usize) -> SlabEnsemble {
        let mut out = self.clone();
        out.types = OnceLock::new();
        out.disp = self.disp[from * self.dim..to * self.dim].to_vec();
        out.dur = self.dur[from..to].to_vec();
        if let (Some(s), Some(o)) = (&self.steps, &self.offsets) {
            out.steps = Some(s[o[from]..o[to]].to_vec());
            out.offsets = Some(o[from..=to].iter().map(|v| v - o[from]).collect());
        }
        out
    }

    fn types(&self) -> &SlabTypes {
        self.types.get_or_init(|| {
            let mut map: HashMap<(Vec<i64>, u32), u64> = HashMap::new();
            for i in 0..self.len() {
                let s = self.slab(i);
                *map.entry((s.displacement.to_vec(), s.duration)).or_insert(0) += 1;
            }
            let mut entries: Vec<_> = map.into_iter().collect();
            entries.sort();
            SlabTypes {
                disp: entries.iter().map(|((d, _), _)| d.iter().map(|v| *v as f64).collect()).collect(),
                dur: entries.iter().map(|((_, t), _)| *t as f64).collect(),
                counts: entries.iter().map(|(_, c)| *c).collect(),
            }
        })
    }

    /// One slab per line: {"steps": [...], "displacement": [...], "duration": n}.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for i in 0..self.len() {
            let s = self.slab(i);
            let steps: Option<Vec<&[i64]>> =
                s.steps.map(|st| st.iter().map(|k| self.step_set.step(*k as usize)).collect());
            let line = serde_json::json!({ "steps": steps, "displacement": s.displacement, "duration": s.duration });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Read slabs written by `write_jsonl`; metadata comes from `template`.
    pub fn read_jsonl<R: BufRead>(r: R, template: &SlabEnsemble) -> Result<SlabEnsemble> {
        #[derive(Deserialize)]
        struct Line {
            steps: Option<Vec<Vec<i64>>>,
            displacement: Vec<i64>,
            duration: u32,
        }
        let mut out = template.subset(0, 0);
        let mut steps: Option<Vec<u16>> = Some(Vec::new());
        let mut offsets = vec![0usize];
        for (no, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::InvalidSpec(format!("line {}: {e}", no + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(&line).map_err(|e| Error::InvalidSpec(format!("line {}: {e}", no + 1)))?;
            if l.displacement.len() != out.dim || l.duration == 0 {
                return Err(Error::InvalidSpec(format!("line {}: malformed slab", no + 1)));
            }
            out.disp.extend_from_slice(&l.displacement);
            out.dur.push(l.duration);
            match (l.steps, steps.as_mut()) {
                (Some(st), Some(acc)) => {
                    for z in &st {
                        let k = out
                            .step_set
                            .index_of(z)
                            .ok_or_else(|| Error::InvalidSpec(format!("line {}: unknown step {z:?}", no + 1)))?;
                        acc.push(k as u16);
                    }
                    offsets.push(offsets.last().unwrap() + st.len());
                }
                _ => steps = None,
            }
        }
        out.offsets = steps.is_some().then_some(offsets);
        out.steps = steps;
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// log psi(theta, r) on (possibly resampled) type counts.
fn log_psi(t: &SlabTypes, counts: &[u64], theta: &[f64], r: f64) -> f64 {
    let n: u64 = counts.iter().sum();
    let mut top = f64::NEG_INFINITY;
    let ws: Vec<f64> = t
        .disp
        .iter()
        .zip(&t.dur)
        .map(|(d, tau)| {
            let w = dot(theta, d) - r * tau;
            top = top.max(w);
            w
        })
        .collect();
    let s: f64 = ws.iter().zip(counts).map(|(w, c)| *c as f64 * (w - top).exp()).sum();
    top + s.ln() - (n as f64).ln()
}

fn solve_lambda(t: &SlabTypes, counts: &[u64], theta: &[f64], bound: f64) -> f64 {
    if theta.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let span = theta.iter().fold(0.0f64, |m, v| m.max(v.abs())) * bound;
    let (mut lo, mut hi) = (-span, span);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if log_psi(t, counts, theta, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsiEstimate {
    pub value: f64,
    pub stderr: f64,
    pub rel_stderr: f64,
    /// Share of the total weight carried by slabs above the 99.99th weight percentile.
    pub tail_share: f64,
    /// Largest single-slab share of the summed squared weights; stays O(1)
    /// instead of vanishing when the weights have infinite variance.
    pub square_share: f64,
    pub heavy_tail: bool,
}

/// With finite variance the largest squared weight is a vanishing share of
/// the total; one slab holding more than this marks the estimate unreliable.
const SQUARE_SHARE_LIMIT: f64 = 0.01;

fn psi_on(t: &SlabTypes, theta: &[f64], r: f64) -> PsiEstimate {
    let n: u64 = t.counts.iter().sum();
    let w: Vec<f64> = t.disp.iter().zip(&t.dur).map(|(d, tau)| (dot(theta, d) - r * tau).exp()).collect();
    let nf = n as f64;
    let mean = w.iter().zip(&t.counts).map(|(w, c)| w * *c as f64).sum::<f64>() / nf;
    let var = w.iter().zip(&t.counts).map(|(w, c)| (w - mean).powi(2) * *c as f64).sum::<f64>() / (nf - 1.0).max(1.0);
    let stderr = (var / nf).sqrt();
    // weight share above the 99.99th percentile of per-slab weights
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|a, b| w[*b].total_cmp(&w[*a]));
    let cutoff = ((nf * 1e-4).ceil() as u64).max(1);
    let (mut seen, mut top) = (0u64, 0.0);
    for i in order {
        if seen >= cutoff {
            break;
        }
        let take = t.counts[i].min(cutoff - seen);
        top += w[i] * take as f64;
        seen += take;
    }
    let tail_share = top / (mean * nf);
    let sq: f64 = w.iter().zip(&t.counts).map(|(w, c)| w * w * *c as f64).sum();
    let square_share = w.iter().map(|w| w * w).fold(0.0, f64::max) / sq;
    let rel = stderr / mean;
    PsiEstimate {
        value: mean,
        stderr,
        rel_stderr: rel,
        tail_share,
        square_share,
        heavy_tail: rel > 0.1 || tail_share > 0.1 || square_share > SQUARE_SHARE_LIMIT,
    }
}

/// psi-hat(theta, r): slab average of e^{<theta, X> - r tau}.
pub fn psi(ens: &SlabEnsemble, theta: &[f64], r: f64) -> PsiEstimate {
    psi_on(ens.types(), theta, r)
}

/// Mean displacement over mean duration with a delta-method standard error.
pub fn lln_velocity(ens: &SlabEnsemble) -> Vec<Estimate> {
    let n = ens.len() as f64;
    let taus: Vec<f64> = ens.dur.iter().map(|t| *t as f64).collect();
    let mt = taus.iter().sum::<f64>() / n;
    (0..ens.dim)
        .map(|i| {
            let xs: Vec<f64> = (0..ens.len()).map(|s| ens.disp[s * ens.dim + i] as f64).collect();
            let mx = xs.iter().sum::<f64>() / n;
            let ratio = mx / mt;
            let resid: Vec<f64> = xs.iter().zip(&taus).map(|(x, t)| x - ratio * t).collect();
            let (_, se) = mean_stderr(&resid);
            Estimate::normal(ratio, se / mt)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub resamples: usize,
    pub seed: u64,
    /// Two-sided level of percentile intervals.
    pub level: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions { resamples: 200, seed: 0x0B00_7577, level: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaA {
    pub theta: Vec<f64>,
    pub estimate: Estimate,
    pub psi_at_zero: PsiEstimate,
    pub heavy_tail: bool,
}

fn step_bound(ens: &SlabEnsemble) -> f64 {
    ens.step_set.bound() as f64
}

fn check_cone(ens: &SlabEnsemble, theta: &[f64]) -> Result<PsiEstimate> {
    let p0 = psi(ens, theta, 0.0);
    if ens.nestling == Some(true) && p0.value <= 1.0 + 2.0 * p0.stderr {
        return Err(Error::OutsideCone(format!(
            "psi(theta, 0) = {} is not above 1 + 2 stderr for a nestling law",
            p0.value
        )));
    }
    Ok(p0)
}

/// Lambda_a(theta) solving psi(theta, Lambda) = 1, with a bootstrap interval.
pub fn lambda_a(ens: &SlabEnsemble, theta: &[f64], opts: &BootstrapOptions) -> Result<LambdaA> {
    if theta.len() != ens.dim {
        return Err(Error::DimensionMismatch { expected: ens.dim, got: theta.len() });
    }
    let p0 = check_cone(ens, theta)?;
    let t = ens.types();
    let b = step_bound(ens);
    let point = solve_lambda(t, &t.counts, theta, b);
    let reps = bootstrap(opts.resamples, opts.seed, |rng| {
        let c = resample_counts(&t.counts, rng);
        solve_lambda(t, &c, theta, b)
    });
    let at = psi_on(t, theta, point);
    Ok(LambdaA {
        theta: theta.to_vec(),
        estimate: percentile_estimate(point, &reps, opts.level),
        psi_at_zero: p0,
        heavy_tail: at.heavy_tail,
    })
}

/// Point estimates of Lambda, its gradient and Hessian on given counts.
fn grad_hess_on(t: &SlabTypes, counts: &[u64], theta: &[f64], bound: f64) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let d = theta.len();
    let lam = solve_lambda(t, counts, theta, bound);
    let mut ex = vec![0.0; d];
    let mut et = 0.0;
    let ws: Vec<f64> = t
        .disp
        .iter()
        .zip(&t.dur)
        .zip(counts)
        .map(|((x, tau), c)| *c as f64 * (dot(theta, x) - lam * tau).exp())
        .collect();
    for ((x, tau), w) in t.disp.iter().zip(&t.dur).zip(&ws) {
        for i in 0..d {
            ex[i] += w * x[i];
        }
        et += w * tau;
    }
    let grad: Vec<f64> = ex.iter().map(|v| v / et).collect();
    let mut hess = vec![vec![0.0; d]; d];
    for ((x, tau), w) in t.disp.iter().zip(&t.dur).zip(&ws) {
        let c: Vec<f64> = (0..d).map(|i| x[i] - grad[i] * tau).collect();
        for i in 0..d {
            for j in 0..d {
                hess[i][j] += w * c[i] * c[j];
            }
        }
    }
    for row in hess.iter_mut() {
        for v in row.iter_mut() {
            *v /= et;
        }
    }
    (lam, grad, hess)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradHess {
    pub theta: Vec<f64>,
    pub lambda: f64,
    pub grad: Vec<Estimate>,
    pub hess: Vec<Vec<Estimate>>,
}

/// Gradient E[X e^w]/E[tau e^w] and Hessian E[(X - grad tau)(X - grad tau)^T e^w]/E[tau e^w].
pub fn grad_hess_lambda_a(ens: &SlabEnsemble, theta: &[f64], opts: &BootstrapOptions) -> Result<GradHess> {
    if theta.len() != ens.dim {
        return Err(Error::DimensionMismatch { expected: ens.dim, got: theta.len() });
    }
    check_cone(ens, theta)?;
    let t = ens.types();
    let b = step_bound(ens);
    let (lam, g, h) = grad_hess_on(t, &t.counts, theta, b);
    let d = theta.len();
    let reps: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..opts.resamples)
        .into_par_iter()
        .map(|i| {
            let c = resample_counts(&t.counts, &mut replica_rng(opts.seed, i as u64));
            let (_, g, h) = grad_hess_on(t, &c, theta, b);
            (g, h)
        })
        .collect();
    let grad = (0..d)
        .map(|i| percentile_estimate(g[i], &reps.iter().map(|r| r.0[i]).collect::<Vec<_>>(), opts.level))
        .collect();
    let hess = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| percentile_estimate(h[i][j], &reps.iter().map(|r| r.1[i][j]).collect::<Vec<_>>(), opts.level))
                .collect()
        })
        .collect();
    Ok(GradHess { theta: theta.to_vec(), lambda: lam, grad, hess })
}

/// Damped Newton for grad Lambda(theta) = xi on the given counts.
fn newton_theta(t: &SlabTypes, counts: &[u64], xi: &[f64], start: &[f64], bound: f64) -> Option<(Vec<f64>, f64, usize)> {
    let d = xi.len();
    let obj = |th: &[f64]| solve_lambda(t, counts, th, bound) - dot(th, xi);
    let mut theta = start.to_vec();
    let mut f = obj(&theta);
    for it in 0..100 {
        let (lam, g, h) = grad_hess_on(t, counts, &theta, bound);
        let resid: Vec<f64> = g.iter().zip(xi).map(|(a, b)| a - b).collect();
        if resid.iter().all(|r| r.abs() < 1e-11) {
            return Some((theta, lam, it));
        }
        let hm = DMatrix::from_fn(d, d, |i, j| h[i][j]);
        let step = hm.lu().solve(&DVector::from_vec(resid))?;
        let mut s = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a - s * b).collect();
            let fc = obj(&cand);
            if fc <= f + 1e-15 * f.abs().max(1.0) {
                theta = cand;
                f = fc;
                break;
            }
            s *= 0.5;
            if s < 1e-8 {
                return None;
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AveragedRate {
    pub xi: Vec<f64>,
    pub rate: Estimate,
    pub theta: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub heavy_tail: bool,
}

/// I_a(xi) = <theta, xi> - Lambda_a(theta) at grad Lambda_a(theta) = xi.
pub fn averaged_rate(ens: &SlabEnsemble, xi: &[f64], opts: &BootstrapOptions) -> Result<AveragedRate> {
    if xi.len() != ens.dim {
        return Err(Error::DimensionMismatch { expected: ens.dim, got: xi.len() });
    }
    let t = ens.types();
    let b = step_bound(ens);
    let start = vec![0.0; xi.len()];
    let (theta, lam, iterations) = newton_theta(t, &t.counts, xi, &start, b)
        .ok_or_else(|| Error::OutOfCone(format!("no tilt with gradient {xi:?} found")))?;
    check_cone(ens, &theta)?;
    let at = psi_on(t, &theta, lam);
    if at.rel_stderr > 0.1 {
        return Err(Error::OutOfCone(format!(
            "psi weights at theta = {theta:?} have relative stderr {:.3}",
            at.rel_stderr
        )));
    }
    let point = dot(&theta, xi) - lam;
    let reps = bootstrap(opts.resamples, opts.seed, |rng| {
        let c = resample_counts(&t.counts, rng);
        match newton_theta(t, &c, xi, &theta, b) {
            Some((th, l, _)) => dot(&th, xi) - l,
            None => f64::NAN,
        }
    });
    Ok(AveragedRate {
        xi: xi.to_vec(),
        rate: percentile_estimate(point, &reps, opts.level),
        theta,
        lambda: lam,
        iterations,
        heavy_tail: at.heavy_tail,
    })
}

/// Self-normalized estimate of the integral of f under the tilted slab
/// measure. `f` reads `k` consecutive step indices (into the ensemble's step set).
pub fn tilted_slab_expectation<F>(ens: &SlabEnsemble, theta: &[f64], f: F, k: usize, opts: &BootstrapOptions) -> Result<Estimate>
where
    F: Fn(&[u16]) -> f64 + Sync,
{
    let (Some(steps), Some(offsets)) = (&ens.steps, &ens.offsets) else {
        return Err(Error::Unsupported("ensemble was harvested without steps".into()));
    };
    if k == 0 {
        return Err(Error::InvalidSpec("k must be at least 1".into()));
    }
    check_cone(ens, theta)?;
    let t = ens.types();
    let lam = solve_lambda(t, &t.counts, theta, step_bound(ens));
    let blocks = ens.len() / k;
    if blocks < 2 {
        return Err(Error::InvalidSpec("not enough slabs to form blocks".into()));
    }
    let weight = |i: usize| {
        let s = ens.slab(i);
        let x: Vec<f64> = s.displacement.iter().map(|v| *v as f64).collect();
        dot(theta, &x) - lam * s.duration as f64
    };
    // per block: numerator and the denominator contribution of its slabs
    let per_block: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let first = b * k;
            let seq = &steps[offsets[first]..offsets[first + k]];
            let tau1 = ens.dur[first] as usize;
            let wsum: f64 = (first..first + k).map(weight).sum();
            let inner: f64 = (0..tau1).map(|j| f(&seq[j..j + k])).sum();
            // E[tau_1 e^{W_K}] equals the single-slab denominator since psi = 1
            // at Lambda, and keeps f = 1 normalized exactly
            let w = wsum.exp();
            (w * inner, w * tau1 as f64)
        })
        .collect();
    let ratio = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut n, mut d) = (0.0, 0.0);
        for i in idx {
            n += per_block[i].0;
            d += per_block[i].1;
        }
        n / d
    };
    let point = ratio(&mut (0..blocks));
    let reps = bootstrap(opts.resamples, opts.seed, |rng| {
        let mut it = (0..blocks).map(|_| rng.random_range(0..blocks));
        ratio(&mut it)
    });
    Ok(percentile_estimate(point, &reps, opts.level))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlabDiagnostics {
    pub lag1_autocorrelation: f64,
    /// Standard error of the lag-1 autocorrelation under independence.
    pub lag1_stderr: f64,
    pub mean_duration: f64,
    pub max_duration: u32,
    pub censored_fraction: f64,
}

pub fn slab_diagnostics(ens: &SlabEnsemble) -> SlabDiagnostics {
    let x: Vec<f64> = ens.dur.iter().map(|v| *v as f64).collect();
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    let cov = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>();
    SlabDiagnostics {
        lag1_autocorrelation: if var > 0.0 { cov / var } else { 0.0 },
        lag1_stderr: 1.0 / n.sqrt(),
        mean_duration: m,
        max_duration: ens.dur.iter().copied().max().unwrap_or(0),
        censored_fraction: ens.censored_fraction,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditioningReport {
    pub conditional: Estimate,
    pub tilted: Estimate,
    pub gap: f64,
    pub acceptance: f64,
    pub accepted: usize,
    pub proposals: usize,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningOptions {
    /// Stop after this many accepted paths.
    pub target_accepted: usize,
    pub max_proposals: usize,
    pub seed: u64,
}

impl Default for ConditioningOptions {
    fn default() -> Self {
        ConditioningOptions { target_accepted: 4000, max_proposals: 20_000_000, seed: 0xC0DE }
    }
}

/// Rejection-sample averaged paths with |X_n / n - xi| <= delta (sup norm)
/// and return the conditional means of (1/n) sum_j f(Z_{j+1..j+k}).
pub fn rejection_sample<F>(
    spec: &EnvironmentSpec,
    xi: &[f64],
    delta: f64,
    n: usize,
    f: &F,
    k: usize,
    opts: &ConditioningOptions,
) -> Result<(Vec<f64>, usize)>
where
    F: Fn(&[u16]) -> f64 + Sync,
{
    spec.validate()?;
    let d = spec.dimension;
    if xi.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: xi.len() });
    }
    if n == 0 || n > 60 {
        return Err(Error::OutOfRange(format!("n = {n} outside 1..=60")));
    }
    let origin = vec![0i64; d];
    let len = n + k - 1;
    let mut accepted = Vec::new();
    let mut proposals = 0usize;
    let chunk = 4096usize;
    while accepted.len() < opts.target_accepted && proposals < opts.max_proposals {
        let batch: Result<Vec<Option<f64>>> = (proposals..proposals + chunk)
            .into_par_iter()
            .map(|i| {
                let env = sample_environment(spec, child_seed(opts.seed, i as u64))?;
                let path = simulate_quenched(&env, &origin, len, &mut replica_rng(opts.seed, i as u64), None)?;
                let ok = (0..d).all(|c| (path.position(n)[c] as f64 / n as f64 - xi[c]).abs() <= delta + 1e-9);
                Ok(ok.then(|| {
                    let st = path.step_indices();
                    (0..n).map(|j| f(&st[j..j + k])).sum::<f64>() / n as f64
                }))
            })
            .collect();
        let mut used = 0;
        for v in batch? {
            if accepted.len() >= opts.target_accepted {
                break;
            }
            used += 1;
            accepted.extend(v);
        }
        proposals += used;
    }
    let acceptance = accepted.len() as f64 / proposals as f64;
    if accepted.len() < 2 || acceptance < 1e-6 {
        return Err(Error::TooRare { acceptance });
    }
    Ok((accepted, proposals))
}

/// Conditional empirical mean of f against the tilted slab measure at the
/// tilt whose averaged gradient is xi. The ensemble must come from `spec`.
#[allow(clippy::too_many_arguments)]
pub fn conditioned_vs_tilted<F>(
    spec: &EnvironmentSpec,
    ens: &SlabEnsemble,
    xi: &[f64],
    delta: f64,
    n: usize,
    f: F,
    k: usize,
    opts: &ConditioningOptions,
    boot: &BootstrapOptions,
) -> Result<ConditioningReport>
where
    F: Fn(&[u16]) -> f64 + Sync,
{
    let (vals, proposals) = rejection_sample(spec, xi, delta, n, &f, k, opts)?;
    let (m, se) = mean_stderr(&vals);
    let conditional = Estimate::normal(m, se);
    let rate = averaged_rate(ens, xi, boot)?;
    let tilted = tilted_slab_expectation(ens, &rate.theta, &f, k, boot)?;
    Ok(ConditioningReport {
        conditional,
        tilted,
        gap: (conditional.value - tilted.value).abs(),
        acceptance: vals.len() as f64 / proposals as f64,
        accepted: vals.len(),
        proposals,
        theta: rate.theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ens_det(p: f64, count: usize, keep: bool) -> SlabEnsemble {
        let spec = EnvironmentSpec::deterministic_1d(p, 3);
        let opts = HarvestOptions { path_len: 20_000, keep_steps: keep, ..Default::default() };
        collect_slabs(&spec, &[1.0], count, 60, 17, &opts).unwrap()
    }

    #[test]
    fn monotone_path_regenerates_everywhere() {
        let xs: Vec<i64> = (0..=20).collect();
        let p = PathSample::from_positions_1d(&xs).unwrap();
        assert_eq!(find_regenerations(&p, &[1.0], 3), (1..=17).collect::<Vec<_>>());
    }

    #[test]
    fn hand_checked_path() {
        // levels 0,1,0,1,2,3,...: index 3 ties the earlier visit to 1, so the
        // first strict record never undercut afterwards is index 4
        let mut xs = vec![0, 1, 0, 1];
        xs.extend(2..=12);
        let p = PathSample::from_positions_1d(&xs).unwrap();
        assert_eq!(find_regenerations(&p, &[1.0], 2)[0], 4);
    }

    #[test]
    fn always_right_slabs_are_unit() {
        let e = ens_det(1.0, 500, false);
        assert!((0..e.len()).all(|i| e.slab(i).duration == 1 && e.slab(i).displacement == [1]));
        let p = psi(&e, &[0.4], 0.1);
        assert!((p.value - (0.3f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn psi_at_origin_is_one() {
        let e = ens_det(0.75, 2000, false);
        assert_eq!(psi(&e, &[0.0], 0.0).value, 1.0);
        let l = lambda_a(&e, &[0.0], &BootstrapOptions { resamples: 20, ..Default::default() }).unwrap();
        assert_eq!(l.estimate.value, 0.0);
    }

    #[test]
    fn self_normalization_gives_one() {
        let e = ens_det(0.75, 4000, true);
        let est = tilted_slab_expectation(&e, &[0.2], |_| 1.0, 2, &BootstrapOptions { resamples: 20, ..Default::default() }).unwrap();
        assert!((est.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jsonl_round_trip() {
        let e = ens_det(0.75, 50, true);
        let mut buf = Vec::new();
        e.write_jsonl(&mut buf).unwrap();
        let back = SlabEnsemble::read_jsonl(std::io::Cursor::new(buf), &e).unwrap();
        assert_eq!(back.len(), 50);
        for i in 0..50 {
            assert_eq!(back.slab(i).displacement, e.slab(i).displacement);
            assert_eq!(back.slab(i).steps, e.slab(i).steps);
        }
    }

    #[test]
    fn harvest_is_deterministic() {
        let a = ens_det(0.75, 3000, false);
        let b = ens_det(0.75, 3000, false);
        assert_eq!(a.durations(), b.durations());
    }

    #[test]
    fn too_rare_is_reported() {
        let spec = EnvironmentSpec::deterministic_1d(0.75, 1);
        let opts = ConditioningOptions { target_accepted: 10, max_proposals: 8192, seed: 1 };
        let r = rejection_sample(&spec, &[-0.9], 0.01, 60, &|_: &[u16]| 0.0, 1, &opts);
        assert!(matches!(r, Err(Error::TooRare { .. })));
    }
}
