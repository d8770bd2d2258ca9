//! Space-time environments: Cramér rate, the tilted martingale u_N on
//! backward cones, its L2 norm and meeting-time recursion, the Doob
//! transform and the conditioning experiments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{sample_environment, Environment, EnvironmentSpec, StepSet};
use crate::error::{Error, Result};
use crate::rng::{child_seed, replica_rng};
use crate::stats::{mean_stderr, Estimate};
use crate::walk::simulate_quenched;

/// Largest cone depth accepted in three or more dimensions.
pub const MAX_CONE_DEPTH_3D: usize = 40;
const MAX_CONE_CELLS: usize = 20_000_000;
/// Cube cells allowed for the exact pair-walk expansion.
const MAX_PAIR_CELLS: usize = 200_000;
pub const MAX_CONDITIONING_LENGTH: usize = 60;

fn dot_i(theta: &[f64], z: &[i64]) -> f64 {
    theta.iter().zip(z).map(|(t, v)| t * *v as f64).sum()
}

fn require_nearest_neighbor(steps: &StepSet) -> Result<()> {
    if !steps.is_nearest_neighbor() {
        return Err(Error::Unsupported("space-time routines need nearest-neighbour steps".into()));
    }
    Ok(())
}

fn require_space_time(env: &Environment) -> Result<()> {
    if !env.is_space_time() {
        return Err(Error::Unsupported("environment is not space-time".into()));
    }
    require_nearest_neighbor(env.steps())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TiltParams {
    pub theta: Vec<f64>,
    /// log sum_z q(z) e^{<theta, z>}.
    pub lambda: f64,
    pub q: Vec<f64>,
    /// q(z) e^{<theta, z> - lambda}.
    pub q_theta: Vec<f64>,
    #[serde(skip)]
    steps: StepSet,
}

impl TiltParams {
    pub fn steps(&self) -> &StepSet {
        &self.steps
    }

    /// e^{<theta, z> - lambda} per step.
    pub fn weights(&self) -> Vec<f64> {
        self.steps.steps().iter().map(|z| (dot_i(&self.theta, z) - self.lambda).exp()).collect()
    }

    /// Mean step under q^theta.
    pub fn gradient(&self) -> Vec<f64> {
        let d = self.steps.dimension();
        let mut g = vec![0.0; d];
        for (z, p) in self.steps.steps().iter().zip(&self.q_theta) {
            for i in 0..d {
                g[i] += p * z[i] as f64;
            }
        }
        g
    }

    /// Covariance of the step under q^theta.
    pub fn hessian(&self) -> Vec<Vec<f64>> {
        let d = self.steps.dimension();
        let g = self.gradient();
        let mut h = vec![vec![0.0; d]; d];
        for (z, p) in self.steps.steps().iter().zip(&self.q_theta) {
            for i in 0..d {
                for j in 0..d {
                    h[i][j] += p * (z[i] as f64 - g[i]) * (z[j] as f64 - g[j]);
                }
            }
        }
        h
    }
}

fn check_kernel(q: &[f64], steps: &StepSet) -> Result<()> {
    if q.len() != steps.len() {
        return Err(Error::DimensionMismatch { expected: steps.len(), got: q.len() });
    }
    if q.iter().any(|p| !p.is_finite() || *p < 0.0) || (q.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidSpec("averaged kernel must be a probability vector".into()));
    }
    Ok(())
}

pub fn lambda_c(q: &[f64], steps: &StepSet, theta: &[f64]) -> Result<TiltParams> {
    check_kernel(q, steps)?;
    if theta.len() != steps.dimension() {
        return Err(Error::DimensionMismatch { expected: steps.dimension(), got: theta.len() });
    }
    let expo: Vec<f64> = steps.steps().iter().map(|z| dot_i(theta, z)).collect();
    let top = expo.iter().zip(q).filter(|(_, p)| **p > 0.0).map(|(e, _)| *e).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = expo.iter().zip(q).map(|(e, p)| p * (e - top).exp()).sum();
    let lambda = top + s.ln();
    let q_theta = expo.iter().zip(q).map(|(e, p)| p * (e - lambda).exp()).collect();
    Ok(TiltParams { theta: theta.to_vec(), lambda, q: q.to_vec(), q_theta, steps: steps.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CramerRate {
    pub xi: Vec<f64>,
    pub rate: f64,
    pub theta: Vec<f64>,
    pub iterations: usize,
}

fn solve_sym(h: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let d = b.len();
    let m = nalgebra::DMatrix::from_fn(d, d, |i, j| h[i][j]);
    m.cholesky().map(|c| c.solve(&nalgebra::DVector::from_column_slice(b)).iter().copied().collect())
}

/// I_c(xi) = <theta, xi> - Lambda_c(theta) at grad Lambda_c(theta) = xi, by damped Newton.
pub fn rate_c(q: &[f64], steps: &StepSet, xi: &[f64]) -> Result<CramerRate> {
    check_kernel(q, steps)?;
    require_nearest_neighbor(steps)?;
    let d = steps.dimension();
    if xi.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: xi.len() });
    }
    if xi.iter().map(|v| v.abs()).sum::<f64>() >= 1.0 {
        return Err(Error::OutOfDomain(format!("|xi|_1 >= 1 for xi = {xi:?}")));
    }
    let objective = |t: &TiltParams| t.lambda - t.theta.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
    let mut tp = lambda_c(q, steps, &vec![0.0; d])?;
    for it in 0..200 {
        let g = tp.gradient();
        let resid: Vec<f64> = g.iter().zip(xi).map(|(a, b)| a - b).collect();
        if resid.iter().all(|r| r.abs() < 1e-13) {
            return Ok(CramerRate { xi: xi.to_vec(), rate: -objective(&tp), theta: tp.theta.clone(), iterations: it });
        }
        let step = solve_sym(&tp.hessian(), &resid)
            .ok_or_else(|| Error::OutOfDomain(format!("degenerate tilt while solving for xi = {xi:?}")))?;
        let f0 = objective(&tp);
        let mut s = 1.0;
        loop {
            let cand: Vec<f64> = tp.theta.iter().zip(&step).map(|(a, b)| a - s * b).collect();
            let next = lambda_c(q, steps, &cand)?;
            if objective(&next) <= f0 + 1e-15 * f0.abs().max(1.0) {
                tp = next;
                break;
            }
            s *= 0.5;
            if s < 1e-12 {
                return Err(Error::OutOfDomain(format!("no progress solving for xi = {xi:?}")));
            }
        }
    }
    Err(Error::OutOfDomain(format!("xi = {xi:?} not reached")))
}

/// Dense cube [-r, r]^d of values, indexed relative to its centre.
#[derive(Debug, Clone, Serialize)]
struct Cube {
    dim: usize,
    radius: usize,
    values: Vec<f64>,
}

impl Cube {
    fn new(dim: usize, radius: usize, fill: f64) -> Self {
        Cube { dim, radius, values: vec![fill; (2 * radius + 1).pow(dim as u32)] }
    }
    fn side(&self) -> usize {
        2 * self.radius + 1
    }
    fn index(&self, rel: &[i64]) -> Option<usize> {
        let (r, s) = (self.radius as i64, self.side());
        let mut idx = 0usize;
        for &c in rel.iter().rev() {
            if c.abs() > r {
                return None;
            }
            idx = idx * s + (c + r) as usize;
        }
        Some(idx)
    }
    fn coords(&self, mut idx: usize, out: &mut [i64]) {
        let (r, s) = (self.radius as i64, self.side());
        for c in out.iter_mut() {
            *c = (idx % s) as i64 - r;
            idx /= s;
        }
    }
    /// Index shift for a displacement (valid when both ends are inside).
    fn offset(&self, z: &[i64]) -> isize {
        let s = self.side() as isize;
        z.iter().rev().fold(0isize, |acc, c| acc * s + *c as isize)
    }
    fn l1_norms(&self) -> Vec<u32> {
        let mut buf = vec![0i64; self.dim];
        (0..self.values.len())
            .map(|i| {
                self.coords(i, &mut buf);
                buf.iter().map(|c| c.unsigned_abs() as u32).sum()
            })
            .collect()
    }
}

fn cone_cells(dim: usize, depth: usize) -> usize {
    (0..=depth).map(|j| (2 * j + 1).saturating_pow(dim as u32)).fold(0usize, usize::saturating_add)
}

fn check_cone_size(dim: usize, depth: usize) -> Result<()> {
    if dim >= 3 && depth > MAX_CONE_DEPTH_3D {
        return Err(Error::SizeLimit(format!("cone depth {depth} exceeds {MAX_CONE_DEPTH_3D} in dimension {dim}")));
    }
    if cone_cells(dim, depth) > MAX_CONE_CELLS {
        return Err(Error::SizeLimit(format!("cone of depth {depth} in dimension {dim} is too large")));
    }
    Ok(())
}

/// u_N on the points reachable from an apex: layer j holds times
/// apex_time + j and sites with |x - apex|_1 <= j; the last layer is 1.
#[derive(Debug, Clone, Serialize)]
pub struct ConeTable {
    pub theta: Vec<f64>,
    pub lambda: f64,
    pub depth: usize,
    pub apex_time: i64,
    pub apex: Vec<i64>,
    layers: Vec<Cube>,
}

fn address(time: i64, apex: &[i64], rel: &[i64], out: &mut [i64]) {
    out[0] = time;
    for i in 0..rel.len() {
        out[i + 1] = apex[i] + rel[i];
    }
}

pub fn cone_u(env: &Environment, theta: &[f64], depth: usize, apex_time: i64, apex: &[i64]) -> Result<ConeTable> {
    require_space_time(env)?;
    let d = env.dimension();
    if apex.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: apex.len() });
    }
    check_cone_size(d, depth)?;
    let tp = lambda_c(&env.spec().mean_kernel()?, env.steps(), theta)?;
    let w = tp.weights();
    let steps = env.steps().steps();
    let mut layers = vec![Cube::new(d, depth, f64::NAN)];
    {
        let top = &mut layers[0];
        let norms = top.l1_norms();
        for (v, n) in top.values.iter_mut().zip(norms) {
            if n as usize <= depth {
                *v = 1.0;
            }
        }
    }
    let mut rel = vec![0i64; d];
    let mut addr = vec![0i64; d + 1];
    for j in (0..depth).rev() {
        let next = layers.last().unwrap();
        let mut cur = Cube::new(d, j, f64::NAN);
        let offs: Vec<isize> = steps.iter().map(|z| next.offset(z)).collect();
        let norms = cur.l1_norms();
        for idx in 0..cur.values.len() {
            if norms[idx] as usize > j {
                continue;
            }
            cur.coords(idx, &mut rel);
            address(apex_time + j as i64, apex, &rel, &mut addr);
            let p = env.profile(&addr);
            let base = next.index(&rel).unwrap() as isize;
            let mut s = 0.0;
            for k in 0..steps.len() {
                if p[k] > 0.0 {
                    s += p[k] * w[k] * next.values[(base + offs[k]) as usize];
                }
            }
            cur.values[idx] = s;
        }
        layers.push(cur);
    }
    layers.reverse();
    Ok(ConeTable { theta: theta.to_vec(), lambda: tp.lambda, depth, apex_time, apex: apex.to_vec(), layers })
}

impl ConeTable {
    /// u at absolute (time, x), when inside the cone.
    pub fn value(&self, time: i64, x: &[i64]) -> Option<f64> {
        let j = time - self.apex_time;
        if j < 0 || j as usize > self.depth || x.len() != self.apex.len() {
            return None;
        }
        let rel: Vec<i64> = x.iter().zip(&self.apex).map(|(a, b)| a - b).collect();
        if rel.iter().map(|c| c.abs()).sum::<i64>() > j {
            return None;
        }
        let layer = &self.layers[j as usize];
        layer.index(&rel).map(|i| layer.values[i])
    }

    pub fn root(&self) -> f64 {
        self.layers[0].values[0]
    }

    pub fn min_value(&self) -> f64 {
        self.layers.iter().flat_map(|l| l.values.iter()).filter(|v| !v.is_nan()).fold(f64::INFINITY, |m, v| m.min(*v))
    }

    /// Number of nodes inside the cone.
    pub fn nodes(&self) -> usize {
        self.layers.iter().map(|l| l.values.iter().filter(|v| !v.is_nan()).count()).sum()
    }

    /// Doob transform at (time, x): pi(z) e^{<theta,z> - lambda} u(time+1, x+z) / u(time, x).
    pub fn doob_probs(&self, env: &Environment, time: i64, x: &[i64]) -> Option<Vec<f64>> {
        let here = self.value(time, x)?;
        let mut addr = vec![time];
        addr.extend_from_slice(x);
        let p = env.profile(&addr);
        let mut out = Vec::with_capacity(p.len());
        for (k, z) in env.steps().steps().iter().enumerate() {
            let y: Vec<i64> = x.iter().zip(z).map(|(a, b)| a + b).collect();
            let w = (dot_i(&self.theta, z) - self.lambda).exp();
            out.push(p[k] * w * self.value(time + 1, &y)? / here);
        }
        Some(out)
    }

    /// Largest relative defect of the one-step recursion over interior nodes.
    pub fn recursion_residual(&self, env: &Environment) -> f64 {
        let d = self.apex.len();
        let mut worst = 0.0f64;
        let mut rel = vec![0i64; d];
        for j in 0..self.depth {
            let layer = &self.layers[j];
            for idx in 0..layer.values.len() {
                let u = layer.values[idx];
                if u.is_nan() {
                    continue;
                }
                layer.coords(idx, &mut rel);
                let x: Vec<i64> = rel.iter().zip(&self.apex).map(|(a, b)| a + b).collect();
                let s: f64 = self.doob_probs(env, self.apex_time + j as i64, &x).unwrap().iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DoobKernel {
    pub time: i64,
    pub x: Vec<i64>,
    pub depth: usize,
    pub probs: Vec<f64>,
    pub row_sum_error: f64,
    /// max_z |kernel at depth N - kernel at depth 2N|; `None` if the deeper cone is too large.
    pub stability: Option<f64>,
}

pub fn doob_kernel(env: &Environment, theta: &[f64], depth: usize, time: i64, x: &[i64]) -> Result<DoobKernel> {
    if depth == 0 {
        return Err(Error::InvalidSpec("depth must be at least 1".into()));
    }
    let cone = cone_u(env, theta, depth, time, x)?;
    let probs = cone.doob_probs(env, time, x).expect("apex is inside its cone");
    let stability = match cone_u(env, theta, 2 * depth, time, x) {
        Ok(deep) => {
            let q = deep.doob_probs(env, time, x).expect("apex is inside its cone");
            Some(probs.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        }
        Err(Error::SizeLimit(_)) => None,
        Err(e) => return Err(e),
    };
    let row_sum_error = (probs.iter().sum::<f64>() - 1.0).abs();
    Ok(DoobKernel { time, x: x.to_vec(), depth, probs, row_sum_error, stability })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuenchedLmgf {
    pub n: usize,
    /// (1/n) log E^omega[e^{<theta, X_n>}].
    pub value: f64,
    pub lambda_c: f64,
    pub deviation: f64,
}

pub fn quenched_lmgf_st(env: &Environment, theta: &[f64], n: usize) -> Result<QuenchedLmgf> {
    if n == 0 {
        return Err(Error::InvalidSpec("n must be positive".into()));
    }
    let cone = cone_u(env, theta, n, 0, &vec![0; env.dimension()])?;
    let value = cone.lambda + cone.root().ln() / n as f64;
    Ok(QuenchedLmgf { n, value, lambda_c: cone.lambda, deviation: value - cone.lambda })
}

/// Step kernels of the difference walk X - Y for two tilted walks.
struct PairWeights {
    /// (displacement, weight) away from the diagonal: q^theta(z) q^theta(z').
    off: Vec<(Vec<i64>, f64)>,
    /// On the diagonal: E[pi(z) pi(z')] e^{<theta, z + z'> - 2 lambda}.
    diag: Vec<(Vec<i64>, f64)>,
    v_bar: f64,
}

fn pair_weights(spec: &EnvironmentSpec, theta: &[f64]) -> Result<(TiltParams, PairWeights)> {
    if !spec.is_space_time() {
        return Err(Error::Unsupported("spec is not space-time".into()));
    }
    spec.validate()?;
    let steps = spec.step_set()?;
    require_nearest_neighbor(&steps)?;
    let q = spec.mean_kernel()?;
    let m = spec.pair_moments()?;
    let tp = lambda_c(&q, &steps, theta)?;
    let w = tp.weights();
    let zs = steps.steps();
    let mut off: Vec<(Vec<i64>, f64)> = Vec::new();
    let mut diag: Vec<(Vec<i64>, f64)> = Vec::new();
    let mut v_bar = f64::NEG_INFINITY;
    let add = |list: &mut Vec<(Vec<i64>, f64)>, dz: Vec<i64>, v: f64| {
        if v == 0.0 {
            return;
        }
        match list.iter_mut().find(|(z, _)| *z == dz) {
            Some(e) => e.1 += v,
            None => list.push((dz, v)),
        }
    };
    for a in 0..zs.len() {
        for b in 0..zs.len() {
            let dz: Vec<i64> = zs[a].iter().zip(&zs[b]).map(|(x, y)| x - y).collect();
            add(&mut off, dz.clone(), tp.q_theta[a] * tp.q_theta[b]);
            add(&mut diag, dz, m[a][b] * w[a] * w[b]);
            if q[a] > 0.0 && q[b] > 0.0 {
                v_bar = v_bar.max((m[a][b] / (q[a] * q[b])).ln());
            }
        }
    }
    Ok((tp, PairWeights { off, diag, v_bar }))
}

/// G_0, ..., G_N by the exact pair-walk expansion.
pub fn g_exact_sequence(spec: &EnvironmentSpec, theta: &[f64], n: usize) -> Result<Vec<f64>> {
    let (_, pw) = pair_weights(spec, theta)?;
    let d = spec.dimension;
    let radius = 2 * n + 2;
    if d > 3 || (4 * n + 1).checked_pow(d as u32).map_or(true, |c| c > MAX_PAIR_CELLS) {
        return Err(Error::SizeLimit(format!("exact pair expansion with N = {n} in dimension {d}")));
    }
    let mut cur = Cube::new(d, radius, 0.0);
    let origin = cur.index(&vec![0; d]).unwrap();
    cur.values[origin] = 1.0;
    let off: Vec<(isize, f64)> = pw.off.iter().map(|(z, w)| (cur.offset(z), *w)).collect();
    let diag: Vec<(isize, f64)> = pw.diag.iter().map(|(z, w)| (cur.offset(z), *w)).collect();
    let mut out = vec![1.0];
    for _ in 0..n {
        let mut next = vec![0.0; cur.values.len()];
        for (idx, &m) in cur.values.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let ws = if idx == origin { &diag } else { &off };
            for (o, w) in ws {
                next[(idx as isize + o) as usize] += m * w;
            }
        }
        cur.values = next;
        out.push(cur.values.iter().sum());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GMethod {
    ExactDp,
    MonteCarlo { replicates: usize, seed: u64 },
}

/// G_N(theta) = E[u_N(0,0)^2].
pub fn g_norm(spec: &EnvironmentSpec, theta: &[f64], n: usize, method: GMethod) -> Result<Estimate> {
    match method {
        GMethod::ExactDp => Ok(Estimate::exact(g_exact_sequence(spec, theta, n)?[n])),
        GMethod::MonteCarlo { replicates, seed } => {
            if replicates < 2 {
                return Err(Error::InvalidSpec("need at least two replicates".into()));
            }
            let d = spec.dimension;
            let vals: Result<Vec<f64>> = (0..replicates as u64)
                .into_par_iter()
                .map(|i| {
                    let env = sample_environment(spec, child_seed(seed, i))?;
                    let u = cone_u(&env, theta, n, 0, &vec![0; d])?.root();
                    Ok(u * u)
                })
                .collect();
            let (m, se) = mean_stderr(&vals?);
            Ok(Estimate::normal(m, se))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeetingKernel {
    pub theta: Vec<f64>,
    /// B_k for k = 0..=k_max.
    pub b: Vec<f64>,
    /// C_N for N = 1..=n_max (entry N - 1).
    pub c: Vec<f64>,
    /// Sum of the diagonal weights; equals C_1 = G_1.
    pub diagonal_mass: f64,
    pub v_bar: f64,
    pub b_partial: f64,
    /// Upper bound on sum_{k > k_max} B_k.
    pub tail_bound: f64,
    /// Upper bound on B(theta); exact when `recurrent`.
    pub b_total: f64,
    /// The difference walk is recurrent (d <= 2): every pair meets again.
    pub recurrent: bool,
    /// Mass that left the truncated lattice without being certified irrelevant.
    pub leaked: f64,
    /// Return probabilities P(X_k = Y_k) computed exactly for k <= this.
    pub exact_returns_to: usize,
}

/// Return probabilities p_k = P(D_k = 0), k = 0..=kk, by an exact trapezoid
/// rule on the characteristic function (the integrand is a trig polynomial).
fn return_probabilities(off: &[(Vec<i64>, f64)], d: usize, kk: usize) -> Vec<f64> {
    let m = 2 * kk + 1;
    let total = m.pow(d as u32);
    let step = 2.0 * std::f64::consts::PI / m as f64;
    let sums = (0..total)
        .into_par_iter()
        .fold(
            || vec![0.0; kk + 1],
            |mut acc, idx| {
                let mut t = vec![0.0; d];
                let mut r = idx;
                for ti in t.iter_mut() {
                    *ti = (r % m) as f64 * step;
                    r /= m;
                }
                let a: f64 = off.iter().map(|(z, w)| w * dot_i(&t, z).cos()).sum::<f64>().clamp(0.0, 1.0);
                let mut pw = 1.0;
                for v in acc.iter_mut() {
                    *v += pw;
                    pw *= a;
                }
                acc
            },
        )
        .reduce(|| vec![0.0; kk + 1], |mut a, b| {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            a
        });
    sums.into_iter().map(|s| s / total as f64).collect()
}

pub fn meeting_kernel(spec: &EnvironmentSpec, theta: &[f64], k_max: usize, n_max: usize) -> Result<MeetingKernel> {
    let (_, pw) = pair_weights(spec, theta)?;
    let d = spec.dimension;
    if n_max < 1 || n_max > k_max + 2 {
        return Err(Error::InvalidSpec(format!("need 1 <= n_max <= k_max + 2, got {n_max} and {k_max}")));
    }
    let trunc = k_max + 2;
    let radius = trunc + 2;
    if (2 * radius + 1).checked_pow(d as u32).map_or(true, |c| c > MAX_CONE_CELLS) {
        return Err(Error::SizeLimit(format!("meeting kernel with k_max = {k_max} in dimension {d}")));
    }
    let mut cur = Cube::new(d, radius, 0.0);
    let norms = cur.l1_norms();
    let origin = cur.index(&vec![0; d]).unwrap();
    let diagonal_mass: f64 = pw.diag.iter().map(|(_, w)| w).sum();
    for (z, w) in &pw.diag {
        let i = cur.index(z).unwrap();
        cur.values[i] += w;
    }
    let off: Vec<(isize, f64)> = pw.off.iter().map(|(z, w)| (cur.offset(z), *w)).collect();
    let mut b = Vec::with_capacity(k_max + 1);
    let mut leaked = 0.0;
    for k in 0..=k_max {
        b.push(cur.values[origin]);
        cur.values[origin] = 0.0;
        if k == k_max {
            break;
        }
        let keep = 2 * (k_max - k - 1) as u32;
        let mut next = vec![0.0; cur.values.len()];
        for (idx, &m) in cur.values.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (o, w) in &off {
                next[(idx as isize + o) as usize] += m * w;
            }
        }
        // mass that cannot come back to 0 by step k_max is dropped; anything
        // beyond the truncation radius that could still return is a leak
        for (v, n) in next.iter_mut().zip(&norms) {
            if *n > keep {
                if *n as usize > trunc {
                    leaked += *v;
                }
                *v = 0.0;
            }
        }
        cur.values = next;
    }
    if leaked > 1e-12 {
        return Err(Error::TruncationLeak { leaked });
    }
    let b_partial: f64 = b.iter().sum();
    let c = (1..=n_max)
        .map(|n| diagonal_mass - b.iter().take(n.saturating_sub(1)).sum::<f64>())
        .collect();
    let recurrent = d <= 2;
    let (tail_bound, exact_returns_to) = if recurrent {
        (diagonal_mass - b_partial, 0)
    } else {
        let kk = exact_return_horizon(d).max(k_max);
        let p = return_probabilities(&pw.off, d, kk);
        let exact: f64 = p[k_max + 1..].iter().sum();
        // local limit constant for a walk on the even sublattice
        let cov = {
            let mut c = nalgebra::DMatrix::<f64>::zeros(d, d);
            for (z, w) in &pw.off {
                for i in 0..d {
                    for j in 0..d {
                        c[(i, j)] += w * (z[i] * z[j]) as f64;
                    }
                }
            }
            c
        };
        let half = d as f64 / 2.0;
        let c_inf = 2.0 * (2.0 * std::f64::consts::PI).powf(-half) / cov.determinant().sqrt();
        let c_obs = (kk as f64).powf(half) * p[kk];
        let c = c_inf.max(c_obs);
        let beyond = c * (kk as f64).powf(1.0 - half) / (half - 1.0);
        (diagonal_mass * (exact + beyond), kk)
    };
    let b_total = if recurrent { diagonal_mass } else { b_partial + tail_bound };
    Ok(MeetingKernel {
        theta: theta.to_vec(),
        b,
        c,
        diagonal_mass,
        v_bar: pw.v_bar,
        b_partial,
        tail_bound,
        b_total,
        recurrent,
        leaked,
        exact_returns_to,
    })
}

/// Largest k for which exact return probabilities stay affordable.
fn exact_return_horizon(d: usize) -> usize {
    let mut kk = 100usize;
    while kk > 8 && ((2 * kk + 1) as f64).powi(d as i32) * kk as f64 > 1e9 {
        kk -= 1;
    }
    kk
}

impl MeetingKernel {
    /// |G_N - sum_{k <= N-2} B_k G_{N-k-1} - C_N| for N = 1..=min(n_max, g.len()-1).
    pub fn recursion_residuals(&self, g: &[f64]) -> Vec<f64> {
        (1..=self.c.len().min(g.len().saturating_sub(1)))
            .map(|n| {
                let s: f64 = (0..n.saturating_sub(1)).map(|k| self.b[k] * g[n - k - 1]).sum();
                (g[n] - s - self.c[n - 1]).abs()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GBound {
    Bounded { value: f64 },
    Unbounded,
}

/// sup_N G_N <= C / (1 - B) when B < 1.
pub fn sup_g_bound(mk: &MeetingKernel) -> GBound {
    if mk.recurrent || mk.b_total >= 1.0 {
        GBound::Unbounded
    } else {
        GBound::Bounded { value: mk.diagonal_mass / (1.0 - mk.b_total) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub replicates: usize,
    pub seed: u64,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions { replicates: 40_000, seed: 0x5EED }
    }
}

/// E[e^{<theta, X_L> - L lambda} f(T_{N, X_N} omega, Z_{N+1..N+K})] with
/// L = N + M + K + 1 under the averaged measure.
#[allow(clippy::too_many_arguments)]
pub fn tilted_expectation_st<F>(
    spec: &EnvironmentSpec,
    theta: &[f64],
    f: F,
    n_before: usize,
    m_after: usize,
    k: usize,
    opts: &McOptions,
) -> Result<Estimate>
where
    F: Fn(&Environment, &[u16]) -> f64 + Sync,
{
    if !spec.is_space_time() {
        return Err(Error::Unsupported("spec is not space-time".into()));
    }
    if opts.replicates < 2 {
        return Err(Error::InvalidSpec("need at least two replicates".into()));
    }
    let tp = lambda_c(&spec.mean_kernel()?, &spec.step_set()?, theta)?;
    let d = spec.dimension;
    let len = n_before + m_after + k + 1;
    let vals: Result<Vec<f64>> = (0..opts.replicates as u64)
        .into_par_iter()
        .map(|i| {
            let env = sample_environment(spec, child_seed(opts.seed, i))?;
            let path = simulate_quenched(&env, &vec![0; d], len, &mut replica_rng(opts.seed, i), None)?;
            let w = (dot_i(theta, path.position(len)) - len as f64 * tp.lambda).exp();
            let mut shift = vec![n_before as i64];
            shift.extend_from_slice(path.position(n_before));
            let shifted = env.shift(&shift)?;
            Ok(w * f(&shifted, &path.step_indices()[n_before..n_before + k]))
        })
        .collect();
    let (m, se) = mean_stderr(&vals?);
    Ok(Estimate::normal(m, se))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionOptions {
    pub target_accepted: usize,
    pub max_proposals: usize,
    pub seed: u64,
}

impl Default for RejectionOptions {
    fn default() -> Self {
        RejectionOptions { target_accepted: 4000, max_proposals: 20_000_000, seed: 0xC0DE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionalSample {
    pub estimate: Estimate,
    pub accepted: usize,
    pub proposals: usize,
    pub acceptance: f64,
}

/// Mean of (1/n) sum_{j<n} f(T_{j, X_j} omega, Z_{j+1..j+K}) over paths with
/// |X_n / n - xi|_inf <= delta. Averaged over fresh environments, or
/// quenched in `env` when given.
#[allow(clippy::too_many_arguments)]
pub fn conditional_empirical_st<F>(
    spec: &EnvironmentSpec,
    env: Option<&Environment>,
    xi: &[f64],
    delta: f64,
    n: usize,
    f: &F,
    k: usize,
    opts: &RejectionOptions,
) -> Result<ConditionalSample>
where
    F: Fn(&Environment, &[u16]) -> f64 + Sync,
{
    let d = spec.dimension;
    if xi.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: xi.len() });
    }
    if n == 0 || n > MAX_CONDITIONING_LENGTH {
        return Err(Error::OutOfRange(format!("n = {n} outside 1..={MAX_CONDITIONING_LENGTH}")));
    }
    if k == 0 {
        return Err(Error::InvalidSpec("k must be at least 1".into()));
    }
    let origin = vec![0i64; d];
    let len = n + k - 1;
    let chunk = 8192usize;
    let mut accepted = Vec::new();
    let mut proposals = 0usize;
    while accepted.len() < opts.target_accepted && proposals < opts.max_proposals {
        let batch: Result<Vec<Option<f64>>> = (proposals..proposals + chunk)
            .into_par_iter()
            .map(|i| {
                let owned;
                let e = match env {
                    Some(e) => e,
                    None => {
                        owned = sample_environment(spec, child_seed(opts.seed, i as u64))?;
                        &owned
                    }
                };
                let path = simulate_quenched(e, &origin, len, &mut replica_rng(opts.seed, i as u64), None)?;
                let ok = (0..d).all(|c| (path.position(n)[c] as f64 - n as f64 * xi[c]).abs() <= n as f64 * delta + 1e-9);
                if !ok {
                    return Ok(None);
                }
                let st = path.step_indices();
                let mut s = 0.0;
                for j in 0..n {
                    let mut shift = vec![j as i64];
                    shift.extend_from_slice(path.position(j));
                    s += f(&e.shift(&shift)?, &st[j..j + k]);
                }
                Ok(Some(s / n as f64))
            })
            .collect();
        // proposals are counted up to the draw that completes the target
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
    let (m, se) = mean_stderr(&accepted);
    Ok(ConditionalSample { estimate: Estimate::normal(m, se), accepted: accepted.len(), proposals, acceptance })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConditioningMode {
    Averaged,
    /// Condition P^omega for this many fixed environments.
    Quenched { environments: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditioningRow {
    /// Environment seed in quenched mode.
    pub environment: Option<u64>,
    pub conditional: ConditionalSample,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StConditioningReport {
    pub xi: Vec<f64>,
    pub theta: Vec<f64>,
    pub delta: f64,
    pub n: usize,
    pub tilted: Estimate,
    pub rows: Vec<ConditioningRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltOptions {
    pub n_before: usize,
    pub m_after: usize,
    pub mc: McOptions,
}

impl Default for TiltOptions {
    fn default() -> Self {
        TiltOptions { n_before: 2, m_after: 2, mc: McOptions::default() }
    }
}

/// Conditional empirical means against the tilted expectation at the theta solving grad Lambda_c = xi.
#[allow(clippy::too_many_arguments)]
pub fn conditioned_empirical_st<F>(
    spec: &EnvironmentSpec,
    xi: &[f64],
    delta: f64,
    n: usize,
    f: F,
    k: usize,
    mode: ConditioningMode,
    rejection: &RejectionOptions,
    tilt: &TiltOptions,
) -> Result<StConditioningReport>
where
    F: Fn(&Environment, &[u16]) -> f64 + Sync,
{
    let rate = rate_c(&spec.mean_kernel()?, &spec.step_set()?, xi)?;
    let tilted = tilted_expectation_st(spec, &rate.theta, &f, tilt.n_before, tilt.m_after, k, &tilt.mc)?;
    let mut rows = Vec::new();
    match mode {
        ConditioningMode::Averaged => {
            let c = conditional_empirical_st(spec, None, xi, delta, n, &f, k, rejection)?;
            rows.push(ConditioningRow { environment: None, gap: (c.estimate.value - tilted.value).abs(), conditional: c });
        }
        ConditioningMode::Quenched { environments } => {
            for e in 0..environments as u64 {
                let seed = child_seed(rejection.seed ^ 0x9E37_79B9, e);
                let env = sample_environment(spec, seed)?;
                let c = conditional_empirical_st(spec, Some(&env), xi, delta, n, &f, k, rejection)?;
                rows.push(ConditioningRow {
                    environment: Some(seed),
                    gap: (c.estimate.value - tilted.value).abs(),
                    conditional: c,
                });
            }
        }
    }
    Ok(StConditioningReport { xi: xi.to_vec(), theta: rate.theta, delta, n, tilted, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationarityReport {
    pub depth: usize,
    pub at_depth: Estimate,
    pub at_next_depth: Estimate,
    /// Paired difference (depth + 1) - depth.
    pub residual: Estimate,
    pub replicates: usize,
}

/// Integral of h against the tilted stationary environment measure computed
/// through N and N + 1 Doob steps on the same environments.
pub fn stationarity_check<H>(
    spec: &EnvironmentSpec,
    theta: &[f64],
    depth: usize,
    u_depth: usize,
    h: H,
    opts: &McOptions,
) -> Result<StationarityReport>
where
    H: Fn(&Environment) -> f64 + Sync,
{
    if !spec.is_space_time() {
        return Err(Error::Unsupported("spec is not space-time".into()));
    }
    if opts.replicates < 2 {
        return Err(Error::InvalidSpec("need at least two replicates".into()));
    }
    let d = spec.dimension;
    let total = depth + 1 + u_depth;
    check_cone_size(d, total)?;
    let pairs: Result<Vec<(f64, f64)>> = (0..opts.replicates as u64)
        .into_par_iter()
        .map(|i| {
            let env = sample_environment(spec, child_seed(opts.seed, i))?;
            let cone = cone_u(&env, theta, total, 0, &vec![0; d])?;
            let w = forward_weights(&env, &cone, depth + 1);
            let at = |j: usize| -> Result<f64> {
                let layer = &w[j];
                let mut rel = vec![0i64; d];
                let mut s = 0.0;
                for (idx, &m) in layer.values.iter().enumerate() {
                    if m == 0.0 || m.is_nan() {
                        continue;
                    }
                    layer.coords(idx, &mut rel);
                    let mut shift = vec![j as i64];
                    shift.extend_from_slice(&rel);
                    s += m * cone.value(j as i64, &rel).unwrap() * h(&env.shift(&shift)?);
                }
                Ok(s)
            };
            Ok((at(depth)?, at(depth + 1)?))
        })
        .collect();
    let pairs = pairs?;
    let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let diff: Vec<f64> = pairs.iter().map(|p| p.1 - p.0).collect();
    let est = |v: &[f64]| {
        let (m, se) = mean_stderr(v);
        Estimate::normal(m, se)
    };
    Ok(StationarityReport {
        depth,
        at_depth: est(&a),
        at_next_depth: est(&b),
        residual: est(&diff),
        replicates: opts.replicates,
    })
}

/// E^omega[e^{<theta, X_j> - j lambda}; X_j = x] for j = 0..=steps.
fn forward_weights(env: &Environment, cone: &ConeTable, steps: usize) -> Vec<Cube> {
    let d = env.dimension();
    let w = lambda_c(&env.spec().mean_kernel().unwrap(), env.steps(), &cone.theta).unwrap().weights();
    let zs = env.steps().steps();
    let mut out = vec![Cube::new(d, 0, 1.0)];
    let mut rel = vec![0i64; d];
    let mut addr = vec![0i64; d + 1];
    for j in 0..steps {
        let cur = &out[j];
        let mut next = Cube::new(d, j + 1, 0.0);
        let offs: Vec<isize> = zs.iter().map(|z| next.offset(z)).collect();
        for idx in 0..cur.values.len() {
            let m = cur.values[idx];
            if m == 0.0 {
                continue;
            }
            cur.coords(idx, &mut rel);
            address(j as i64, &vec![0; d], &rel, &mut addr);
            let p = env.profile(&addr);
            let base = next.index(&rel).unwrap() as isize;
            for k in 0..zs.len() {
                next.values[(base + offs[k]) as usize] += m * p[k] * w[k];
            }
        }
        out.push(next);
    }
    out
}
