//! Quenched and averaged path simulation, passage times and pair empirical measures.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::env::{sample_environment, Environment, EnvironmentSpec, StepSet};
use crate::error::{Error, Result};

/// Replaces the environment's own profile when simulating.
pub trait StepKernel: Sync {
    /// Index of the step taken from `position` at `time` given a uniform `u`.
    fn sample_step(&self, env: &Environment, time: i64, position: &[i64], u: f64) -> Result<usize>;
}

/// Inverse-CDF draw from a probability vector.
#[inline]
pub fn pick(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last step with positive mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

#[derive(Debug, Clone)]
pub struct PathSample {
    dim: usize,
    start_time: i64,
    positions: Vec<i64>,
    steps: Vec<u16>,
    step_set: Arc<StepSet>,
}

impl PathSample {
    /// Build a 1D nearest-neighbour path from its positions.
    pub fn from_positions_1d(positions: &[i64]) -> Result<Self> {
        let step_set = Arc::new(StepSet::nearest_neighbor(1));
        let mut steps = Vec::with_capacity(positions.len().saturating_sub(1));
        for w in positions.windows(2) {
            match w[1] - w[0] {
                1 => steps.push(0),
                -1 => steps.push(1),
                d => return Err(Error::InvalidSpec(format!("increment {d} is not a nearest-neighbour step"))),
            }
        }
        if positions.is_empty() {
            return Err(Error::InvalidSpec("empty path".into()));
        }
        Ok(PathSample { dim: 1, start_time: 0, positions: positions.to_vec(), steps, step_set })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
    pub fn dimension(&self) -> usize {
        self.dim
    }
    pub fn start_time(&self) -> i64 {
        self.start_time
    }
    pub fn step_set(&self) -> &StepSet {
        &self.step_set
    }
    /// X_k.
    pub fn position(&self, k: usize) -> &[i64] {
        &self.positions[k * self.dim..(k + 1) * self.dim]
    }
    /// Z_k = X_k - X_{k-1} for k >= 1.
    pub fn step(&self, k: usize) -> &[i64] {
        self.step_set.step(self.steps[k - 1] as usize)
    }
    /// Index of Z_k in the step set, k >= 1.
    pub fn step_index(&self, k: usize) -> usize {
        self.steps[k - 1] as usize
    }
    pub fn step_indices(&self) -> &[u16] {
        &self.steps
    }
    /// First coordinate of X_k.
    pub fn x(&self, k: usize) -> i64 {
        self.positions[k * self.dim]
    }

    /// CSV with columns k, x1..xd, z1..zd (z empty at k = 0).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let xs: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        let zs: Vec<String> = (1..=self.dim).map(|i| format!("z{i}")).collect();
        writeln!(w, "k,{},{}", xs.join(","), zs.join(","))?;
        for k in 0..=self.len() {
            let x: Vec<String> = self.position(k).iter().map(|c| c.to_string()).collect();
            let z: Vec<String> = if k == 0 {
                vec![String::new(); self.dim]
            } else {
                self.step(k).iter().map(|c| c.to_string()).collect()
            };
            writeln!(w, "{k},{},{}", x.join(","), z.join(","))?;
        }
        Ok(())
    }
}

fn simulate_inner<R: Rng + ?Sized>(
    env: &Environment,
    start_time: i64,
    start: &[i64],
    n: usize,
    rng: &mut R,
    kernel: Option<&dyn StepKernel>,
) -> Result<PathSample> {
    let d = env.dimension();
    if start.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: start.len() });
    }
    let step_set = env.steps_shared();
    let st = env.is_space_time();
    let mut positions = Vec::with_capacity((n + 1) * d);
    positions.extend_from_slice(start);
    let mut steps = Vec::with_capacity(n);
    let mut cur = start.to_vec();
    let mut addr = vec![0i64; env.address_len()];
    for k in 0..n {
        let time = start_time + k as i64;
        let u: f64 = rng.random();
        let idx = match kernel {
            Some(kern) => kern.sample_step(env, time, &cur, u)?,
            None => {
                if st {
                    addr[0] = time;
                    addr[1..].copy_from_slice(&cur);
                } else {
                    addr.copy_from_slice(&cur);
                }
                pick(&env.profile(&addr), u)
            }
        };
        for (c, z) in cur.iter_mut().zip(step_set.step(idx)) {
            *c += z;
        }
        positions.extend_from_slice(&cur);
        steps.push(idx as u16);
    }
    Ok(PathSample { dim: d, start_time, positions, steps, step_set })
}

/// Path of length n under P^omega (or under `kernel` when given), started at time 0.
pub fn simulate_quenched<R: Rng + ?Sized>(
    env: &Environment,
    start: &[i64],
    n: usize,
    rng: &mut R,
    kernel: Option<&dyn StepKernel>,
) -> Result<PathSample> {
    simulate_inner(env, 0, start, n, rng, kernel)
}

/// Space-time path started at (start_time, start).
pub fn simulate_from_time<R: Rng + ?Sized>(
    env: &Environment,
    start_time: i64,
    start: &[i64],
    n: usize,
    rng: &mut R,
) -> Result<PathSample> {
    simulate_inner(env, start_time, start, n, rng, None)
}

/// Fresh environment (from `env_seed`) and a quenched path in it.
pub fn simulate_averaged<R: Rng + ?Sized>(
    spec: &EnvironmentSpec,
    env_seed: u64,
    start: &[i64],
    n: usize,
    rng: &mut R,
) -> Result<(Environment, PathSample)> {
    let env = sample_environment(spec, env_seed)?;
    let path = simulate_quenched(&env, start, n, rng, None)?;
    Ok((env, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// First k with X_k >= y.
    AtLeast,
    /// First k with X_k <= y.
    AtMost,
}

/// First passage index, or `None` when the level is not reached within the path.
pub fn passage_time(path: &PathSample, y: i64, side: Side) -> Result<Option<usize>> {
    if path.dimension() != 1 {
        return Err(Error::Unsupported("passage times are defined for 1D paths".into()));
    }
    Ok((0..=path.len()).find(|&k| match side {
        Side::AtLeast => path.x(k) >= y,
        Side::AtMost => path.x(k) <= y,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairEntry {
    pub site: Vec<i64>,
    pub step: Vec<i64>,
    pub count: u64,
    pub weight: f64,
}

/// nu_{n,X}: weight 1/n on each (environment seen at X_k, Z_{k+1}).
#[derive(Debug, Clone)]
pub struct PairEmpiricalMeasure {
    env: Environment,
    n: usize,
    entries: Vec<PairEntry>,
    step_set: Arc<StepSet>,
    step_counts: Vec<u64>,
}

pub fn pair_empirical_measure(env: &Environment, path: &PathSample) -> Result<PairEmpiricalMeasure> {
    let n = path.len();
    if n == 0 {
        return Err(Error::InvalidSpec("pair empirical measure needs a path of length >= 1".into()));
    }
    let st = env.is_space_time();
    let mut counts: BTreeMap<(Vec<i64>, usize), u64> = BTreeMap::new();
    let mut step_counts = vec![0u64; path.step_set().len()];
    for k in 0..n {
        let mut site = Vec::with_capacity(env.address_len());
        if st {
            site.push(path.start_time() + k as i64);
        }
        site.extend_from_slice(path.position(k));
        let s = path.step_index(k + 1);
        *counts.entry((site, s)).or_insert(0) += 1;
        step_counts[s] += 1;
    }
    let step_set = Arc::new(path.step_set().clone());
    let entries = counts
        .into_iter()
        .map(|((site, s), count)| PairEntry {
            site,
            step: step_set.step(s).to_vec(),
            count,
            weight: count as f64 / n as f64,
        })
        .collect();
    Ok(PairEmpiricalMeasure { env: env.clone(), n, entries, step_set, step_counts })
}

impl PairEmpiricalMeasure {
    pub fn entries(&self) -> &[PairEntry] {
        &self.entries
    }
    pub fn len(&self) -> usize {
        self.n
    }
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
    pub fn total_weight(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }

    /// xi_nu = sum of weight * step, computed from integer step counts.
    pub fn mean_step(&self) -> Vec<f64> {
        let d = self.step_set.dimension();
        let mut sum = vec![0i64; d];
        for (i, c) in self.step_counts.iter().enumerate() {
            for (s, z) in sum.iter_mut().zip(self.step_set.step(i)) {
                *s += *c as i64 * z;
            }
        }
        sum.iter().map(|s| *s as f64 / self.n as f64).collect()
    }

    /// Integral of f(T_site env, step).
    pub fn integrate<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(&Environment, &[i64]) -> f64,
    {
        let mut total = 0.0;
        for e in &self.entries {
            let shifted = self.env.shift(&e.site)?;
            total += e.weight * f(&shifted, &e.step);
        }
        Ok(total)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "n": self.n, "entries": self.entries })
    }
}
