//! Periodic environments as finite Markov chains: Perron roots of tilted
//! matrices, the pair-entropy functional and its Doob-transform minimizer.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

/// States i = x mod p; from state i the step z leads to (i + z) mod p.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteEnvChain {
    steps: Vec<i64>,
    rows: Vec<Vec<f64>>,
}

impl FiniteEnvChain {
    pub fn new(steps: Vec<i64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() || steps.is_empty() {
            return Err(Error::InvalidSpec("chain needs states and steps".into()));
        }
        if steps.contains(&0) {
            return Err(Error::InvalidSpec("zero step".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != steps.len() || r.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidSpec(format!("row {i} is malformed")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidSpec(format!("row {i} sums to {s}")));
            }
        }
        let chain = FiniteEnvChain { steps, rows };
        if !chain.irreducible() {
            return Err(Error::InvalidSpec("induced state chain is reducible".into()));
        }
        Ok(chain)
    }

    /// The chain of a periodic (or deterministic) 1D environment.
    pub fn from_env(env: &Environment) -> Result<Self> {
        let p = env
            .period()
            .ok_or_else(|| Error::Unsupported("finite chains need a periodic environment".into()))?;
        if env.dimension() != 1 || env.is_space_time() {
            return Err(Error::Unsupported("finite chains need a static 1D environment".into()));
        }
        let steps = env.steps().steps().iter().map(|z| z[0]).collect();
        let rows = (0..p as i64).map(|j| env.profile(&[j]).into_owned()).collect();
        FiniteEnvChain::new(steps, rows)
    }

    pub fn states(&self) -> usize {
        self.rows.len()
    }
    pub fn steps(&self) -> &[i64] {
        &self.steps
    }
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    #[inline]
    pub fn next(&self, i: usize, k: usize) -> usize {
        (i as i64 + self.steps[k]).rem_euclid(self.states() as i64) as usize
    }

    fn irreducible(&self) -> bool {
        let p = self.states();
        let reach = |forward: bool| {
            let mut seen = vec![false; p];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for j in 0..p {
                    let edge = if forward { self.edge(i, j) } else { self.edge(j, i) };
                    if edge && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.iter().all(|s| *s)
        };
        reach(true) && reach(false)
    }

    fn edge(&self, i: usize, j: usize) -> bool {
        (0..self.steps.len()).any(|k| self.rows[i][k] > 0.0 && self.next(i, k) == j)
    }

    /// M_theta(i, j) = sum over z with i + z = j (mod p) of pi_i(z) e^{theta z}.
    pub fn tilted_matrix(&self, theta: f64) -> DMatrix<f64> {
        self.weighted_matrix(|z| (theta * z as f64).exp())
    }

    fn weighted_matrix(&self, w: impl Fn(i64) -> f64) -> DMatrix<f64> {
        let p = self.states();
        let mut m = DMatrix::zeros(p, p);
        for i in 0..p {
            for (k, &z) in self.steps.iter().enumerate() {
                m[(i, self.next(i, k))] += self.rows[i][k] * w(z);
            }
        }
        m
    }
}

/// Stationary distribution (sum 1) of a stochastic matrix, plus the number
/// of eigenvalues within 1e-9 of 1.
fn stationary(m: &DMatrix<f64>) -> Result<(Vec<f64>, usize)> {
    let p = m.nrows();
    let mut a = m.transpose() - DMatrix::identity(p, p);
    for j in 0..p {
        a[(p - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(p);
    rhs[p - 1] = 1.0;
    let phi = a.lu().solve(&rhs).ok_or_else(|| Error::NonConvergent("singular stationarity system".into()))?;
    let mult = m.complex_eigenvalues().iter().filter(|e| (e.re - 1.0).hypot(e.im) < 1e-9).count();
    Ok((phi.iter().copied().collect(), mult))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinitePairMeasure {
    pub steps: Vec<i64>,
    /// weights[i][k] = mu(i, steps[k]).
    pub weights: Vec<Vec<f64>>,
}

impl FinitePairMeasure {
    pub fn states(&self) -> usize {
        self.weights.len()
    }

    /// (mu)^1(i) = sum_z mu(i, z).
    pub fn first_marginal(&self) -> Vec<f64> {
        self.weights.iter().map(|r| r.iter().sum()).collect()
    }

    /// (mu)^2(j) = sum_z mu(j - z, z).
    pub fn second_marginal(&self) -> Vec<f64> {
        let p = self.states() as i64;
        let mut out = vec![0.0; p as usize];
        for (i, row) in self.weights.iter().enumerate() {
            for (k, w) in row.iter().enumerate() {
                out[(i as i64 + self.steps[k]).rem_euclid(p) as usize] += w;
            }
        }
        out
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().flatten().sum()
    }

    pub fn is_stationary(&self) -> bool {
        let a = self.first_marginal();
        let b = self.second_marginal();
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12)
    }

    /// xi_mu = sum mu(i, z) z.
    pub fn velocity(&self) -> f64 {
        self.weights.iter().map(|r| r.iter().zip(&self.steps).map(|(w, z)| w * *z as f64).sum::<f64>()).sum()
    }

    /// t * self + (1 - t) * other.
    pub fn blend(&self, other: &FinitePairMeasure, t: f64) -> FinitePairMeasure {
        let weights = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| t * x + (1.0 - t) * y).collect())
            .collect();
        FinitePairMeasure { steps: self.steps.clone(), weights }
    }

    /// Untilted pairing (1/p) pi_i(z).
    pub fn untilted(chain: &FiniteEnvChain) -> FinitePairMeasure {
        let p = chain.states() as f64;
        FinitePairMeasure {
            steps: chain.steps.clone(),
            weights: chain.rows.iter().map(|r| r.iter().map(|v| v / p).collect()).collect(),
        }
    }
}

/// Sum mu log(mu / (mu^1 pi)) with 0 log 0 = 0; +inf off the admissible set.
pub fn pair_entropy(chain: &FiniteEnvChain, mu: &FinitePairMeasure) -> f64 {
    if mu.states() != chain.states() || mu.steps != chain.steps || !mu.is_stationary() {
        return f64::INFINITY;
    }
    let m1 = mu.first_marginal();
    let mut total = 0.0;
    for (i, row) in mu.weights.iter().enumerate() {
        for (k, &w) in row.iter().enumerate() {
            let pi = chain.rows[i][k];
            if w > 0.0 {
                if pi == 0.0 {
                    return f64::INFINITY;
                }
                total += w * (w / (m1[i] * pi)).ln();
            } else if pi > 0.0 && m1[i] > 0.0 {
                // the kernel of mu must charge every step pi allows
                return f64::INFINITY;
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Perron {
    pub theta: f64,
    pub lambda: f64,
    pub rho: f64,
    /// Right eigenvector, positive, sum 1.
    pub right: Vec<f64>,
    /// Left eigenvector scaled so that left . right = 1.
    pub left: Vec<f64>,
    pub iterations: usize,
}

const POWER_CAP: usize = 1_000_000;

fn power(m: &DMatrix<f64>, shift: f64) -> Result<(DVector<f64>, usize)> {
    let p = m.nrows();
    let shifted = m + DMatrix::identity(p, p) * shift;
    let mut v = DVector::from_element(p, 1.0 / p as f64);
    let mut est = 0.0f64;
    for it in 1..=POWER_CAP {
        let w = &shifted * &v;
        let s = w.sum();
        let next = w / s;
        let change = (&next - &v).amax();
        let rel = ((s - est) / s).abs();
        v = next;
        est = s;
        if rel < 1e-12 && change < 1e-14 {
            return Ok((v, it));
        }
    }
    Err(Error::NonConvergent("power iteration hit its cap; chain may be reducible".into()))
}

/// Log Perron root of M_theta by shifted power iteration.
pub fn perron_lambda(chain: &FiniteEnvChain, theta: f64) -> Result<Perron> {
    let m = chain.tilted_matrix(theta);
    // the shift removes the periodicity of M (eigenvalues rho * roots of unity)
    let shift = m.row_iter().map(|r| r.sum()).fold(0.0, f64::max);
    let (u, it1) = power(&m, shift)?;
    let (l, it2) = power(&m.transpose(), shift)?;
    // rows of M_0 sum to one, so the root is exactly 1 there
    let rho = if theta == 0.0 { 1.0 } else { (l.transpose() * &m * &u)[(0, 0)] / l.dot(&u) };
    let ldotu = l.dot(&u);
    Ok(Perron {
        theta,
        lambda: rho.ln(),
        rho,
        right: u.iter().copied().collect(),
        left: l.iter().map(|v| v / ldotu).collect(),
        iterations: it1 + it2,
    })
}

/// Lambda'(theta) = l^T M'_theta u / (rho l^T u), the velocity of the tilted chain.
pub fn lambda_derivative(chain: &FiniteEnvChain, perron: &Perron) -> f64 {
    let theta = perron.theta;
    let dm = chain.weighted_matrix(|z| z as f64 * (theta * z as f64).exp());
    let u = DVector::from_vec(perron.right.clone());
    let l = DVector::from_vec(perron.left.clone());
    (l.transpose() * dm * &u)[(0, 0)] / (perron.rho * l.dot(&u))
}

/// (1/n) log E_0[e^{theta X_n}] from the exact law of X_n (forward DP over positions).
pub fn brute_force_lmgf(chain: &FiniteEnvChain, theta: f64, n: usize) -> Result<f64> {
    if n == 0 || n > 20 || chain.states() > 8 {
        return Err(Error::SizeLimit(format!("brute force needs 1 <= n <= 20 and p <= 8 (n = {n}, p = {})", chain.states())));
    }
    let b = chain.steps.iter().map(|z| z.abs()).max().unwrap();
    let span = b * n as i64;
    let width = (2 * span + 1) as usize;
    let p = chain.states() as i64;
    let mut law = vec![0.0; width];
    law[span as usize] = 1.0;
    for _ in 0..n {
        let mut next = vec![0.0; width];
        for (idx, &mass) in law.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let x = idx as i64 - span;
            let row = &chain.rows[x.rem_euclid(p) as usize];
            for (k, &z) in chain.steps.iter().enumerate() {
                next[(idx as i64 + z) as usize] += mass * row[k];
            }
        }
        law = next;
    }
    // log-sum-exp of log P(X_n = x) + theta x
    let terms: Vec<f64> = law
        .iter()
        .enumerate()
        .filter(|(_, m)| **m > 0.0)
        .map(|(i, m)| m.ln() + theta * (i as i64 - span) as f64)
        .collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln();
    Ok(lse / n as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct DoobMinimizer {
    pub xi: f64,
    pub theta: f64,
    pub lambda: f64,
    /// r = -Lambda(theta).
    pub r: f64,
    pub mu: FinitePairMeasure,
    /// pi-hat(i, z) = pi_i(z) e^{theta z} u(j) / (rho u(i)).
    pub kernel: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
    /// F(i, z) = log u(j) - log u(i).
    pub corrector: Vec<Vec<f64>>,
    /// max |mu(i,z) - mu^1(i) pi_i(z) e^{theta z + F + r}|.
    pub ansatz_residual: f64,
    /// max |F(i, z) + F(i + z, -z)| over steps whose reverse is allowed.
    pub loop_residual: f64,
    /// Eigenvalue 1 of pi-hat is simple.
    pub unique_stationary: bool,
}

fn theta_for_velocity(chain: &FiniteEnvChain, xi: f64) -> Result<Perron> {
    let vel = |t: f64| -> Result<(f64, Perron)> {
        let pr = perron_lambda(chain, t)?;
        Ok((lambda_derivative(chain, &pr), pr))
    };
    let used = |k: usize| chain.rows.iter().any(|r| r[k] > 0.0);
    let zs: Vec<f64> = (0..chain.steps.len()).filter(|&k| used(k)).map(|k| chain.steps[k] as f64).collect();
    let zmin = zs.iter().copied().fold(f64::INFINITY, f64::min);
    let zmax = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(xi > zmin && xi < zmax) {
        return Err(Error::OutOfRange(format!("xi = {xi} outside ({zmin}, {zmax})")));
    }
    let (mut lo, mut hi) = (-1.0, 1.0);
    while vel(lo)?.0 > xi {
        lo *= 2.0;
        if lo < -64.0 {
            return Err(Error::OutOfRange(format!("xi = {xi} below the range of Lambda'")));
        }
    }
    while vel(hi)?.0 < xi {
        hi *= 2.0;
        if hi > 64.0 {
            return Err(Error::OutOfRange(format!("xi = {xi} above the range of Lambda'")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if vel(mid)?.0 < xi {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (v, pr) = vel(0.5 * (lo + hi))?;
    if (v - xi).abs() > 1e-9 {
        return Err(Error::OutOfRange(format!("xi = {xi} not attained (closest {v})")));
    }
    Ok(pr)
}

/// The Doob transform of pi at the tilt with Lambda'(theta) = xi and its
/// stationary pair measure.
pub fn doob_minimizer(chain: &FiniteEnvChain, xi: f64) -> Result<DoobMinimizer> {
    let pr = theta_for_velocity(chain, xi)?;
    let p = chain.states();
    let u = &pr.right;
    let kernel: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            (0..chain.steps.len())
                .map(|k| {
                    let j = chain.next(i, k);
                    chain.rows[i][k] * (pr.theta * chain.steps[k] as f64).exp() * u[j] / (pr.rho * u[i])
                })
                .collect()
        })
        .collect();
    let mut kmat = DMatrix::zeros(p, p);
    for i in 0..p {
        for k in 0..chain.steps.len() {
            kmat[(i, chain.next(i, k))] += kernel[i][k];
        }
    }
    let (phi, mult) = stationary(&kmat)?;
    let weights: Vec<Vec<f64>> = (0..p).map(|i| kernel[i].iter().map(|v| phi[i] * v).collect()).collect();
    let mu = FinitePairMeasure { steps: chain.steps.clone(), weights };
    let corrector: Vec<Vec<f64>> =
        (0..p).map(|i| (0..chain.steps.len()).map(|k| u[chain.next(i, k)].ln() - u[i].ln()).collect()).collect();
    let r = -pr.lambda;
    let m1 = mu.first_marginal();
    let mut ansatz = 0.0f64;
    let mut loops = 0.0f64;
    for i in 0..p {
        for (k, &z) in chain.steps.iter().enumerate() {
            let form = m1[i] * chain.rows[i][k] * (pr.theta * z as f64 + corrector[i][k] + r).exp();
            ansatz = ansatz.max((mu.weights[i][k] - form).abs());
            if let Some(back) = chain.steps.iter().position(|w| *w == -z) {
                let j = chain.next(i, k);
                loops = loops.max((corrector[i][k] + corrector[j][back]).abs());
            }
        }
    }
    Ok(DoobMinimizer {
        xi,
        theta: pr.theta,
        lambda: pr.lambda,
        r,
        mu,
        kernel,
        phi,
        corrector,
        ansatz_residual: ansatz,
        loop_residual: loops,
        unique_stationary: mult == 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFromDual {
    pub xi: f64,
    pub rate: f64,
    pub theta: f64,
    pub lambda: f64,
}

/// I_q(xi) = theta xi - Lambda(theta) at Lambda'(theta) = xi.
pub fn rate_from_dual(chain: &FiniteEnvChain, xi: f64) -> Result<RateFromDual> {
    let pr = theta_for_velocity(chain, xi)?;
    Ok(RateFromDual { xi, rate: pr.theta * xi - pr.lambda, theta: pr.theta, lambda: pr.lambda })
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSearch {
    pub min: f64,
    pub argmin: FinitePairMeasure,
    pub feasible_points: usize,
    /// Dimension of the affine slice {stationary, sum 1, velocity xi}.
    pub slice_dimension: usize,
}

/// Minimum of the pair entropy over a grid of spacing `h` on the affine
/// slice of stationary pair measures with velocity xi. The grid is offset
/// by half a cell from the anchor point so the anchor itself is not sampled.
pub fn grid_min_pair_entropy(chain: &FiniteEnvChain, xi: f64, h: f64, anchor: &FinitePairMeasure) -> Result<GridSearch> {
    if (anchor.velocity() - xi).abs() > 1e-9 || !anchor.is_stationary() {
        return Err(Error::InvalidSpec("grid anchor must be stationary with velocity xi".into()));
    }
    let p = chain.states();
    let ks = chain.steps.len();
    let n = p * ks;
    let mut rows: Vec<Vec<f64>> = vec![vec![1.0; n]];
    for j in 0..p {
        let mut r = vec![0.0; n];
        for i in 0..p {
            for k in 0..ks {
                let c = i * ks + k;
                if i == j {
                    r[c] += 1.0;
                }
                if chain.next(i, k) == j {
                    r[c] -= 1.0;
                }
            }
        }
        rows.push(r);
    }
    rows.push((0..n).map(|c| chain.steps[c % ks] as f64).collect());
    let a = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
    let eig = SymmetricEigen::new(a.transpose() * &a);
    let basis: Vec<DVector<f64>> = (0..n)
        .filter(|&i| eig.eigenvalues[i].abs() < 1e-9)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    let dim = basis.len();
    let steps_per_axis = (2.0f64.sqrt() / h).ceil() as i64;
    let total = (2 * steps_per_axis) as f64;
    if total.powi(dim as i32) > 5e6 {
        return Err(Error::SizeLimit(format!("grid of dimension {dim} at spacing {h} is too large")));
    }
    let base: Vec<f64> = anchor.weights.iter().flatten().copied().collect();
    let mut best = f64::INFINITY;
    let mut best_mu = anchor.clone();
    let mut feasible = 0;
    let mut idx = vec![-steps_per_axis; dim];
    loop {
        let mut v = base.clone();
        for (b, &c) in basis.iter().zip(&idx) {
            let coef = (c as f64 + 0.5) * h;
            for (vi, bi) in v.iter_mut().zip(b.iter()) {
                *vi += coef * bi;
            }
        }
        if v.iter().all(|x| *x >= -1e-13) {
            let weights = (0..p).map(|i| (0..ks).map(|k| v[i * ks + k].max(0.0)).collect()).collect();
            let mu = FinitePairMeasure { steps: chain.steps.clone(), weights };
            feasible += 1;
            let val = pair_entropy_relaxed(chain, &mu);
            if val < best {
                best = val;
                best_mu = mu;
            }
        }
        let mut d = 0;
        loop {
            if d == dim {
                return Ok(GridSearch { min: best, argmin: best_mu, feasible_points: feasible, slice_dimension: dim });
            }
            if idx[d] < steps_per_axis - 1 {
                idx[d] += 1;
                break;
            }
            idx[d] = -steps_per_axis;
            d += 1;
        }
    }
}

/// Pair entropy with a stationarity tolerance suited to grid points.
fn pair_entropy_relaxed(chain: &FiniteEnvChain, mu: &FinitePairMeasure) -> f64 {
    let a = mu.first_marginal();
    let b = mu.second_marginal();
    if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9) {
        return f64::INFINITY;
    }
    let mut total = 0.0;
    for (i, row) in mu.weights.iter().enumerate() {
        for (k, &w) in row.iter().enumerate() {
            let pi = chain.rows[i][k];
            if w > 0.0 {
                if pi == 0.0 {
                    return f64::INFINITY;
                }
                total += w * (w / (a[i] * pi)).ln();
            }
        }
    }
    total
}

/// mu = phi K for a random kernel K on the support of pi.
pub fn random_stationary_pair<R: Rng + ?Sized>(chain: &FiniteEnvChain, rng: &mut R) -> Result<FinitePairMeasure> {
    let p = chain.states();
    let kernel: Vec<Vec<f64>> = chain
        .rows
        .iter()
        .map(|row| {
            let w: Vec<f64> = row.iter().map(|pi| if *pi > 0.0 { rng.random::<f64>() + 0.05 } else { 0.0 }).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        })
        .collect();
    let mut m = DMatrix::zeros(p, p);
    for i in 0..p {
        for k in 0..chain.steps.len() {
            m[(i, chain.next(i, k))] += kernel[i][k];
        }
    }
    let (phi, _) = stationary(&m)?;
    let weights = (0..p).map(|i| kernel[i].iter().map(|v| phi[i] * v).collect()).collect();
    Ok(FinitePairMeasure { steps: chain.steps.clone(), weights })
}
