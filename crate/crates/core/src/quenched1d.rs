//! One-dimensional quenched rate function via the passage-time generating
//! function zeta, the tilted kernel with its corrector, and invariant densities.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::rng::replica_rng;
use crate::stats::batch_means_stderr;
use crate::walk::StepKernel;

const MAX_BURN: usize = 1 << 22;
const START_BURN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Right,
    Left,
}

/// A 1D nearest-neighbour environment, possibly reflected through the origin.
#[derive(Clone, Copy)]
struct Line<'a> {
    env: &'a Environment,
    mirrored: bool,
    right: usize,
    left: usize,
    cache: &'a [(f64, f64)],
    cache_lo: i64,
}

impl<'a> Line<'a> {
    fn new(env: &'a Environment, direction: Direction) -> Result<Self> {
        let steps = env.steps();
        if env.is_space_time() || steps.dimension() != 1 || steps.len() != 2 {
            return Err(Error::Unsupported("needs a static 1D nearest-neighbour environment".into()));
        }
        let (Some(right), Some(left)) = (steps.index_of(&[1]), steps.index_of(&[-1])) else {
            return Err(Error::Unsupported("needs steps +1 and -1".into()));
        };
        Ok(Line { env, mirrored: direction == Direction::Left, right, left, cache: &[], cache_lo: 0 })
    }

    /// (pi(x, +1), pi(x, -1)) in the line's own orientation.
    #[inline]
    fn probs(&self, x: i64) -> (f64, f64) {
        let i = x.wrapping_sub(self.cache_lo);
        if i >= 0 && (i as usize) < self.cache.len() {
            return self.cache[i as usize];
        }
        self.lookup(x)
    }

    fn lookup(&self, x: i64) -> (f64, f64) {
        if self.mirrored {
            let p = self.env.profile(&[-x]);
            (p[self.left], p[self.right])
        } else {
            let p = self.env.profile(&[x]);
            (p[self.right], p[self.left])
        }
    }

    fn period(&self) -> Option<usize> {
        self.env.period()
    }

    /// Profiles on [lo, hi] for repeated sweeps; empty for periodic lines.
    fn table(&self, lo: i64, hi: i64) -> Vec<(f64, f64)> {
        if self.period().is_some() {
            return Vec::new();
        }
        (lo..=hi).map(|x| self.lookup(x)).collect()
    }

    fn with_cache(mut self, cache: &'a [(f64, f64)], lo: i64) -> Self {
        self.cache = cache;
        self.cache_lo = lo;
        self
    }
}

fn supercritical(r: f64, detail: impl Into<String>) -> Error {
    Error::Supercritical { r, detail: detail.into() }
}

/// zeta(r, T_j omega) for the phases j = 0..p of a periodic line, solved as
/// the minimal fixed point of the period-composed Moebius map.
fn periodic_zeta(line: &Line, r: f64) -> Result<Vec<f64>> {
    let p = line.period().expect("periodic line");
    let er = r.exp();
    let ab: Vec<(f64, f64)> = (0..p as i64)
        .map(|j| {
            let (pr, pl) = line.probs(j);
            (pr * er, pl * er)
        })
        .collect();
    if ab.iter().any(|(a, _)| *a <= 0.0) {
        return Err(Error::NonElliptic("a site cannot step right; zeta vanishes".into()));
    }
    if ab.iter().all(|(_, b)| *b == 0.0) {
        return Ok(ab.iter().map(|(a, _)| *a).collect());
    }
    // s -> a / (1 - b s) is the matrix [[0, a], [-b, 1]]; compose phases 0..p.
    let mut m = [[1.0, 0.0], [0.0, 1.0]];
    for &(a, b) in &ab {
        let f = [[0.0, a], [-b, 1.0]];
        let prod = [
            [f[0][0] * m[0][0] + f[0][1] * m[1][0], f[0][0] * m[0][1] + f[0][1] * m[1][1]],
            [f[1][0] * m[0][0] + f[1][1] * m[1][0], f[1][0] * m[0][1] + f[1][1] * m[1][1]],
        ];
        let scale = prod.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs()));
        m = prod.map(|row| row.map(|v| v / scale));
    }
    let [[al, be], [ga, de]] = m;
    // fixed points: ga s^2 + (de - al) s - be = 0
    let (qa, qb, qc) = (ga, de - al, -be);
    let mut roots = Vec::new();
    if qa.abs() <= 1e-300 {
        if qb != 0.0 {
            roots.push(-qc / qb);
        }
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return Err(supercritical(r, "periodic fixed-point equation has no real root"));
        }
        let sq = disc.sqrt();
        let sign = if qb >= 0.0 { 1.0 } else { -1.0 };
        let t = -0.5 * (qb + sign * sq);
        if t != 0.0 {
            roots.push(t / qa);
            roots.push(qc / t);
        } else {
            roots.push(0.0);
        }
    }
    roots.retain(|s| s.is_finite() && *s > 0.0);
    roots.sort_by(f64::total_cmp);
    'root: for s in roots {
        let mut out = vec![0.0; p];
        let mut prev = s;
        for (j, &(a, b)) in ab.iter().enumerate() {
            let den = 1.0 - b * prev;
            if den <= 0.0 {
                continue 'root;
            }
            prev = a / den;
            out[j] = prev;
        }
        return Ok(out);
    }
    Err(supercritical(r, "no admissible positive periodic solution"))
}

/// Forward recursion from a zero seed started `burn` sites left of `lo`;
/// fills `out` with zeta on [lo, hi]. Returns false on a non-positive denominator.
fn forward_run(line: &Line, r: f64, lo: i64, hi: i64, burn: usize, seed: f64, out: &mut Vec<f64>) -> bool {
    let er = r.exp();
    out.clear();
    let mut prev = seed;
    let start = lo - burn as i64;
    for x in start..=hi {
        let (pr, pl) = line.probs(x);
        let den = 1.0 - pl * er * prev;
        if den <= 0.0 || !den.is_finite() {
            return false;
        }
        prev = pr * er / den;
        if x >= lo {
            out.push(prev);
        }
    }
    true
}

/// zeta on [lo, hi] for a line; exact for periodic lines.
fn zeta_on(line: &Line, r: f64, lo: i64, hi: i64, tol: f64) -> Result<(Vec<f64>, usize, f64, bool)> {
    if let Some(p) = line.period() {
        let ph = periodic_zeta(line, r)?;
        let vals = (lo..=hi).map(|x| ph[x.rem_euclid(p as i64) as usize]).collect();
        return Ok((vals, 0, 0.0, true));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut burn = START_BURN;
    while burn <= MAX_BURN {
        if !forward_run(line, r, lo, hi, burn, 0.0, &mut a) {
            return Err(supercritical(r, "non-positive denominator in the zeta recursion"));
        }
        if a.iter().any(|z| *z <= 0.0) {
            return Err(Error::NonElliptic("a site cannot step right; zeta vanishes".into()));
        }
        // r <= 0: zeta <= P(t_1 < oo) <= 1 and the map sends [0, 1] into itself,
        // so seed 1 brackets from above. Otherwise compare two depths.
        let ok = if r <= 0.0 {
            forward_run(line, r, lo, hi, burn, 1.0, &mut b)
        } else {
            forward_run(line, r, lo, hi, 2 * burn, 0.0, &mut b)
        };
        if !ok {
            return Err(supercritical(r, "non-positive denominator in the zeta recursion"));
        }
        let gap = a.iter().zip(&b).map(|(x, y)| ((x - y) / x).abs()).fold(0.0, f64::max);
        if gap <= tol {
            return Ok((a, burn, gap, true));
        }
        burn *= 2;
    }
    Err(supercritical(r, "bracketing solutions failed to meet"))
}

#[derive(Debug, Clone, Serialize)]
pub struct ZetaField {
    pub r: f64,
    /// Sites -M..=M.
    pub window: i64,
    pub values: Vec<f64>,
    /// Sites between the seed and the window (0 for exact periodic solves).
    pub burn_in: usize,
    /// Largest relative disagreement of the two certification runs.
    pub bracket_gap: f64,
    pub converged: bool,
}

impl ZetaField {
    pub fn at(&self, x: i64) -> f64 {
        self.values[(x + self.window) as usize]
    }
}

pub fn zeta_field(env: &Environment, r: f64, window: i64, tol: f64) -> Result<ZetaField> {
    let line = Line::new(env, Direction::Right)?;
    let (values, burn_in, bracket_gap, converged) = zeta_on(&line, r, -window, window, tol)?;
    Ok(ZetaField { r, window, values, burn_in, bracket_gap, converged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaValue {
    pub value: f64,
    /// Zero for exact period averages.
    pub stderr: f64,
}

const ZETA_TOL: f64 = 1e-14;

fn lambda_line(line: &Line, r: f64, window: i64) -> Result<LambdaValue> {
    if let Some(p) = line.period() {
        let ph = periodic_zeta(line, r)?;
        let value = ph.iter().map(|z| z.ln()).sum::<f64>() / p as f64;
        return Ok(LambdaValue { value, stderr: 0.0 });
    }
    let (vals, ..) = zeta_on(line, r, -window, window, ZETA_TOL)?;
    let logs: Vec<f64> = vals.iter().map(|z| z.ln()).collect();
    let value = logs.iter().sum::<f64>() / logs.len() as f64;
    Ok(LambdaValue { value, stderr: batch_means_stderr(&logs) })
}

/// lambda(r) = E log zeta(r, .), the average of log zeta over [-M, M].
pub fn lambda_of_r(env: &Environment, r: f64, window: i64) -> Result<LambdaValue> {
    lambda_line(&Line::new(env, Direction::Right)?, r, window)
}

fn lambda_prime(line: &Line, r: f64, window: i64) -> Result<f64> {
    let h = 1e-5 * r.abs().max(1.0);
    let up = lambda_line(line, r + h, window)?.value;
    let down = lambda_line(line, r - h, window)?.value;
    Ok((up - down) / (2.0 * h))
}

/// Bracket [lo, hi] around the supremum of convergent r; `hi` is +inf when
/// the line never becomes supercritical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriticalR {
    pub lo: f64,
    pub hi: f64,
}

impl CriticalR {
    pub fn is_infinite(&self) -> bool {
        self.hi.is_infinite()
    }
    /// Negative thresholds contradict P(t_1 < oo) = 1 and are flagged.
    pub fn negative(&self) -> bool {
        self.hi < 0.0
    }
}

fn converges(line: &Line, r: f64, window: i64) -> bool {
    lambda_line(line, r, window).is_ok()
}

fn critical_r_line(line: &Line, tol: f64, window: i64) -> Result<CriticalR> {
    let never_left = match line.period() {
        Some(p) => (0..p as i64).all(|j| line.probs(j).1 == 0.0),
        None => {
            let support = line.env.spec().finite_support();
            match support {
                Some(s) => s.iter().all(|(prof, w)| *w == 0.0 || prof[if line.mirrored { line.right } else { line.left }] == 0.0),
                None => false,
            }
        }
    };
    if never_left {
        return Ok(CriticalR { lo: f64::INFINITY, hi: f64::INFINITY });
    }
    let mut lo = -1.0;
    while !converges(line, lo, window) {
        lo *= 2.0;
        if lo < -1e6 {
            return Err(Error::NonConvergent("zeta diverges for all tested r".into()));
        }
    }
    let mut hi = 1.0f64.max(lo + 1.0);
    while converges(line, hi, window) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Ok(CriticalR { lo: f64::INFINITY, hi: f64::INFINITY });
        }
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if converges(line, mid, window) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(CriticalR { lo, hi })
}

pub fn critical_r(env: &Environment, tol: f64) -> Result<CriticalR> {
    critical_r_line(&Line::new(env, Direction::Right)?, tol, 2000)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateOptions {
    /// Half width M of the site window used for random environments.
    pub window: i64,
    /// Relative tolerance of the zeta certification.
    pub tol: f64,
}

impl Default for RateOptions {
    fn default() -> Self {
        RateOptions { window: 20_000, tol: 1e-13 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuenchedRate {
    pub xi: f64,
    pub rate: f64,
    /// Dual tilt r(xi).
    pub r: f64,
    pub lambda: f64,
    pub stderr: f64,
    pub critical: CriticalR,
}

/// I_q(xi) = r - xi lambda(r) with lambda'(r) = 1/xi; `Left` uses the
/// reflected environment and |xi|.
pub fn quenched_rate(env: &Environment, xi: f64, direction: Direction, opts: &RateOptions) -> Result<QuenchedRate> {
    let bare = Line::new(env, direction)?;
    let table = bare.table(-opts.window - 8 * START_BURN as i64, opts.window);
    let line = bare.with_cache(&table, -opts.window - 8 * START_BURN as i64);
    let v = match direction {
        Direction::Right => xi,
        Direction::Left => -xi,
    };
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::OutOfRange(format!("xi = {xi} is not inside the {direction:?} branch")));
    }
    let target = 1.0 / v;
    let crit = critical_r_line(&line, 1e-12, opts.window.min(4000))?;
    if crit.is_infinite() {
        return Err(Error::OutOfRange(format!("every site steps right; only xi = 1 is attainable, got {xi}")));
    }
    let w = opts.window;
    // lambda' increasing; supercritical evaluations count as +inf.
    let above = |r: f64| -> Result<bool> {
        match lambda_prime(&line, r, w) {
            Ok(d) => Ok(d >= target),
            Err(Error::Supercritical { .. }) => Ok(true),
            Err(e) => Err(e),
        }
    };
    let mut hi = crit.lo - 1e-9 * crit.lo.abs().max(1.0);
    if !above(hi)? {
        return Err(Error::OutOfRange(format!("xi = {xi} lies in the flat region at or below xi_c")));
    }
    let mut lo = hi - 1.0;
    while above(lo)? {
        hi = lo;
        lo -= 2.0 * (hi - lo).max(1.0);
        if lo < -1e4 {
            return Err(Error::OutOfRange(format!("xi = {xi} too close to 1")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-14 * mid.abs().max(1.0) {
            break;
        }
        if above(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let r = 0.5 * (lo + hi);
    let lam = lambda_line(&line, r, w)?;
    Ok(QuenchedRate { xi, rate: r - v * lam.value, r, lambda: lam.value, stderr: v * lam.stderr, critical: crit })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePoint {
    pub xi: f64,
    pub rate: f64,
    /// theta for LMGF-based rates, r for the passage-time route.
    pub dual: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CurveCheck {
    pub nonnegative: bool,
    pub convex: bool,
    pub dual_monotone: bool,
}

impl CurveCheck {
    pub fn all(&self) -> bool {
        self.nonnegative && self.convex && self.dual_monotone
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCurve {
    pub points: Vec<RatePoint>,
    pub validity: (f64, f64),
}

impl RateCurve {
    pub fn new(mut points: Vec<RatePoint>, validity: (f64, f64)) -> Self {
        points.sort_by(|a, b| a.xi.total_cmp(&b.xi));
        RateCurve { points, validity }
    }

    pub fn check(&self) -> CurveCheck {
        let p = &self.points;
        let nonnegative = p.iter().all(|q| q.rate >= -1e-12 - 3.0 * q.stderr);
        let convex = p.windows(3).all(|w| {
            let s1 = (w[1].rate - w[0].rate) / (w[1].xi - w[0].xi);
            let s2 = (w[2].rate - w[1].rate) / (w[2].xi - w[1].xi);
            s2 - s1 >= -1e-8
        });
        let inc = p.windows(2).all(|w| w[1].dual >= w[0].dual);
        let dec = p.windows(2).all(|w| w[1].dual <= w[0].dual);
        CurveCheck { nonnegative, convex, dual_monotone: inc || dec }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "xi,I,r,stderr")?;
        for p in &self.points {
            writeln!(w, "{},{},{},{}", p.xi, p.rate, p.dual, p.stderr)?;
        }
        Ok(())
    }
}

/// Quenched rate on a grid of velocities of one sign, evaluated in parallel.
pub fn quenched_rate_curve(env: &Environment, xis: &[f64], opts: &RateOptions) -> Result<RateCurve> {
    let pts: Result<Vec<RatePoint>> = xis
        .par_iter()
        .map(|&xi| {
            let dir = if xi > 0.0 { Direction::Right } else { Direction::Left };
            let q = quenched_rate(env, xi, dir, opts)?;
            Ok(RatePoint { xi, rate: q.rate, dual: q.r, stderr: q.stderr })
        })
        .collect();
    let pts = pts?;
    let lo = pts.iter().map(|p| p.xi).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.xi).fold(f64::NEG_INFINITY, f64::max);
    Ok(RateCurve::new(pts, (lo, hi)))
}

/// Tilted kernel pi-hat with corrector F on a window, or on one period.
#[derive(Debug, Clone, Serialize)]
pub struct TiltedKernel {
    pub xi: f64,
    pub r: f64,
    pub lambda: f64,
    /// Coefficient of z in the exponential form: -lambda for right, +lambda for left.
    pub theta: f64,
    /// First site of the stored arrays (0 for periodic kernels).
    pub lo: i64,
    pub period: Option<usize>,
    pub right: Vec<f64>,
    pub left: Vec<f64>,
    /// F(T_x omega, +1) and F(T_x omega, -1).
    pub f_right: Vec<f64>,
    pub f_left: Vec<f64>,
}

impl TiltedKernel {
    pub fn hi(&self) -> i64 {
        self.lo + self.right.len() as i64 - 1
    }

    fn slot(&self, x: i64) -> Option<usize> {
        match self.period {
            Some(p) => Some(x.rem_euclid(p as i64) as usize),
            None => {
                let i = x - self.lo;
                (i >= 0 && (i as usize) < self.right.len()).then_some(i as usize)
            }
        }
    }

    /// (pi-hat(x, +1), pi-hat(x, -1)).
    pub fn probs(&self, x: i64) -> Option<(f64, f64)> {
        self.slot(x).map(|i| (self.right[i], self.left[i]))
    }

    /// (F(x, +1), F(x, -1)).
    pub fn corrector(&self, x: i64) -> Option<(f64, f64)> {
        self.slot(x).map(|i| (self.f_right[i], self.f_left[i]))
    }

    /// Sites covered: one period, or the stored window.
    pub fn sites(&self) -> std::ops::RangeInclusive<i64> {
        match self.period {
            Some(p) => 0..=(p as i64 - 1),
            None => self.lo..=self.hi(),
        }
    }

    pub fn max_normalization_error(&self) -> f64 {
        self.right.iter().zip(&self.left).map(|(a, b)| (a + b - 1.0).abs()).fold(0.0, f64::max)
    }

    /// max |pi-hat(x,z) - pi(x,z) exp(theta z + F(x,z) + r)|.
    pub fn representation_residual(&self, env: &Environment) -> f64 {
        let mut worst = 0.0f64;
        for x in self.sites() {
            let (pr, pl) = env.right_left(x);
            let (hr, hl) = self.probs(x).unwrap();
            let (fr, fl) = self.corrector(x).unwrap();
            let er = pr * (self.theta + fr + self.r).exp();
            let el = pl * (-self.theta + fl + self.r).exp();
            worst = worst.max((hr - er).abs()).max((hl - el).abs());
        }
        worst
    }

    /// Bounded-jump line kernel with the same probabilities.
    pub fn line_kernel(&self) -> LineKernel {
        LineKernel {
            steps: vec![1, -1],
            lo: self.lo,
            period: self.period,
            probs: self.right.iter().zip(&self.left).map(|(a, b)| vec![*a, *b]).collect(),
        }
    }
}

impl StepKernel for TiltedKernel {
    fn sample_step(&self, env: &Environment, _time: i64, position: &[i64], u: f64) -> Result<usize> {
        let x = position[0];
        let (r, _) = self
            .probs(x)
            .ok_or_else(|| Error::OutOfRange(format!("walk left the kernel window at x = {x}")))?;
        let steps = env.steps();
        Ok(if u < r { steps.index_of(&[1]).unwrap() } else { steps.index_of(&[-1]).unwrap() })
    }
}

/// Build pi-hat and F at the tilt solving the quenched rate problem for xi.
pub fn tilted_kernel(env: &Environment, xi: f64, opts: &RateOptions) -> Result<TiltedKernel> {
    let direction = if xi > 0.0 { Direction::Right } else { Direction::Left };
    let q = quenched_rate(env, xi, direction, opts)?;
    tilted_kernel_at(env, xi, q.r, direction, opts)
}

/// Kernel at a given r (no velocity solve).
pub fn tilted_kernel_at(env: &Environment, xi: f64, r: f64, direction: Direction, opts: &RateOptions) -> Result<TiltedKernel> {
    let line = Line::new(env, direction)?;
    let er = r.exp();
    let lam = lambda_line(&line, r, opts.window)?.value;
    // sites in line orientation: need zeta on [a-1, b]
    let (a, b) = match line.period() {
        Some(p) => (0, p as i64 - 1),
        None => (-opts.window, opts.window),
    };
    let (z, ..) = zeta_on(&line, r, a - 1, b, opts.tol.max(ZETA_TOL))?;
    let n = (b - a + 1) as usize;
    let mut right = vec![0.0; n];
    let mut left = vec![0.0; n];
    let mut f_right = vec![0.0; n];
    let mut f_left = vec![0.0; n];
    for i in 0..n {
        let x = a + i as i64;
        let (pr, pl) = line.probs(x);
        let zx = z[i + 1];
        let zprev = z[i];
        let hr = pr * er / zx;
        let hl = pl * er * zprev;
        let fr = -zx.ln() + lam;
        let fl = zprev.ln() - lam;
        match direction {
            Direction::Right => {
                right[i] = hr;
                left[i] = hl;
                f_right[i] = fr;
                f_left[i] = fl;
            }
            Direction::Left => {
                // line site x is original site -x with steps reversed
                let j = match line.period() {
                    Some(p) => (-x).rem_euclid(p as i64) as usize,
                    None => n - 1 - i,
                };
                right[j] = hl;
                left[j] = hr;
                f_right[j] = fl;
                f_left[j] = fr;
            }
        }
    }
    let theta = match direction {
        Direction::Right => -lam,
        Direction::Left => lam,
    };
    Ok(TiltedKernel { xi, r, lambda: lam, theta, lo: a, period: line.period(), right, left, f_right, f_left })
}

/// A bounded-jump kernel on Z given on a window or periodically.
#[derive(Debug, Clone, Serialize)]
pub struct LineKernel {
    pub steps: Vec<i64>,
    pub lo: i64,
    pub period: Option<usize>,
    /// probs[i][k]: probability of steps[k] at site lo + i (or phase i).
    pub probs: Vec<Vec<f64>>,
}

impl LineKernel {
    /// The untilted kernel of a static 1D environment on [lo, hi] (or one period).
    pub fn from_env(env: &Environment, lo: i64, hi: i64) -> Result<Self> {
        if env.is_space_time() || env.dimension() != 1 {
            return Err(Error::Unsupported("needs a static 1D environment".into()));
        }
        let steps: Vec<i64> = env.steps().steps().iter().map(|z| z[0]).collect();
        let (a, b) = match env.period() {
            Some(p) => (0, p as i64 - 1),
            None => (lo, hi),
        };
        let probs = (a..=b).map(|x| env.profile(&[x]).into_owned()).collect();
        Ok(LineKernel { steps, lo: a, period: env.period(), probs })
    }

    pub fn hi(&self) -> i64 {
        self.lo + self.probs.len() as i64 - 1
    }

    fn at(&self, x: i64) -> &[f64] {
        match self.period {
            Some(p) => &self.probs[x.rem_euclid(p as i64) as usize],
            None => &self.probs[(x - self.lo) as usize],
        }
    }

    fn bound(&self) -> usize {
        self.steps.iter().map(|z| z.unsigned_abs() as usize).max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantDensity {
    pub lo: i64,
    /// phi on [lo, lo + len), normalized to window average 1.
    pub phi: Vec<f64>,
    /// Window average of the unnormalized density (expected visits per site).
    pub norm: f64,
    /// max |phi(y) - sum_z phi(y - z) k(y - z, z)| over the window, relative to the mean.
    pub residual: f64,
    /// Margin used on each side of the window (0 for periodic solves).
    pub margin: usize,
    /// Window average of sum_z k(y, z) z phi(y).
    pub velocity: f64,
}

/// Solve (I - Q^T) g = e_0 for a banded substochastic Q by elimination
/// without pivoting (the matrix is column diagonally dominant).
fn banded_green(kernel: &LineKernel, a: i64, b: i64, source: i64) -> Vec<f64> {
    let n = (b - a + 1) as usize;
    let w = kernel.bound();
    let width = 2 * w + 1;
    // row y, column y + k - w for k in 0..width
    let mut band = vec![0.0; n * width];
    for i in 0..n {
        band[i * width + w] = 1.0;
    }
    for src in 0..n {
        let x = a + src as i64;
        for (z, p) in kernel.steps.iter().zip(kernel.at(x)) {
            let tgt = src as i64 + z;
            if tgt < 0 || tgt >= n as i64 {
                continue;
            }
            // equation at row tgt: g(tgt) - sum p g(src)
            let k = (src as i64 - tgt + w as i64) as usize;
            band[tgt as usize * width + k] -= p;
        }
    }
    let mut rhs = vec![0.0; n];
    rhs[(source - a) as usize] = 1.0;
    for piv in 0..n {
        let d = band[piv * width + w];
        for row in piv + 1..(piv + w + 1).min(n) {
            let k = piv + w - row;
            let f = band[row * width + k] / d;
            if f == 0.0 {
                continue;
            }
            for col in piv..(piv + w + 1).min(n) {
                let kr = col + w - row;
                let kp = col + w - piv;
                band[row * width + kr] -= f * band[piv * width + kp];
            }
            rhs[row] -= f * rhs[piv];
        }
    }
    let mut g = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = rhs[row];
        for col in row + 1..(row + w + 1).min(n) {
            s -= band[row * width + col + w - row] * g[col];
        }
        g[row] = s / band[row * width + w];
    }
    g
}

fn density_residual(kernel: &LineKernel, g: impl Fn(i64) -> f64, lo: i64, hi: i64) -> f64 {
    let mut worst = 0.0f64;
    for y in lo..=hi {
        let inflow: f64 =
            kernel.steps.iter().enumerate().map(|(k, z)| g(y - z) * kernel.at(y - z)[k]).sum();
        worst = worst.max((g(y) - inflow).abs());
    }
    worst
}

fn window_velocity(kernel: &LineKernel, phi: &[f64], lo: i64) -> f64 {
    let mut s = 0.0;
    for (i, f) in phi.iter().enumerate() {
        let probs = kernel.at(lo + i as i64);
        s += f * kernel.steps.iter().zip(probs).map(|(z, p)| *z as f64 * p).sum::<f64>();
    }
    s / phi.iter().sum::<f64>()
}

/// Invariant density of the environment chain under `kernel`, on [lo, hi].
pub fn invariant_density(kernel: &LineKernel, lo: i64, hi: i64, tol: f64) -> Result<InvariantDensity> {
    if let Some(p) = kernel.period {
        let mut m = DMatrix::<f64>::zeros(p, p);
        for i in 0..p {
            for (z, pr) in kernel.steps.iter().zip(&kernel.probs[i]) {
                let j = (i as i64 + z).rem_euclid(p as i64) as usize;
                m[(j, i)] += pr;
            }
        }
        let mut a = m.clone() - DMatrix::<f64>::identity(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        for j in 0..p {
            a[(p - 1, j)] = 1.0;
        }
        rhs[p - 1] = p as f64;
        let sol = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NonConvergent("singular stationarity system".into()))?;
        let ph: Vec<f64> = sol.iter().copied().collect();
        let residual = (m * &sol - &sol).amax();
        let phi: Vec<f64> = (lo..=hi).map(|x| ph[x.rem_euclid(p as i64) as usize]).collect();
        let velocity = window_velocity(kernel, &ph, 0);
        return Ok(InvariantDensity { lo, phi, norm: 1.0, residual, margin: 0, velocity });
    }
    let avail_left = lo - kernel.lo;
    let avail_right = kernel.hi() - hi;
    if avail_left < 32 || avail_right < 16 {
        return Err(Error::OutOfRange("kernel window must extend beyond the density window".into()));
    }
    // source at lo - margin, absorbing ends at lo - 2 margin and hi + margin
    let max_margin = (avail_left / 2).min(avail_right) as usize;
    let mut margin = 16usize.max(max_margin / 64);
    let mut prev: Option<Vec<f64>> = None;
    let mut prev_norm = 0.0f64;
    loop {
        let a = lo - 2 * margin as i64;
        let b = hi + margin as i64;
        let g = banded_green(kernel, a, b, lo - margin as i64);
        let off = 2 * margin;
        let win: Vec<f64> = g[off..off + (hi - lo + 1) as usize].to_vec();
        let norm = win.iter().sum::<f64>() / win.len() as f64;
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::NotBallistic("occupation sums are not finite".into()));
        }
        let phi: Vec<f64> = win.iter().map(|v| v / norm).collect();
        if let Some(p) = &prev {
            let change = p.iter().zip(&phi).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if change < tol {
                let gf = |y: i64| g[(y - a) as usize];
                let residual = density_residual(kernel, gf, lo, hi) / norm;
                let velocity = window_velocity(kernel, &phi, lo);
                return Ok(InvariantDensity { lo, phi, norm, residual, margin, velocity });
            }
        }
        if margin * 2 > max_margin {
            let growth = norm / prev_norm.max(f64::MIN_POSITIVE);
            return Err(if growth > 1.2 {
                Error::NotBallistic(format!("occupation grew by {growth:.3} on the last doubling"))
            } else {
                Error::NonConvergent("density did not stabilize within the kernel window".into())
            });
        }
        prev = Some(phi);
        prev_norm = norm;
        margin *= 2;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrectorReport {
    /// (half width m, average of F(., +1) over [-m, m]) for nested windows.
    pub mean_zero: Vec<(i64, f64)>,
    pub mean_zero_pass: bool,
    /// Largest |sum of F| over sampled closed loops.
    pub closed_loop_max: f64,
    pub closed_loop_pass: bool,
    pub loops_checked: usize,
    /// Tail summary of |F(., +1)|.
    pub abs_max: f64,
    pub abs_q99: f64,
    /// E|F|^k for k = 1, 2, 3, 4.
    pub abs_moments: [f64; 4],
    pub finite_pass: bool,
}

impl CorrectorReport {
    pub fn pass(&self) -> bool {
        self.mean_zero_pass && self.closed_loop_pass && self.finite_pass
    }
}

/// Mean-zero, closed-loop and tail checks of the corrector F.
pub fn corrector_check(kernel: &TiltedKernel, loops: usize, loop_half_len: usize, seed: u64) -> CorrectorReport {
    let sites: Vec<i64> = kernel.sites().collect();
    let fr: Vec<f64> = sites.iter().map(|x| kernel.corrector(*x).unwrap().0).collect();
    let mut mean_zero = Vec::new();
    match kernel.period {
        Some(_) => mean_zero.push((0, fr.iter().sum::<f64>() / fr.len() as f64)),
        None => {
            let half = (sites.len() as i64 - 1) / 2;
            let centre = kernel.lo + half;
            let mut m = (half / 8).max(1);
            while m <= half {
                let slice: Vec<f64> = (centre - m..=centre + m).map(|x| kernel.corrector(x).unwrap().0).collect();
                mean_zero.push((m, slice.iter().sum::<f64>() / slice.len() as f64));
                if m == half {
                    break;
                }
                m = (m * 2).min(half);
            }
        }
    }
    let mean_zero_pass = mean_zero.last().map(|(_, v)| v.abs() <= 1e-10).unwrap_or(false);

    let mut worst = 0.0f64;
    let mut checked = 0;
    let (lo, hi) = match kernel.period {
        Some(_) => (-(loop_half_len as i64) * 4, loop_half_len as i64 * 4),
        None => (kernel.lo + loop_half_len as i64, kernel.hi() - loop_half_len as i64),
    };
    if hi > lo {
        for l in 0..loops {
            let mut rng = replica_rng(seed, l as u64);
            let mut steps: Vec<i64> = std::iter::repeat_n(1, loop_half_len).chain(std::iter::repeat_n(-1, loop_half_len)).collect();
            steps.shuffle(&mut rng);
            let mut x = rng.random_range(lo..=hi);
            let mut sum = 0.0;
            for z in steps {
                let (a, b) = kernel.corrector(x).unwrap();
                sum += if z == 1 { a } else { b };
                x += z;
            }
            worst = worst.max(sum.abs());
            checked += 1;
        }
    }
    let mut abs: Vec<f64> = fr.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let n = abs.len() as f64;
    let moments = [1, 2, 3, 4].map(|k| abs.iter().map(|v| v.powi(k)).sum::<f64>() / n);
    CorrectorReport {
        mean_zero,
        mean_zero_pass,
        closed_loop_max: worst,
        closed_loop_pass: worst <= 1e-10,
        loops_checked: checked,
        abs_max: *abs.last().unwrap_or(&0.0),
        abs_q99: crate::stats::quantile_sorted(&abs, 0.99),
        abs_moments: moments,
        finite_pass: abs.iter().all(|v| v.is_finite()),
    }
}
