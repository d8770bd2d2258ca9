//! Environment specifications, lazy sampling and shifts.

use std::borrow::Cow;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{hash_address, mix_in, unit_f64};

const SUM_TOL: f64 = 1e-12;

/// Allowed steps of the walk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSet {
    dimension: usize,
    bound: u32,
    steps: Vec<Vec<i64>>,
}

impl StepSet {
    pub fn new(dimension: usize, bound: u32, steps: Vec<Vec<i64>>) -> Result<Self> {
        if dimension == 0 || bound == 0 {
            return Err(Error::InvalidSpec("dimension and bound must be positive".into()));
        }
        for (i, z) in steps.iter().enumerate() {
            if z.len() != dimension {
                return Err(Error::InvalidSpec(format!("step {i} has length {}, expected {dimension}", z.len())));
            }
            let l1: i64 = z.iter().map(|c| c.abs()).sum();
            if l1 == 0 || l1 > bound as i64 {
                return Err(Error::InvalidSpec(format!("step {i} = {z:?} violates 0 < |z|_1 <= {bound}")));
            }
            if steps[..i].contains(z) {
                return Err(Error::InvalidSpec(format!("duplicate step {z:?}")));
            }
        }
        if steps.is_empty() {
            return Err(Error::InvalidSpec("empty step set".into()));
        }
        Ok(StepSet { dimension, bound, steps })
    }

    /// The 2d unit steps, ordered +e1, -e1, +e2, -e2, ...
    pub fn nearest_neighbor(dimension: usize) -> Self {
        let mut steps = Vec::with_capacity(2 * dimension);
        for i in 0..dimension {
            for s in [1, -1] {
                let mut z = vec![0; dimension];
                z[i] = s;
                steps.push(z);
            }
        }
        StepSet { dimension, bound: 1, steps }
    }

    /// Every nonzero step with |z|_1 <= bound, in lexicographic order.
    pub fn all_within(dimension: usize, bound: u32) -> Self {
        let b = bound as i64;
        let mut steps = Vec::new();
        let mut z = vec![-b; dimension];
        loop {
            let l1: i64 = z.iter().map(|c| c.abs()).sum();
            if l1 > 0 && l1 <= b {
                steps.push(z.clone());
            }
            let mut i = dimension;
            loop {
                if i == 0 {
                    return StepSet { dimension, bound, steps };
                }
                i -= 1;
                if z[i] < b {
                    z[i] += 1;
                    break;
                }
                z[i] = -b;
            }
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }
    pub fn bound(&self) -> u32 {
        self.bound
    }
    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
    pub fn steps(&self) -> &[Vec<i64>] {
        &self.steps
    }
    pub fn step(&self, i: usize) -> &[i64] {
        &self.steps[i]
    }
    pub fn index_of(&self, z: &[i64]) -> Option<usize> {
        self.steps.iter().position(|s| s.as_slice() == z)
    }
    pub fn is_nearest_neighbor(&self) -> bool {
        self.bound == 1 && self.steps.len() == 2 * self.dimension
    }
}

/// Distribution of the per-site step profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProfileLaw {
    Deterministic { profile: Vec<f64> },
    Finite { profiles: Vec<Vec<f64>>, weights: Vec<f64> },
    /// `floor + (1 - floor * |steps|) * Dirichlet(alpha)`.
    Dirichlet { alpha: Vec<f64>, floor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Structure {
    /// Independent profiles per site, 1D or lattice.
    Static,
    /// Independent profiles per space-time point (n, x).
    SpaceTime,
    /// 1D, profile at x is `profiles[x mod p]`.
    Periodic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        period: Option<usize>,
        profiles: Vec<Vec<f64>>,
    },
}

fn default_bound() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub dimension: usize,
    #[serde(default = "default_bound")]
    pub bound: u32,
    /// Defaults to the nearest-neighbour steps (+e1, -e1, ...) for bound 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<Vec<i64>>>,
    pub structure: Structure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law: Option<ProfileLaw>,
    /// Declared ellipticity constant: every supported probability must be at least this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ellipticity: Option<f64>,
    pub seed: u64,
}

fn check_profile(p: &[f64], k: usize, what: &str) -> Result<()> {
    if p.len() != k {
        return Err(Error::InvalidSpec(format!("{what}: has {} entries, expected {k}", p.len())));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidSpec(format!("{what}: negative or non-finite probability")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidSpec(format!("{what}: probabilities sum to {s}")));
    }
    Ok(())
}

impl EnvironmentSpec {
    /// 1D nearest-neighbour, same profile (p, 1-p) everywhere.
    pub fn deterministic_1d(p_right: f64, seed: u64) -> Self {
        EnvironmentSpec {
            dimension: 1,
            bound: 1,
            steps: None,
            structure: Structure::Static,
            law: Some(ProfileLaw::Deterministic { profile: vec![p_right, 1.0 - p_right] }),
            ellipticity: None,
            seed,
        }
    }

    /// 1D nearest-neighbour periodic; each profile is (right, left).
    pub fn periodic_1d(profiles: Vec<[f64; 2]>, seed: u64) -> Self {
        EnvironmentSpec {
            dimension: 1,
            bound: 1,
            steps: None,
            structure: Structure::Periodic { period: None, profiles: profiles.into_iter().map(|p| p.to_vec()).collect() },
            law: None,
            ellipticity: None,
            seed,
        }
    }

    /// 1D nearest-neighbour i.i.d. profiles from a finite list.
    pub fn iid_1d(profiles: Vec<[f64; 2]>, weights: Vec<f64>, seed: u64) -> Self {
        EnvironmentSpec {
            dimension: 1,
            bound: 1,
            steps: None,
            structure: Structure::Static,
            law: Some(ProfileLaw::Finite { profiles: profiles.into_iter().map(|p| p.to_vec()).collect(), weights }),
            ellipticity: None,
            seed,
        }
    }

    /// Nearest-neighbour space-time environment in spatial dimension d.
    pub fn space_time(dimension: usize, law: ProfileLaw, seed: u64) -> Self {
        EnvironmentSpec {
            dimension,
            bound: 1,
            steps: None,
            structure: Structure::SpaceTime,
            law: Some(law),
            ellipticity: None,
            seed,
        }
    }

    pub fn step_set(&self) -> Result<StepSet> {
        match &self.steps {
            Some(s) => StepSet::new(self.dimension, self.bound, s.clone()),
            None if self.bound == 1 => Ok(StepSet::nearest_neighbor(self.dimension)),
            None => Ok(StepSet::all_within(self.dimension, self.bound)),
        }
    }

    pub fn is_space_time(&self) -> bool {
        matches!(self.structure, Structure::SpaceTime)
    }

    /// Length of an address: d for static, d+1 (time first) for space-time.
    pub fn address_len(&self) -> usize {
        self.dimension + usize::from(self.is_space_time())
    }

    pub fn validate(&self) -> Result<()> {
        let steps = self.step_set()?;
        let k = steps.len();
        if let Some(c) = self.ellipticity {
            if !(c > 0.0) {
                return Err(Error::InvalidSpec("ellipticity must be positive".into()));
            }
        }
        match (&self.structure, &self.law) {
            (Structure::Periodic { period, profiles }, _) => {
                if self.dimension != 1 {
                    return Err(Error::InvalidSpec("periodic structure is one-dimensional".into()));
                }
                if profiles.is_empty() {
                    return Err(Error::InvalidSpec("periodic structure needs at least one profile".into()));
                }
                if let Some(p) = period {
                    if *p != profiles.len() {
                        return Err(Error::InvalidSpec(format!(
                            "period {p} but {} profiles listed",
                            profiles.len()
                        )));
                    }
                }
                for (i, p) in profiles.iter().enumerate() {
                    check_profile(p, k, &format!("periodic profile {i}"))?;
                }
            }
            (_, None) => return Err(Error::InvalidSpec("missing profile law".into())),
            (_, Some(law)) => match law {
                ProfileLaw::Deterministic { profile } => check_profile(profile, k, "deterministic profile")?,
                ProfileLaw::Finite { profiles, weights } => {
                    if profiles.is_empty() || profiles.len() != weights.len() {
                        return Err(Error::InvalidSpec("profiles and weights must be non-empty and equally long".into()));
                    }
                    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                        return Err(Error::InvalidSpec("negative weight".into()));
                    }
                    let s: f64 = weights.iter().sum();
                    if (s - 1.0).abs() > SUM_TOL {
                        return Err(Error::InvalidSpec(format!("weights sum to {s}")));
                    }
                    for (i, p) in profiles.iter().enumerate() {
                        check_profile(p, k, &format!("profile {i}"))?;
                    }
                }
                ProfileLaw::Dirichlet { alpha, floor } => {
                    if alpha.len() != k || alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
                        return Err(Error::InvalidSpec(format!("dirichlet alpha needs {k} positive entries")));
                    }
                    if !(*floor >= 0.0) || floor * k as f64 >= 1.0 {
                        return Err(Error::InvalidSpec(format!("dirichlet floor {floor} must satisfy 0 <= floor * {k} < 1")));
                    }
                    if let Some(c) = self.ellipticity {
                        if c > *floor {
                            return Err(Error::InvalidSpec(format!("declared ellipticity {c} exceeds the floor {floor}")));
                        }
                    }
                }
            },
        }
        if let Some(c) = self.ellipticity {
            if let Some(support) = self.finite_support() {
                for (p, w) in support {
                    if w > 0.0 && p.iter().any(|x| *x < c) {
                        return Err(Error::InvalidSpec(format!("profile {p:?} violates ellipticity {c}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Support of the one-site profile law with weights; `None` for Dirichlet.
    pub fn finite_support(&self) -> Option<Vec<(Vec<f64>, f64)>> {
        if let Structure::Periodic { profiles, .. } = &self.structure {
            let w = 1.0 / profiles.len() as f64;
            return Some(profiles.iter().map(|p| (p.clone(), w)).collect());
        }
        match self.law.as_ref()? {
            ProfileLaw::Deterministic { profile } => Some(vec![(profile.clone(), 1.0)]),
            ProfileLaw::Finite { profiles, weights } => {
                Some(profiles.iter().cloned().zip(weights.iter().copied()).collect())
            }
            ProfileLaw::Dirichlet { .. } => None,
        }
    }

    /// Averaged kernel q(z) = E[pi(0, z)].
    pub fn mean_kernel(&self) -> Result<Vec<f64>> {
        let k = self.step_set()?.len();
        if let Some(support) = self.finite_support() {
            let mut q = vec![0.0; k];
            for (p, w) in support {
                for (qi, pi) in q.iter_mut().zip(&p) {
                    *qi += w * pi;
                }
            }
            return Ok(q);
        }
        match &self.law {
            Some(ProfileLaw::Dirichlet { alpha, floor }) => {
                let a0: f64 = alpha.iter().sum();
                let s = 1.0 - floor * k as f64;
                Ok(alpha.iter().map(|a| floor + s * a / a0).collect())
            }
            _ => Err(Error::InvalidSpec("missing profile law".into())),
        }
    }

    /// Pair moments E[pi(0, z_i) pi(0, z_j)], including the diagonal second moments.
    pub fn pair_moments(&self) -> Result<Vec<Vec<f64>>> {
        let k = self.step_set()?.len();
        let mut m = vec![vec![0.0; k]; k];
        if let Some(support) = self.finite_support() {
            for (p, w) in support {
                for i in 0..k {
                    for j in 0..k {
                        m[i][j] += w * p[i] * p[j];
                    }
                }
            }
            return Ok(m);
        }
        match &self.law {
            Some(ProfileLaw::Dirichlet { alpha, floor }) => {
                let a0: f64 = alpha.iter().sum();
                let s = 1.0 - floor * k as f64;
                let c = *floor;
                for i in 0..k {
                    for j in 0..k {
                        let edd = if i == j {
                            alpha[i] * (alpha[i] + 1.0) / (a0 * (a0 + 1.0))
                        } else {
                            alpha[i] * alpha[j] / (a0 * (a0 + 1.0))
                        };
                        m[i][j] = c * c + c * s * (alpha[i] + alpha[j]) / a0 + s * s * edd;
                    }
                }
                Ok(m)
            }
            _ => Err(Error::InvalidSpec("missing profile law".into())),
        }
    }
}

/// A realized environment: profiles are a pure function of (spec seed, seed, address).
#[derive(Debug, Clone)]
pub struct Environment {
    spec: Arc<EnvironmentSpec>,
    steps: Arc<StepSet>,
    seed: u64,
    key: u64,
    offset: Vec<i64>,
    cumulative: Arc<Vec<f64>>,
}

pub fn sample_environment(spec: &EnvironmentSpec, seed: u64) -> Result<Environment> {
    spec.validate()?;
    let steps = spec.step_set()?;
    let cumulative = match &spec.law {
        Some(ProfileLaw::Finite { weights, .. }) => weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect(),
        _ => Vec::new(),
    };
    Ok(Environment {
        key: mix_in(spec.seed, seed),
        spec: Arc::new(spec.clone()),
        steps: Arc::new(steps),
        seed,
        offset: vec![0; spec.address_len()],
        cumulative: Arc::new(cumulative),
    })
}

impl Environment {
    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }
    pub fn steps(&self) -> &StepSet {
        &self.steps
    }
    pub fn steps_shared(&self) -> Arc<StepSet> {
        Arc::clone(&self.steps)
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn offset(&self) -> &[i64] {
        &self.offset
    }
    pub fn dimension(&self) -> usize {
        self.spec.dimension
    }
    pub fn address_len(&self) -> usize {
        self.offset.len()
    }
    pub fn is_space_time(&self) -> bool {
        self.spec.is_space_time()
    }

    /// Period of a 1D environment whose profile depends only on x mod p (deterministic: 1).
    pub fn period(&self) -> Option<usize> {
        match (&self.spec.structure, &self.spec.law) {
            (Structure::Periodic { profiles, .. }, _) => Some(profiles.len()),
            (Structure::Static, Some(ProfileLaw::Deterministic { .. })) => Some(1),
            _ => None,
        }
    }

    /// (T_z env): profile(x) of the result is profile(x + z) of self.
    pub fn shift(&self, z: &[i64]) -> Result<Environment> {
        if z.len() != self.offset.len() {
            return Err(Error::DimensionMismatch { expected: self.offset.len(), got: z.len() });
        }
        let mut out = self.clone();
        for (o, d) in out.offset.iter_mut().zip(z) {
            *o += d;
        }
        Ok(out)
    }

    fn absolute(&self, addr: &[i64], buf: &mut [i64; 8]) -> usize {
        let n = self.offset.len();
        assert_eq!(addr.len(), n, "address length mismatch");
        for i in 0..n {
            buf[i] = addr[i] + self.offset[i];
        }
        n
    }

    /// Index into the support list for finite laws and periodic structures.
    pub fn profile_index(&self, addr: &[i64]) -> Option<usize> {
        let mut buf = [0i64; 8];
        let n = self.absolute(addr, &mut buf);
        let abs = &buf[..n];
        match (&self.spec.structure, &self.spec.law) {
            (Structure::Periodic { profiles, .. }, _) => Some(abs[0].rem_euclid(profiles.len() as i64) as usize),
            (_, Some(ProfileLaw::Deterministic { .. })) => Some(0),
            (_, Some(ProfileLaw::Finite { .. })) => {
                let u = unit_f64(hash_address(self.key, abs));
                let c = &self.cumulative;
                Some(c.iter().position(|&x| u < x).unwrap_or(c.len() - 1))
            }
            _ => None,
        }
    }

    /// Step probabilities at an address, ordered like `steps()`.
    pub fn profile(&self, addr: &[i64]) -> Cow<'_, [f64]> {
        match (&self.spec.structure, &self.spec.law) {
            (Structure::Periodic { profiles, .. }, _) => {
                Cow::Borrowed(&profiles[self.profile_index(addr).unwrap()])
            }
            (_, Some(ProfileLaw::Deterministic { profile })) => Cow::Borrowed(profile),
            (_, Some(ProfileLaw::Finite { profiles, .. })) => {
                Cow::Borrowed(&profiles[self.profile_index(addr).unwrap()])
            }
            (_, Some(ProfileLaw::Dirichlet { alpha, floor })) => {
                let mut buf = [0i64; 8];
                let n = self.absolute(addr, &mut buf);
                let mut rng = ChaCha8Rng::seed_from_u64(hash_address(self.key, &buf[..n]));
                let g: Vec<f64> = alpha
                    .iter()
                    .map(|&a| Gamma::new(a, 1.0).expect("alpha validated").sample(&mut rng))
                    .collect();
                let total: f64 = g.iter().sum();
                let s = 1.0 - floor * alpha.len() as f64;
                Cow::Owned(g.iter().map(|x| floor + s * x / total).collect())
            }
            (_, None) => unreachable!("validated spec has a law"),
        }
    }

    /// Convenience for 1D nearest-neighbour environments: (right, left).
    pub fn right_left(&self, x: i64) -> (f64, f64) {
        let p = self.profile(&[x]);
        (p[0], p[1])
    }
}

/// Outcome of the nestling test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Nestling {
    NonNestling { direction: Vec<f64>, margin: f64 },
    Nestling,
}

/// Local drift of a profile.
pub fn drift(steps: &StepSet, profile: &[f64]) -> Vec<f64> {
    let mut d = vec![0.0; steps.dimension()];
    for (z, p) in steps.steps().iter().zip(profile) {
        for (di, zi) in d.iter_mut().zip(z) {
            *di += p * *zi as f64;
        }
    }
    d
}

/// Separates the drift support from the origin by the minimum-norm point
/// of its convex hull (Gilbert's algorithm). The direction of that point
/// maximizes the smallest projected drift.
pub fn nestling_classify(spec: &EnvironmentSpec) -> Result<Nestling> {
    spec.validate()?;
    let steps = spec.step_set()?;
    let support = spec
        .finite_support()
        .ok_or_else(|| Error::Unsupported("nestling test needs a finite-support profile law".into()))?;
    let drifts: Vec<Vec<f64>> = support.iter().filter(|(_, w)| *w > 0.0).map(|(p, _)| drift(&steps, p)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = drifts[0].clone();
    for _ in 0..100_000 {
        let (best, _) = drifts
            .iter()
            .enumerate()
            .map(|(i, d)| (i, dot(d, &x)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let v = &drifts[best];
        let xx = dot(&x, &x);
        if xx < 1e-24 || xx - dot(v, &x) <= 1e-15 * xx.max(1e-300) {
            break;
        }
        let diff: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - b).collect();
        let t = (dot(&x, &diff) / dot(&diff, &diff)).clamp(0.0, 1.0);
        for (xi, di) in x.iter_mut().zip(&diff) {
            *xi -= t * di;
        }
    }
    let norm = dot(&x, &x).sqrt();
    if norm < 1e-10 {
        return Ok(Nestling::Nestling);
    }
    let direction: Vec<f64> = x.iter().map(|c| c / norm).collect();
    let margin = drifts.iter().map(|d| dot(d, &direction)).fold(f64::INFINITY, f64::min);
    if margin <= 1e-12 {
        return Ok(Nestling::Nestling);
    }
    Ok(Nestling::NonNestling { direction, margin })
}
