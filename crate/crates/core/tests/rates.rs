use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rwre_core::env::{sample_environment, Environment, EnvironmentSpec};
use rwre_core::finitechain::{
    doob_minimizer, grid_min_pair_entropy, pair_entropy, perron_lambda, random_stationary_pair, rate_from_dual,
    FiniteEnvChain,
};
use rwre_core::quenched1d::{critical_r, quenched_rate, zeta_field, Direction, RateOptions};

fn periodic(profiles: Vec<[f64; 2]>) -> Environment {
    sample_environment(&EnvironmentSpec::periodic_1d(profiles, 0), 0).unwrap()
}

fn homogeneous_rate(p: f64, xi: f64) -> f64 {
    let (a, b) = ((1.0 + xi) / 2.0, (1.0 - xi) / 2.0);
    a * (a / p).ln() + b * (b / (1.0 - p)).ln()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zeta_and_perron_routes_agree(p1 in 0.55f64..0.95, p2 in 0.55f64..0.95, t in 0.1f64..0.9) {
        let env = periodic(vec![[p1, 1.0 - p1], [p2, 1.0 - p2]]);
        let chain = FiniteEnvChain::from_env(&env).unwrap();
        let v = perron_derivative_at_zero(&chain);
        let xi = v + t * (0.97 - v);
        let a = quenched_rate(&env, xi, Direction::Right, &RateOptions::default()).unwrap();
        let b = rate_from_dual(&chain, xi).unwrap();
        prop_assert!((a.rate - b.rate).abs() < 1e-8, "{} vs {}", a.rate, b.rate);
        prop_assert!(a.rate > 0.0);
    }

    #[test]
    fn homogeneous_walk_matches_closed_form(p in 0.55f64..0.95, t in 0.05f64..0.95) {
        let v = 2.0 * p - 1.0;
        let xi = v + t * (0.99 - v);
        let env = periodic(vec![[p, 1.0 - p]]);
        let q = quenched_rate(&env, xi, Direction::Right, &RateOptions::default()).unwrap();
        prop_assert!((q.rate - homogeneous_rate(p, xi)).abs() < 1e-9);
    }

    #[test]
    fn perron_root_vanishes_at_zero_and_is_convex(p1 in 0.05f64..0.95, p2 in 0.05f64..0.95, p3 in 0.05f64..0.95) {
        let chain = FiniteEnvChain::new(vec![1, -1], vec![vec![p1, 1.0 - p1], vec![p2, 1.0 - p2], vec![p3, 1.0 - p3]]).unwrap();
        prop_assert_eq!(perron_lambda(&chain, 0.0).unwrap().lambda, 0.0);
        let l: Vec<f64> = (-8..=8).map(|k| perron_lambda(&chain, 0.25 * k as f64).unwrap().lambda).collect();
        for w in l.windows(3) {
            prop_assert!(w[0] + w[2] - 2.0 * w[1] > 0.0);
        }
    }

    #[test]
    fn pair_entropy_is_convex(p1 in 0.05f64..0.95, p2 in 0.05f64..0.95, seed in any::<u64>()) {
        let chain = FiniteEnvChain::new(vec![1, -1], vec![vec![p1, 1.0 - p1], vec![p2, 1.0 - p2]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m1 = random_stationary_pair(&chain, &mut rng).unwrap();
        let m2 = random_stationary_pair(&chain, &mut rng).unwrap();
        let (h1, h2) = (pair_entropy(&chain, &m1), pair_entropy(&chain, &m2));
        for t in [0.25, 0.5, 0.75] {
            let mix = m1.blend(&m2, t);
            prop_assert!(mix.is_stationary());
            prop_assert!(pair_entropy(&chain, &mix) <= t * h1 + (1.0 - t) * h2 + 1e-12);
        }
    }

    #[test]
    fn doob_kernel_has_a_unique_stationary_law(p1 in 0.05f64..0.95, p2 in 0.05f64..0.95, t in 0.05f64..0.95) {
        let chain = FiniteEnvChain::new(vec![1, -1], vec![vec![p1, 1.0 - p1], vec![p2, 1.0 - p2]]).unwrap();
        let xi = -0.95 + 1.9 * t;
        let m = doob_minimizer(&chain, xi).unwrap();
        prop_assert!(m.unique_stationary);
        prop_assert!((m.mu.velocity() - xi).abs() < 1e-9);
    }
}

fn perron_derivative_at_zero(chain: &FiniteEnvChain) -> f64 {
    let h = 1e-6;
    (perron_lambda(chain, h).unwrap().lambda - perron_lambda(chain, -h).unwrap().lambda) / (2.0 * h)
}

#[test]
fn period_two_speed_is_the_zero_of_the_rate() {
    // nearest-neighbour steps flip the phase every step, so the environment
    // seen from the walker is uniform on the two phases and v is the mean drift
    let chain = FiniteEnvChain::new(vec![1, -1], vec![vec![0.9, 0.1], vec![0.6, 0.4]]).unwrap();
    let v = perron_derivative_at_zero(&chain);
    assert!((v - 0.5).abs() < 1e-8, "speed {v}");
    assert!(rate_from_dual(&chain, 0.5).unwrap().rate.abs() < 1e-9);
}

#[test]
fn minimizer_entropy_equals_the_quenched_rate() {
    let env = periodic(vec![[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]]);
    let chain = FiniteEnvChain::from_env(&env).unwrap();
    for xi in [0.5, 0.7, 0.9] {
        let m = doob_minimizer(&chain, xi).unwrap();
        let q = quenched_rate(&env, xi, Direction::Right, &RateOptions::default()).unwrap();
        assert!((pair_entropy(&chain, &m.mu) - q.rate).abs() < 1e-8, "xi = {xi}");
    }
}

#[test]
fn grid_minimum_brackets_the_dual_rate() {
    let chain = FiniteEnvChain::new(vec![1, -1], vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
    for (xi, h) in [(0.75, 0.05), (0.85, 0.02)] {
        let m = doob_minimizer(&chain, xi).unwrap();
        let rate = rate_from_dual(&chain, xi).unwrap().rate;
        let g = grid_min_pair_entropy(&chain, xi, h, &m.mu).unwrap();
        assert!(g.min >= rate - 1e-10, "grid beat the dual rate at xi = {xi}");
        assert!(g.min - rate <= h, "grid error {} at resolution {h}", g.min - rate);
    }
}

#[test]
fn zeta_seeds_meet_below_the_threshold_and_fail_above() {
    let spec = EnvironmentSpec::iid_1d(vec![[0.9, 0.1], [0.4, 0.6]], vec![0.5, 0.5], 0);
    let env = sample_environment(&spec, 77).unwrap();
    let rc = critical_r(&env, 1e-6).unwrap();
    assert!(rc.hi.is_finite() && rc.hi >= 0.0);
    let below = zeta_field(&env, rc.lo - 0.05, 500, 1e-12).unwrap();
    assert!(below.converged && below.bracket_gap <= 1e-12);
    assert!(below.values.iter().all(|z| *z > 0.0));
    assert!(zeta_field(&env, rc.hi + 0.05, 500, 1e-12).is_err());
}
