use proptest::prelude::*;
use rwre_core::env::{sample_environment, EnvironmentSpec, ProfileLaw, StepSet};
use rwre_core::rng::child_seed;
use rwre_core::spacetime::{
    cone_u, doob_kernel, g_exact_sequence, g_norm, lambda_c, meeting_kernel, rate_c, GMethod,
};
use rwre_core::stats::mean_stderr;

fn two_profile(d: usize) -> EnvironmentSpec {
    let rest = if d == 1 { 0.0 } else { 0.6 / (2 * d - 2) as f64 };
    let mut a = vec![rest; 2 * d];
    let mut b = vec![rest; 2 * d];
    if d == 1 {
        a = vec![0.7, 0.3];
        b = vec![0.2, 0.8];
    } else {
        (a[0], a[1], b[0], b[1]) = (0.3, 0.1, 0.1, 0.3);
    }
    EnvironmentSpec::space_time(d, ProfileLaw::Finite { profiles: vec![a, b], weights: vec![0.5, 0.5] }, 0)
}

fn simplex(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tilted_kernel_is_a_probability(raw in prop::collection::vec(0.05f64..1.0, 4),
                                      theta in prop::array::uniform2(-3.0f64..3.0)) {
        let q = simplex(&raw);
        let t = lambda_c(&q, &StepSet::nearest_neighbor(2), &theta).unwrap();
        prop_assert!((t.q_theta.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        prop_assert!(t.q_theta.iter().all(|p| *p > 0.0));
        let w = t.weights();
        for ((qt, qq), wi) in t.q_theta.iter().zip(&q).zip(&w) {
            prop_assert!((qt - qq * wi).abs() < 1e-14);
        }
    }

    #[test]
    fn cramer_rate_inverts_the_gradient(raw in prop::collection::vec(0.05f64..1.0, 4),
                                        x in -0.6f64..0.6, y in -0.3f64..0.3) {
        let q = simplex(&raw);
        let steps = StepSet::nearest_neighbor(2);
        let r = rate_c(&q, &steps, &[x, y]).unwrap();
        let t = lambda_c(&q, &steps, &r.theta).unwrap();
        let g = t.gradient();
        prop_assert!((g[0] - x).abs() < 1e-9 && (g[1] - y).abs() < 1e-9);
        prop_assert!((r.rate - (r.theta[0] * x + r.theta[1] * y - t.lambda)).abs() < 1e-12);
        prop_assert!(r.rate >= -1e-12);
    }

    #[test]
    fn cones_are_positive_and_close_their_recursion(seed in any::<u64>(), t in -1.0f64..1.0, depth in 1usize..12) {
        let env = sample_environment(&two_profile(2), seed).unwrap();
        let cone = cone_u(&env, &[t, 0.5 * t], depth, 0, &[0, 0]).unwrap();
        prop_assert!(cone.min_value() > 0.0);
        prop_assert!(cone.recursion_residual(&env) <= 1e-12);
        let k = doob_kernel(&env, &[t, 0.5 * t], depth, 0, &[0, 0]).unwrap();
        prop_assert!(k.row_sum_error <= 1e-14);
        prop_assert!(k.probs.iter().all(|p| *p > 0.0));
    }
}

#[test]
fn cone_root_has_mean_one() {
    // E[u_N(0,0)] = 1 layer by layer, since every layer averages to the annealed weights
    let spec = two_profile(2);
    let vals: Vec<f64> = (0..4000u64)
        .map(|i| {
            let env = sample_environment(&spec, child_seed(5, i)).unwrap();
            cone_u(&env, &[0.4, -0.2], 6, 0, &[0, 0]).unwrap().root()
        })
        .collect();
    let (m, se) = mean_stderr(&vals);
    assert!((m - 1.0).abs() < 4.0 * se, "mean {m} (se {se})");
}

#[test]
fn monte_carlo_second_moment_matches_the_exact_sequence() {
    let spec = two_profile(1);
    let theta = [0.3];
    let exact = g_exact_sequence(&spec, &theta, 6).unwrap()[6];
    let mc = g_norm(&spec, &theta, 6, GMethod::MonteCarlo { replicates: 20_000, seed: 3 }).unwrap();
    assert!((mc.value - exact).abs() < 4.0 * mc.stderr, "{} vs {exact}", mc.value);
    assert!(exact > 1.0);
}

#[test]
fn meeting_sums_follow_recurrence_by_dimension() {
    let one = meeting_kernel(&two_profile(1), &[0.0], 30, 14).unwrap();
    assert!(one.recurrent && one.b_total >= 1.0 - 1e-6);
    let three = meeting_kernel(&two_profile(3), &[0.0; 3], 20, 14).unwrap();
    assert!(!three.recurrent && three.b_total < 1.0);
    assert!(three.b.iter().all(|b| *b >= 0.0));
}
