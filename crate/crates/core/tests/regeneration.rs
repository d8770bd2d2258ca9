use proptest::prelude::*;
use rwre_core::env::EnvironmentSpec;
use rwre_core::regen::{
    averaged_rate, collect_slabs, find_regenerations, lambda_a, lln_velocity, psi, slab_diagnostics,
    BootstrapOptions, HarvestOptions, SlabEnsemble,
};
use rwre_core::walk::PathSample;

fn iid() -> EnvironmentSpec {
    EnvironmentSpec::iid_1d(vec![[0.9, 0.1], [0.6, 0.4]], vec![0.5, 0.5], 0)
}

fn ensemble(count: usize, keep: bool) -> SlabEnsemble {
    let opts = HarvestOptions { keep_steps: keep, ..HarvestOptions::default() };
    collect_slabs(&iid(), &[1.0], count, 60, 31, &opts).unwrap()
}

fn walk(bits: &[bool]) -> PathSample {
    let mut pos = vec![0i64];
    for b in bits {
        pos.push(pos.last().unwrap() + if *b { 1 } else { -1 });
    }
    PathSample::from_positions_1d(&pos).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn regenerations_separate_past_from_future(bits in prop::collection::vec(prop::bool::weighted(0.7), 1..300),
                                               horizon in 1usize..20) {
        let path = walk(&bits);
        let n = path.len();
        let idx = find_regenerations(&path, &[1.0], horizon);
        for &j in &idx {
            prop_assert!(j >= 1 && j + horizon <= n);
            // strict record over the past
            prop_assert!((0..j).all(|k| path.x(k) < path.x(j)));
            // not undercut within the lookahead
            prop_assert!((j + 1..=j + horizon).all(|k| path.x(k) >= path.x(j)));
        }
        // every unlisted record with a clean lookahead would have been found
        for j in 1..=n.saturating_sub(horizon) {
            let record = (0..j).all(|k| path.x(k) < path.x(j));
            let clean = (j + 1..=j + horizon).all(|k| path.x(k) >= path.x(j));
            prop_assert_eq!(record && clean, idx.contains(&j));
        }
    }
}

#[test]
fn slabs_move_forward_and_their_steps_add_up() {
    let ens = ensemble(5_000, true);
    for i in 0..ens.len() {
        let s = ens.slab(i);
        assert!(s.displacement[0] >= 1 && s.duration >= 1);
        let steps = s.steps.unwrap();
        assert_eq!(steps.len(), s.duration as usize);
        let sum: i64 = steps.iter().map(|k| ens.step_set().step(*k as usize)[0]).sum();
        assert_eq!(sum, s.displacement[0]);
        // parity of a nearest-neighbour walk
        assert_eq!((s.duration as i64 - s.displacement[0]).rem_euclid(2), 0);
    }
}

#[test]
fn lambda_root_holds_on_held_out_slabs() {
    let ens = ensemble(40_000, false);
    let (fit, held) = (ens.subset(0, 20_000), ens.subset(20_000, 40_000));
    let boot = BootstrapOptions { resamples: 50, ..BootstrapOptions::default() };
    for t in [-0.3, -0.1, 0.1, 0.3] {
        let l = lambda_a(&fit, &[t], &boot).unwrap();
        let p = psi(&held, &[t], l.estimate.value);
        assert!((p.value - 1.0).abs() < 3.0 * p.stderr + 1e-12, "theta {t}: psi {} (se {})", p.value, p.stderr);
    }
}

#[test]
fn lambda_is_convex_along_a_grid() {
    let ens = ensemble(20_000, false);
    let boot = BootstrapOptions { resamples: 50, ..BootstrapOptions::default() };
    let vals: Vec<_> = (-4..=4).map(|k| lambda_a(&ens, &[0.1 * k as f64], &boot).unwrap().estimate).collect();
    for w in vals.windows(3) {
        let second = w[0].value + w[2].value - 2.0 * w[1].value;
        let ci = w[0].half_width().max(w[1].half_width()).max(w[2].half_width());
        assert!(second >= -2.0 * ci, "second difference {second}");
    }
}

#[test]
fn slab_durations_are_uncorrelated() {
    let d = slab_diagnostics(&ensemble(20_000, false));
    assert!(d.lag1_autocorrelation.abs() < 3.0 * d.lag1_stderr, "{d:?}");
}

#[test]
fn averaged_rate_vanishes_at_the_speed_and_is_nonnegative() {
    let ens = ensemble(20_000, false);
    let boot = BootstrapOptions { resamples: 50, ..BootstrapOptions::default() };
    let v = lln_velocity(&ens)[0].value;
    let at = averaged_rate(&ens, &[v], &boot).unwrap();
    assert!(at.rate.value.abs() < 1e-9 && at.theta[0].abs() < 1e-6);
    for xi in [0.2, 0.4, 0.8, 0.9] {
        let r = averaged_rate(&ens, &[xi], &boot).unwrap();
        assert!(r.rate.ci_hi >= 0.0 && r.rate.value > -r.rate.half_width(), "xi {xi}: {:?}", r.rate);
    }
}
