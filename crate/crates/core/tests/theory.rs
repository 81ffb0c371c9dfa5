use meshserve::config::{bundled_scenario, parse_theory};
use meshserve::theory::{
    bridge_scenario, cross_validate, detect_equilibrium, group_share, group_share_derivative, integrate,
    payoff_deltas, q_bar, share_derivative, shares, stake_derivative, win_prob, BridgeMapping, TheoryError,
    TheoryParams, TrajectoryPoint,
};
use meshserve::validate::rk4_order;
use proptest::prelude::*;
use std::path::Path;

fn arb_params(n: std::ops::Range<usize>) -> impl Strategy<Value = TheoryParams> {
    n.prop_flat_map(|n| {
        (
            prop::collection::vec(0.0..=1.0f64, n),
            prop::collection::vec(0.01..1.0f64, n),
            prop::collection::vec(0.1..100.0f64, n),
            (0.1..50.0f64, 0.0..3.0f64, 0.0..=1.0f64, 0.0..3.0f64, 0.0..3.0f64, 0.1..2.0f64),
        )
    })
    .prop_map(|(q, c, s0, (lambda, r, p_d, r_add, penalty, eta))| TheoryParams {
        q,
        c,
        lambda,
        r,
        p_d,
        r_add,
        penalty,
        eta,
        s0,
    })
}

proptest! {
    #[test]
    fn shares_stay_on_the_simplex(params in arb_params(1..8)) {
        let p = shares(&params.s0);
        let s: f64 = params.s0.iter().sum();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let dp = share_derivative(&p, s, &params);
        prop_assert!(dp.iter().sum::<f64>().abs() <= 1e-12 * (1.0 + dp.iter().map(|x| x.abs()).sum::<f64>()));
        for i in 0..p.len() {
            let w = win_prob(i, &p, &params);
            prop_assert!((0.0..=1.0).contains(&w));
        }
    }

    #[test]
    fn share_derivative_matches_quotient_rule(params in arb_params(1..8)) {
        let s = &params.s0;
        let total: f64 = s.iter().sum();
        let ds = stake_derivative(s, &params);
        let dtotal: f64 = ds.iter().sum();
        let dp = share_derivative(&shares(s), total, &params);
        for i in 0..s.len() {
            let oracle = (ds[i] * total - s[i] * dtotal) / (total * total);
            prop_assert!((oracle - dp[i]).abs() <= 1e-10 * (1.0 + oracle.abs()), "{} vs {}", oracle, dp[i]);
        }
    }

    #[test]
    fn group_derivative_is_sum_of_members(params in arb_params(2..8), mask in prop::collection::vec(any::<bool>(), 8)) {
        let n = params.n();
        let group: Vec<usize> = (0..n).filter(|i| mask[*i]).collect();
        let p = shares(&params.s0);
        let total: f64 = params.s0.iter().sum();
        let dp = share_derivative(&p, total, &params);
        let sum: f64 = group.iter().map(|&i| dp[i]).sum();
        let g = group_share_derivative(&group, &p, total, &params);
        prop_assert!((sum - g).abs() <= 1e-10 * (1.0 + sum.abs()), "{} vs {}", sum, g);
    }

    /// A group that is at least as good and as cheap as everyone else never
    /// loses share.
    #[test]
    fn dominant_group_share_never_falls(mut params in arb_params(2..6), k in 1usize..5) {
        let n = params.n();
        let k = k.min(n - 1);
        let (q_hi, c_lo) = (params.q.iter().cloned().fold(0.0, f64::max), params.c.iter().cloned().fold(1.0, f64::min));
        for i in 0..k {
            params.q[i] = q_hi;
            params.c[i] = c_lo;
        }
        let group: Vec<usize> = (0..k).collect();
        let traj = integrate(&params, 2.0, 0.01);
        // Shares are undefined once every stake is gone.
        prop_assume!(!matches!(traj, Err(TheoryError::NonFiniteState { .. })));
        let traj = traj.unwrap();
        for w in traj.windows(2) {
            prop_assert!(group_share(&w[1].p, &group) >= group_share(&w[0].p, &group) - 1e-12);
        }
        prop_assert!(detect_equilibrium(&traj, &group).monotone_after.is_some());
    }
}

fn two_node() -> TheoryParams {
    parse_theory(Path::new("bundled:two_node")).unwrap().params
}

#[test]
fn identical_nodes_keep_their_shares() {
    let params = TheoryParams {
        q: vec![0.5; 4],
        c: vec![0.3; 4],
        lambda: 10.0,
        r: 1.0,
        p_d: 0.3,
        r_add: 2.0,
        penalty: 1.0,
        eta: 1.0,
        s0: vec![1.0, 2.0, 3.0, 4.0],
    };
    let traj = integrate(&params, 20.0, 0.01).unwrap();
    let p0 = &traj[0].p;
    for pt in &traj {
        for (a, b) in pt.p.iter().zip(p0) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn two_node_run_converges_to_the_fine_reference() {
    let params = two_node();
    let coarse = integrate(&params, 20.0, 0.05).unwrap();
    let fine = integrate(&params, 20.0, 0.001).unwrap();
    assert!(coarse.windows(2).all(|w| w[1].p[0] > w[0].p[0]));
    let (a, b) = (coarse.last().unwrap(), fine.last().unwrap());
    assert!((a.t - b.t).abs() < 1e-9);
    assert!((a.p[0] - b.p[0]).abs() < 1e-6, "{} vs {}", a.p[0], b.p[0]);
    assert!(rk4_order(&params) >= 3.5);
}

#[test]
fn payoff_example_by_hand() {
    let params = TheoryParams {
        q: vec![0.9, 0.5],
        c: vec![0.2, 0.2],
        lambda: 10.0,
        r: 1.0,
        p_d: 0.5,
        r_add: 2.0,
        penalty: 1.0,
        eta: 1.0,
        s0: vec![1.0, 1.0],
    };
    let p = [0.5, 0.5];
    assert!((q_bar(&p, &params) - 0.7).abs() < 1e-12);
    // Q = (0.6, 0.4); Δ = 0.8 + 0.5(2Q − (1 − Q)).
    let d = payoff_deltas(&p, &params);
    assert!((d[0] - (0.8 + 0.5 * (1.2 - 0.4))).abs() < 1e-12);
    assert!((d[1] - (0.8 + 0.5 * (0.8 - 0.6))).abs() < 1e-12);
}

fn point(t: f64, p0: f64) -> TrajectoryPoint {
    TrajectoryPoint {
        t,
        s: vec![p0, 1.0 - p0],
        p: vec![p0, 1.0 - p0],
        q_bar: 0.0,
        delta: vec![0.0; 2],
        delta_bar: 0.0,
    }
}

#[test]
fn detector_on_handmade_series() {
    let rising: Vec<_> = (0..10).map(|k| point(k as f64, 0.1 + 0.05 * k as f64)).collect();
    assert_eq!(detect_equilibrium(&rising, &[0]).monotone_after, Some(0.0));
    // The complement falls all the way to the end.
    assert_eq!(detect_equilibrium(&rising, &[1]).monotone_after, None);
    let dip: Vec<_> = [0.5, 0.4, 0.3, 0.35, 0.4]
        .iter()
        .enumerate()
        .map(|(k, p)| point(k as f64, *p))
        .collect();
    let r = detect_equilibrium(&dip, &[0]);
    assert_eq!(r.monotone_after, Some(2.0));
    assert_eq!((r.initial_p_h, r.terminal_p_h), (0.5, 0.4));
}

#[test]
fn blow_up_is_reported() {
    let params = TheoryParams {
        q: vec![1.0, 0.0],
        c: vec![0.01, 0.01],
        lambda: 1e300,
        r: 1e10,
        p_d: 0.0,
        r_add: 0.0,
        penalty: 0.0,
        eta: 1e10,
        s0: vec![1.0, 1.0],
    };
    assert!(matches!(integrate(&params, 10.0, 0.1), Err(TheoryError::NonFiniteState { .. })));
    assert_eq!(integrate(&two_node(), 1.0, 0.0), Err(TheoryError::InvalidStep));
}

#[test]
fn bridge_scenario_matches_the_bundled_file() {
    let cfg = parse_theory(Path::new("bundled:bridge")).unwrap();
    let built = bridge_scenario(&cfg.params, cfg.horizon, &cfg.bridge).unwrap();
    assert_eq!(built, bundled_scenario("bridge").unwrap());
}

#[test]
fn cross_validation_gap_shrinks_with_seeds() {
    let cfg = parse_theory(Path::new("bundled:bridge")).unwrap();
    let few = cross_validate(&cfg.params, &cfg.bridge, cfg.horizon, cfg.dt, 4).unwrap();
    let many = cross_validate(&cfg.params, &cfg.bridge, cfg.horizon, cfg.dt, 64).unwrap();
    assert!(many.gap < few.gap, "{} vs {}", many.gap, few.gap);
    assert!(many.gap <= 0.05 && many.ordering_agrees);

    let mut no_duels = cfg.params.clone();
    no_duels.p_d = 0.0;
    let flat = cross_validate(&no_duels, &BridgeMapping::default(), 50.0, cfg.dt, 16).unwrap();
    assert!(flat.gap <= 0.05, "{}", flat.gap);
}
