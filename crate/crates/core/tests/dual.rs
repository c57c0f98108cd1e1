mod common;

use common::*;
use hedgegame::dual::*;
use hedgegame::hjb::{solve, SurfaceField};
use hedgegame::model::{ModelSpec, Payoff};

/// Zero rates, no drift in wealth: the driver vanishes identically.
fn driftless(c: f64) -> ModelSpec {
    ModelSpec::builder(1)
        .mu_x(|_, _, _, o| o[0] = 0.0)
        .sigma_x(|_, _, _, o| o[0] = 0.2)
        .mu_y(|_, _, _, _, _| 0.0)
        .sigma_y(|_, _, _, u, _, o| o[0] = 0.2 * u[0])
        .u_hat(|_, _, _, z, _, o| {
            o[0] = z[0] / 0.2;
            Ok(())
        })
        .payoff(move |_| c)
        .a_points(vec![vec![0.0]])
        .lipschitz_k(1.0)
        .build()
        .unwrap()
}

fn pde_price(m: &ModelSpec, sigma: f64) -> f64 {
    solve(m, &log_grid(sigma, 200, 400)).unwrap().at_time(0.0).value(&[0.0])
}

#[test]
fn constant_payoff_without_driver_is_exact() {
    let m = driftless(1.25);
    let lat = ControlLattice::uniform(&m, 0.0, 0.0, 4, 1).unwrap();
    let e = dual_value_lsmc(&m, 0.0, 0.0, &[0.0], &lat, 2, 5000, 3).unwrap();
    assert!((e.value - 1.25).abs() < 1e-12, "{e:?}");
    assert!(e.std_error < 1e-12);
    let r = dpp_check(&m, 0.0, 0.0, &[0.0], 0.5, &lat, 5000, 3).unwrap();
    assert!(r.difference < 1e-12 && r.passed, "{r:?}");
}

#[test]
fn black_scholes_matches_the_pde_price() {
    let m = bs_model(0.2, Payoff::call(1.0));
    let v = pde_price(&m, 0.2);
    assert!(rel_err(v, bs_call(1.0, 1.0, 0.2, 1.0, 0.0)) < 5e-3);
    let lat = ControlLattice::uniform(&m, 0.0, 0.0, 2, 1).unwrap();
    let e = dual_value_lsmc(&m, 0.0, 0.0, &[0.0], &lat, 2, 100_000, 11).unwrap();
    assert!((e.value - v).abs() <= 2.0 * e.std_error + 0.01 * v, "{e:?} vs {v}");
    assert!(e.std_error > 0.0 && e.std_error < 2e-3);
    assert_eq!((e.n_paths, e.basis_degree, e.knot_count), (100_000, 2, 2));
}

#[test]
fn uncertain_volatility_is_approached_from_below() {
    let m = uv_model(Payoff::call(1.0));
    let v = pde_price(&m, 0.3);
    let est: Vec<DualEstimate> = [2, 4, 8]
        .iter()
        .map(|&k| {
            let lat = ControlLattice::uniform(&m, 0.0, 0.0, k, 1).unwrap();
            dual_value_lsmc(&m, 0.0, 0.0, &[0.0], &lat, 2, 100_000, 5).unwrap()
        })
        .collect();
    for e in &est {
        assert!(e.value <= v + 2.0 * e.std_error, "{e:?} above {v}");
        assert!((e.value - v).abs() <= 2.0 * e.std_error + 0.01 * v, "{e:?} vs {v}");
    }
    for w in est.windows(2) {
        let noise = 2.0 * w[0].std_error.hypot(w[1].std_error);
        assert!(w[1].value >= w[0].value - noise, "{:?} -> {:?}", w[0], w[1]);
    }
}

#[test]
fn shaken_family_is_monotone_in_eps() {
    let m = uv_model(Payoff::call(1.0));
    let l0 = ControlLattice::uniform(&m, 0.0, 0.0, 4, 3).unwrap();
    let l1 = ControlLattice::uniform(&m, 0.1, 0.0, 4, 3).unwrap();
    assert_eq!(l0.gamma_points.len(), 2);
    assert_eq!(l1.gamma_points.len(), 10);
    let w0 = dual_value_lsmc(&m, 0.0, 0.0, &[0.0], &l0, 2, 20_000, 8).unwrap();
    let w1 = dual_value_lsmc(&m, 0.1, 0.0, &[0.0], &l1, 2, 20_000, 8).unwrap();
    assert!(w0.value <= w1.value + 2.0 * w0.std_error.hypot(w1.std_error), "{w0:?} {w1:?}");
}

#[test]
fn terminal_lattice_collapses_to_the_payoff() {
    let m = bs_model(0.2, Payoff::call(1.0));
    let lat = ControlLattice::uniform(&m, 0.05, 1.0, 4, 3).unwrap();
    assert_eq!(lat.time_knots, vec![1.0]);
    let e = dual_value_lsmc(&m, 0.05, 1.0, &[0.3], &lat, 2, 100, 1).unwrap();
    assert_eq!(e.value, (0.3f64.exp() - 1.0) + 0.1);
    assert_eq!(e.std_error, 0.0);
}

#[test]
fn dynamic_programming_composition_agrees() {
    for m in [bs_model(0.2, Payoff::call(1.0)), uv_model(Payoff::call(1.0))] {
        let lat = ControlLattice::uniform(&m, 0.0, 0.0, 4, 1).unwrap();
        let r = dpp_check(&m, 0.0, 0.0, &[0.0], 0.5, &lat, 50_000, 21).unwrap();
        assert!(r.passed, "{r:?}");
        assert!((r.difference - (r.direct.value - r.composed.value).abs()).abs() < 1e-15);
    }
}

#[test]
fn estimates_do_not_depend_on_thread_count() {
    let m = uv_model(Payoff::call(1.0));
    let lat = ControlLattice::uniform(&m, 0.05, 0.0, 3, 3).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let e = dual_value_lsmc(&m, 0.05, 0.0, &[0.0], &lat, 2, 10_000, 4).unwrap();
            let r = dpp_check(&m, 0.05, 0.0, &[0.0], 0.4, &lat, 10_000, 4).unwrap();
            (e, r)
        })
    };
    let one = run(1);
    assert_eq!(one, run(1));
    assert_eq!(one, run(4));
}

#[test]
fn seeds_change_the_sample() {
    let m = bs_model(0.2, Payoff::call(1.0));
    let lat = ControlLattice::uniform(&m, 0.0, 0.0, 2, 1).unwrap();
    let a = dual_value_lsmc(&m, 0.0, 0.0, &[0.0], &lat, 2, 5000, 1).unwrap();
    let b = dual_value_lsmc(&m, 0.0, 0.0, &[0.0], &lat, 2, 5000, 2).unwrap();
    assert_ne!(a.value, b.value);
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = bs_model(0.2, Payoff::call(1.0));
    let good = ControlLattice::uniform(&m, 0.0, 0.0, 3, 1).unwrap();
    let run = |lat: &ControlLattice, eps: f64, deg: usize| dual_value_lsmc(&m, eps, 0.0, &[0.0], lat, deg, 100, 1);
    assert!(run(&good, 0.0, 0).is_err());
    assert!(run(&good, 0.0, 9).is_err());
    // knots must include t0 and T
    let mut lat = good.clone();
    lat.time_knots = vec![0.0, 0.5];
    assert!(run(&lat, 0.0, 2).is_err());
    let mut lat = good.clone();
    lat.time_knots = vec![0.0, 0.5, 0.5, 1.0];
    assert!(run(&lat, 0.0, 2).is_err());
    // a shift needs a positive eps
    let mut lat = good.clone();
    lat.gamma_points = vec![GammaPoint { a_index: 0, shake: vec![0.0, 0.01] }];
    assert!(run(&lat, 0.0, 2).is_err());
    assert!(run(&lat, 0.01, 2).is_ok());
    let mut lat = good.clone();
    lat.gamma_points = vec![GammaPoint { a_index: 1, shake: vec![0.0, 0.0] }];
    assert!(run(&lat, 0.0, 2).is_err());
    let mut lat = good.clone();
    lat.gamma_points.clear();
    assert!(run(&lat, 0.0, 2).is_err());
    assert!(dpp_check(&m, 0.0, 0.0, &[0.0], 1.0, &good, 100, 1).is_err());
    assert!(ControlLattice::uniform(&m, 0.0, 0.0, 1, 1).is_err());
}
