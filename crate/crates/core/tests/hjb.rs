mod common;

use common::*;
use hedgegame::hjb::{eval, policy, residual, solve, solve_with, GridSpec, SolveOptions};
use hedgegame::model::{FinanceSpec, ModelSpec, Payoff};

#[test]
fn constant_payoff_any_adverse_set() {
    let m = ModelSpec::uncertain_vol(1, 0.03, 0.0, 0.0, Payoff::constant(1.0), vec![vec![0.1], vec![0.2], vec![0.4]], 1.0).unwrap();
    let s = solve(&m, &GridSpec::uniform_1d(1.0, 400, 0.0, 1.0, 40)).unwrap();
    assert!(s.values().iter().all(|&v| v == 1.0));
    let r = residual(&s, &m).unwrap().summary();
    assert!(r.max_abs <= 1e-9);
}

#[test]
fn call_spread_matches_closed_form() {
    let m = bs_model(0.2, Payoff::call_spread(1.0, 1.4));
    let s = solve(&m, &log_grid(0.2, 200, 400)).unwrap();
    let v = eval(&s, 0.0, &[0.0]).unwrap().y;
    let oracle = bs_call(1.0, 1.0, 0.2, 1.0, 0.0) - bs_call(1.0, 1.4, 0.2, 1.0, 0.0);
    assert!(rel_err(v, oracle) < 5e-3, "{v} vs {oracle}");
    assert!(policy(&s).iter().all(|&p| p == 0));
}

#[test]
fn uncertain_vol_call_picks_high_vol() {
    let m = uv_model(Payoff::call(1.0));
    let s = solve(&m, &log_grid(0.3, 200, 400)).unwrap();
    let v = eval(&s, 0.0, &[0.0]).unwrap().y;
    let oracle = bs_call(1.0, 1.0, 0.3, 1.0, 0.0);
    assert!(rel_err(v, oracle) < 1e-2, "{v} vs {oracle}");
}

#[test]
fn uncertain_vol_concave_payoff_picks_low_vol() {
    let m = uv_model(Payoff::call(1.0).scaled(-1.0));
    let s = solve(&m, &log_grid(0.3, 200, 400)).unwrap();
    let v = eval(&s, 0.0, &[0.0]).unwrap().y;
    let oracle = -bs_call(1.0, 1.0, 0.1, 1.0, 0.0);
    assert!(rel_err(v, oracle) < 1e-2, "{v} vs {oracle}");
}

/// Share of interior nodes with a clear gamma sign where the policy picks
/// the volatility that sign calls for.
fn policy_agreement(payoff: Payoff) -> f64 {
    let m = uv_model(payoff);
    let g = log_grid(0.3, 200, 400);
    let s = solve(&m, &g).unwrap();
    let (h, ns) = (g.dx(0), g.n_space());
    let (mut agree, mut total) = (0usize, 0usize);
    for n in 0..g.n_t() - 1 {
        let next = s.layer(n + 1);
        for i in 1..ns - 1 {
            // d_xx - d_x (backward, as upwinded) of the layer the step reads
            let gamma = (next[i + 1] - 2.0 * next[i] + next[i - 1]) / (h * h) - (next[i] - next[i - 1]) / h;
            if gamma.abs() <= 1e-3 {
                continue;
            }
            total += 1;
            let want = if gamma > 0.0 { 1 } else { 0 };
            if policy(&s)[n * ns + i] as usize == want {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

#[test]
fn policy_follows_gamma_sign() {
    assert!(policy_agreement(Payoff::call(1.0)) >= 0.95);
    assert!(policy_agreement(Payoff::call(1.0).scaled(-1.0)) >= 0.95);
}

fn away_from_kinks(kinks: &[f64]) -> impl Fn(f64, &[f64]) -> bool + '_ {
    move |t, x| t < 0.9 && kinks.iter().all(|k| (x[0] - k.ln()).abs() > 0.1) && x[0].abs() < 0.8
}

#[test]
fn residual_small_and_shrinking() {
    let m = bs_model(0.2, Payoff::call_spread(1.0, 1.4));
    let coarse = residual(&solve(&m, &log_grid(0.2, 100, 200)).unwrap(), &m).unwrap();
    let fine = residual(&solve(&m, &log_grid(0.2, 200, 400)).unwrap(), &m).unwrap();
    let kinks = [1.0, 1.4];
    let rc = coarse.summary_where(away_from_kinks(&kinks));
    let rf = fine.summary_where(away_from_kinks(&kinks));
    assert!(rf.max_abs <= 5e-2, "{rf:?}");
    assert!(rc.max_abs / rf.max_abs >= 1.5, "{rc:?} vs {rf:?}");
}

#[test]
fn scheme_is_monotone_in_terminal_data() {
    let m = uv_model(Payoff::call(1.0));
    let g = log_grid(0.3, 100, 200);
    let base = solve(&m, &g).unwrap();
    let opts = SolveOptions { terminal_shift: 0.1, ..Default::default() };
    let up = solve_with(&m, &g, &opts).unwrap();
    assert!(base.values().iter().zip(up.values()).all(|(a, b)| b >= a));
    // a pointwise larger payoff that is not a constant shift
    let bigger = m.with_payoff("call+bump", |x| (x[0].exp() - 1.0).max(0.0) + 0.05 * (-x[0] * x[0]).exp());
    let s2 = solve(&bigger, &g).unwrap();
    assert!(base.values().iter().zip(s2.values()).all(|(a, b)| b >= a));
}

#[test]
fn larger_adverse_set_never_lowers_value() {
    let payoff = Payoff::call_spread(0.9, 1.3);
    let small = ModelSpec::uncertain_vol(1, 0.0, 0.0, 0.0, payoff, vec![vec![0.2]], 1.0).unwrap();
    let large = small.with_a_points(vec![vec![0.1], vec![0.2], vec![0.3]]).unwrap();
    let g = log_grid(0.3, 150, 400);
    let vs = solve(&small, &g).unwrap();
    let vl = solve(&large, &g).unwrap();
    // linear extrapolation on the faces is not monotone; it leaks ~1e-10
    assert!(vs.values().iter().zip(vl.values()).all(|(a, b)| *b >= a - 1e-8));
}

fn fixed_rate_model(sigma: f64, r: f64, payoff: Payoff) -> ModelSpec {
    // same market with the cash account earning and paying r
    let base = ModelSpec::uncertain_vol(1, 0.0, r, r, payoff, vec![vec![sigma]], 1.0).unwrap();
    ModelSpec::builder(1)
        .mu_x(|_, _, _, o| o[0] = 0.0)
        .sigma_x(move |_, _, _, o| o[0] = sigma)
        .mu_y(move |_, _, y, u, _| u[0] * 0.5 * sigma * sigma + r * (y - u[0]))
        .sigma_y(move |_, _, _, u, _, o| o[0] = sigma * u[0])
        .u_hat(move |_, _, _, z, _, o| {
            o[0] = z[0] / sigma;
            Ok(())
        })
        .upwind_drift(move |_, _, _, o| o[0] = 0.5 * sigma * sigma)
        .payoff(move |x| base.payoff(x))
        .a_points(vec![vec![sigma]])
        .lipschitz_k(sigma)
        .build()
        .unwrap()
}

#[test]
fn equal_rates_match_linear_oracle() {
    let r = 0.03;
    let m = ModelSpec::uncertain_vol(1, 0.0, r, r, Payoff::call(1.0), vec![vec![0.2]], 1.0).unwrap();
    let oracle = fixed_rate_model(0.2, r, Payoff::call(1.0));
    let g = log_grid(0.2, 200, 400);
    let a = solve(&m, &g).unwrap();
    let b = solve(&oracle, &g).unwrap();
    let diff = a.values().iter().zip(b.values()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(diff <= 1e-10, "{diff}");
    let v = eval(&a, 0.0, &[0.0]).unwrap().y;
    assert!(rel_err(v, bs_call(1.0, 1.0, 0.2, 1.0, r)) < 5e-3);
}

#[test]
fn two_rates_bracketed_and_close_to_borrowing_oracle() {
    let m = ModelSpec::uncertain_vol(1, 0.0, 0.02, 0.05, Payoff::call(1.0), vec![vec![0.2]], 1.0).unwrap();
    let g = log_grid(0.2, 200, 400);
    let v = eval(&solve(&m, &g).unwrap(), 0.0, &[0.0]).unwrap().y;
    let hi = eval(&solve(&fixed_rate_model(0.2, 0.05, Payoff::call(1.0)), &g).unwrap(), 0.0, &[0.0]).unwrap().y;
    assert!(rel_err(v, hi) < 5e-3, "{v} vs {hi}");
}

#[test]
fn refinement_is_cauchy() {
    let m = bs_model(0.2, Payoff::call_spread(1.0, 1.4));
    let v: Vec<f64> = [(50, 50), (100, 200), (200, 800)]
        .iter()
        .map(|&(nx, nt)| eval(&solve(&m, &log_grid(0.2, nx, nt)).unwrap(), 0.0, &[0.0]).unwrap().y)
        .collect();
    assert!((v[1] - v[2]).abs() < (v[0] - v[1]).abs());
}

#[test]
fn clamp_payoff_boundary_runs() {
    let m = ModelSpec::uncertain_vol(1, 0.0, 0.02, 0.05, Payoff::put(1.0), vec![vec![0.2]], 1.0).unwrap();
    let g = log_grid(0.2, 100, 200).with_boundary(hedgegame::hjb::BoundaryMode::ClampPayoff);
    let s = solve(&m, &g).unwrap();
    let left = s.value_at(0, &[0]);
    let expect = m.payoff(&[-1.2]) * (-0.02f64).exp();
    assert!((left - expect).abs() < 1e-14);
}

#[test]
fn finance_basket_in_two_dimensions() {
    // uncorrelated 2-d basket call, coarse grid; value bracketed by vol extremes
    let f = FinanceSpec::new(
        2,
        |_, _, _, o| o.fill(0.0),
        |_, _, a, o| o.copy_from_slice(&[a[0], 0.0, 0.3 * a[0], 0.9 * a[0]]),
        |_, _, _| 0.0,
        |_, _, _| 0.0,
    );
    let m = ModelSpec::finance_model(f, Payoff::call(1.0), vec![vec![0.15], vec![0.25]], 1.0, 0.3, "basket").unwrap();
    let g = GridSpec::new(1.0, 400, vec![-1.2, -1.2], vec![1.2, 1.2], vec![40, 40]);
    let s = solve(&m, &g).unwrap();
    assert!(s.stats().monotone_margin >= 0.0 && s.stats().non_dominant_nodes == 0);
    let v = eval(&s, 0.0, &[0.0, 0.0]).unwrap().y;
    assert!(v > 0.0 && v < 0.2, "{v}");
}

