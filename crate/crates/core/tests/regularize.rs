mod common;

use common::*;
use hedgegame::hjb::{solve, solve_with, GridSpec, SolveOptions, SurfaceField, TimeView};
use hedgegame::model::Payoff;
use hedgegame::regularize::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_uv_grid() -> GridSpec {
    GridSpec::uniform_1d(1.0, 400, 0.0, 1.8, 120)
}

#[test]
fn zero_shake_reproduces_plain_solve() {
    let m = uv_model(Payoff::call(1.0));
    let g = small_uv_grid();
    let a = solve(&m, &g).unwrap();
    let b = solve_shaken(&m, &g, 0.0, None).unwrap();
    assert_eq!(a.values(), b.surface.values());
    assert_eq!(a.policy_indices(), b.surface.policy_indices());
}

#[test]
fn constant_coefficients_shift_by_two_eps() {
    let m = uv_model(Payoff::call(1.0));
    let g = small_uv_grid();
    let w = solve_shaken(&m, &g, 0.1, None).unwrap();
    let shifted = solve_with(&m, &g, &SolveOptions { terminal_shift: 0.2, ..Default::default() }).unwrap();
    let plain = solve(&m, &g).unwrap();
    for ((a, b), c) in w.surface.values().iter().zip(shifted.values()).zip(plain.values()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        assert!((a - c - 0.2).abs() <= 1e-10);
    }
}

#[test]
fn shaken_family_is_monotone_and_above_payoff_near_maturity() {
    let m = uv_model(Payoff::call(1.0));
    let g = small_uv_grid();
    let w1 = solve_shaken(&m, &g, 0.05, None).unwrap();
    let w2 = solve_shaken(&m, &g, 0.1, None).unwrap();
    assert!(w1.surface.values().iter().zip(w2.surface.values()).all(|(a, b)| a <= b));

    let ce = w1.c_eps();
    assert!(ce > 0.0 && ce.is_finite());
    let ns = g.n_space();
    let mut checked = 0;
    for n in 0..g.n_t() {
        let t = g.t_at(n);
        if t < 1.0 - ce {
            continue;
        }
        for s in 0..ns {
            let x = g.x_coord(0, s);
            assert!(w1.surface.values()[n * ns + s] >= m.payoff(&[x]) + 0.05 - 1e-12);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn envelope_of_abs_is_huber() {
    // w(z) = |z| on a fine grid; the Moreau envelope is |z| - 1/(4k) beyond
    // 1/(2k) and k z^2 inside
    let k = 10.0;
    let n = 2001;
    let h = 2.0 / (n - 1) as f64;
    let z: Vec<f64> = (0..n).map(|i| -1.0 + i as f64 * h).collect();
    let w: Vec<f64> = z.iter().map(|v| v.abs()).collect();
    let r = inf_convolution(&w, &[n], &axis_costs(k, &[h], &[1.0]));
    for (i, &zi) in z.iter().enumerate() {
        let exact = if zi.abs() >= 0.5 / k { zi.abs() - 0.25 / k } else { k * zi * zi };
        // the minimizer is restricted to nodes
        assert!((r.values[i] - exact).abs() <= k * h * h + 1e-12, "z={zi}: {} vs {exact}", r.values[i]);
    }
}

fn brute(values: &[f64], shape: &[usize], costs: &[f64]) -> Vec<f64> {
    let (n0, n1) = (shape[0], shape[1]);
    let mut out = vec![f64::INFINITY; values.len()];
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            let mut best = f64::INFINITY;
            for j0 in 0..n0 {
                for j1 in 0..n1 {
                    let (d0, d1) = (i0 as f64 - j0 as f64, i1 as f64 - j1 as f64);
                    // same association as the separable passes
                    let v = (values[j0 * n1 + j1] + costs[0] * (d0 * d0)) + costs[1] * (d1 * d1);
                    best = best.min(v);
                }
            }
            out[i0 * n1 + i1] = best;
        }
    }
    out
}

#[test]
fn inf_convolution_equals_brute_force_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vals: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
    let costs = axis_costs(3.0, &[1.0, 1.0], &[1.0, 1.0]);
    let r = inf_convolution(&vals, &[20, 20], &costs);
    assert_eq!(r.values, brute(&vals, &[20, 20], &costs));
}

#[test]
fn inf_convolution_properties() {
    let m = uv_model(Payoff::call(1.0));
    let g = GridSpec::uniform_1d(1.0, 100, 0.0, 1.8, 60);
    let w = solve(&m, &g).unwrap();
    let shape = [g.n_t(), g.n_x(0)];
    let spacing = [g.dt(), g.dx(0)];
    let k = 200.0;
    let costs = axis_costs(k, &spacing, &[1.0, 1.0]);
    let once = inf_convolution(w.values(), &shape, &costs);
    let twice = inf_convolution(&once.values, &shape, &costs);
    let first_change = w.values().iter().zip(&once.values).map(|(a, b)| a - b).fold(0.0, f64::max);
    let second_change = once.values.iter().zip(&twice.values).map(|(a, b)| a - b).fold(0.0, f64::max);
    assert!(w.values().iter().zip(&once.values).all(|(a, b)| b <= a));
    assert!(second_change <= first_change);

    let sup = w.max_abs();
    let disp = max_displacement_sq(&shape, &spacing, &[1.0, 1.0], &once.argmin);
    assert!(disp <= 2.0 * sup / k);

    // w^k - k |z|^2 is midpoint concave along each axis
    let (nt, nx) = (shape[0], shape[1]);
    let f = |n: usize, i: usize| {
        let (t, x) = (g.t_at(n), g.x_coord(0, i));
        once.values[n * nx + i] - k * (t * t + x * x)
    };
    for n in 1..nt - 1 {
        for i in 1..nx - 1 {
            let scale = 1e-9 * (1.0 + k);
            assert!(f(n, i + 1) + f(n, i - 1) - 2.0 * f(n, i) <= scale);
            assert!(f(n + 1, i) + f(n - 1, i) - 2.0 * f(n, i) <= scale);
        }
    }
}

fn tabulate(g: &GridSpec, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let ns = g.n_space();
    let mut v = vec![0.0; g.n_nodes()];
    for n in 0..g.n_t() {
        for i in 0..ns {
            v[n * ns + i] = f(g.t_at(n), g.x_coord(0, i));
        }
    }
    v
}

#[test]
fn mollifier_constant_and_linear() {
    let g = GridSpec::uniform_1d(1.0, 50, 0.0, 2.0, 200);
    let c = mollify(&g, vec![3.25; g.n_nodes()], 0.1, 0.0, 1.0);
    let l = mollify(&g, tabulate(&g, |_, x| x), 0.1, 0.0, 1.0);
    for &(t, x) in &[(0.5, 0.0), (0.93, -1.3), (0.21, 0.777), (1.0, 1.5)] {
        let p = c.at_time(t).pack(&[x]);
        assert!((p.y - 3.25).abs() <= 1e-10);
        assert!(p.q.abs() <= 1e-10 && p.p[0].abs() <= 1e-10 && p.m[0].abs() <= 1e-10);
        let p = l.at_time(t).pack(&[x]);
        assert!((p.y - x).abs() <= 1e-10);
        assert!((p.p[0] - 1.0).abs() <= 1e-10 && p.m[0].abs() <= 1e-10 && p.q.abs() <= 1e-10);
    }
}

/// Piecewise-linear interpolant of `f` on the nodes of `g`.
fn interp(g: &GridSpec, f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = g.dx(0);
    let u = ((x - g.x_min[0]) / h).clamp(0.0, g.x_steps[0] as f64);
    let i = (u.floor() as usize).min(g.x_steps[0] - 1);
    let w = u - i as f64;
    (1.0 - w) * f(g.x_coord(0, i)) + w * f(g.x_coord(0, i + 1))
}

#[test]
fn mollifier_quadratic_moment() {
    let g = GridSpec::uniform_1d(1.0, 20, 0.0, 2.0, 400);
    let delta = 0.1;
    let s = mollify(&g, tabulate(&g, |_, x| x * x), delta, 0.0, 1.0);
    // second moment of the spatial kernel by composite Simpson
    let bump = |u: f64| if u.abs() < 1.0 { (1.0 - u * u).powi(4) } else { 0.0 };
    let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize| {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    };
    let mass = simpson(&bump, -1.0, 1.0, 2000);
    let m2 = simpson(&|u| u * u * bump(u), -1.0, 1.0, 2000) / mass;
    let h = g.dx(0);
    for &x in &[0.0, 0.3141, -0.77] {
        let y = s.eval(0.5, &[x]);
        // exact convolution of the interpolant, integrated cell by cell
        let oracle = simpson(&|v| interp(&g, |z| z * z, x + delta * v) * bump(v), -1.0, 1.0, 20000) / mass;
        assert!((y - oracle).abs() <= 1e-9, "x={x}: {y} vs {oracle}");
        // x^2 + m2 delta^2, plus the mean interpolation error h^2/6
        assert!((y - (x * x + m2 * delta * delta + h * h / 6.0)).abs() <= 1e-7);
    }
}

#[test]
fn mollifier_derivatives_match_finite_differences() {
    let m = uv_model(Payoff::call(1.0));
    let g = GridSpec::uniform_1d(1.0, 400, 0.0, 1.8, 200).with_t_start(-0.1);
    let g = GridSpec { t_steps: 440, ..g };
    let w = solve(&m, &g).unwrap();
    let s = mollify(&g, w.values().to_vec(), 0.05, 0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-4;
    let rel = |a: f64, b: f64, scale: f64| (a - b).abs() / b.abs().max(scale);
    for _ in 0..1000 {
        let t = rng.random_range(0.0..0.99);
        let x = rng.random_range(-1.2..1.2);
        let p = s.at_time(t).pack(&[x]);
        let (vp, vm) = (s.eval(t, &[x + h]), s.eval(t, &[x - h]));
        let fd_p = (vp - vm) / (2.0 * h);
        let fd_m = (vp - 2.0 * p.y + vm) / (h * h);
        let fd_q = (s.eval(t + h, &[x]) - s.eval(t - h, &[x])) / (2.0 * h);
        // derivatives of size below 1e-2 are compared absolutely
        assert!(rel(p.p[0], fd_p, 1e-2) <= 1e-4, "p at ({t},{x}): {} vs {fd_p}", p.p[0]);
        assert!(rel(p.m[0], fd_m, 1e-2) <= 1e-4, "m at ({t},{x}): {} vs {fd_m}", p.m[0]);
        assert!(rel(p.q, fd_q, 1e-2) <= 1e-4, "q at ({t},{x}): {} vs {fd_q}", p.q);
    }
}

#[test]
fn mollifier_smooth_across_cell_boundaries() {
    let m = uv_model(Payoff::call(1.0));
    let g = GridSpec::uniform_1d(1.0, 200, 0.0, 1.8, 100);
    let w = solve(&m, &g).unwrap();
    let s = mollify(&g, w.values().to_vec(), 0.1, 0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let i = rng.random_range(20..80);
        let x = g.x_coord(0, i);
        let t = g.t_at(rng.random_range(10..150));
        let (a, b) = (s.at_time(t).pack(&[x - 1e-12]), s.at_time(t).pack(&[x + 1e-12]));
        let (c, d) = (s.at_time(t - 1e-12).pack(&[x]), s.at_time(t + 1e-12).pack(&[x]));
        for (u, v) in [(&a, &b), (&c, &d)] {
            assert!((u.y - v.y).abs() <= 1e-9);
            assert!((u.q - v.q).abs() <= 1e-9 * (1.0 + u.q.abs()));
            assert!((u.p[0] - v.p[0]).abs() <= 1e-9 * (1.0 + u.p[0].abs()));
            assert!((u.m[0] - v.m[0]).abs() <= 1e-9 * (1.0 + u.m[0].abs()));
        }
    }
}

#[test]
fn verify_zero_dynamics_constant() {
    let m = zero_model(2.0);
    let g = GridSpec::uniform_1d(1.0, 50, 0.0, 1.0, 50);
    let w = solve(&m, &g).unwrap();
    let s = mollify(&g, w.values().to_vec(), 0.1, 0.0, 1.0);
    let check = CheckGrid::new(BoxSet::central(&g, 0.5), 50, vec![100]);
    let r = verify_supersolution(&s, &m, &check, 1e-3).unwrap();
    // exact zero up to roundoff in the kernel derivative weights
    assert!(r.min_residual.abs() <= 1e-10);
    assert!(r.passed);
}

#[test]
fn verify_flags_corrupted_surface() {
    let m = bs_model(0.2, Payoff::call(1.0));
    let g = extend_time(&smooth_grid(0.2), 0.05);
    let w = solve(&m, &g).unwrap();
    let check = CheckGrid::new(BoxSet::central(&g, 0.5), 50, vec![100]);
    let good = mollify(&g, w.values().to_vec(), 0.0125, 0.0, 1.0);
    let r = verify_supersolution(&good, &m, &check, 1e-3).unwrap();
    let bad_vals = w.map(|t, _, v| v - 0.5 * (1.0 - t)).values().to_vec();
    let bad = mollify(&g, bad_vals, 0.0125, 0.0, 1.0);
    let rb = verify_supersolution(&bad, &m, &check, 1e-3).unwrap();
    assert!(!rb.passed);
    assert!((rb.min_residual - (r.min_residual - 0.5)).abs() <= 1e-6, "{} vs {}", rb.min_residual, r.min_residual);
    assert!((rb.min_residual + 0.5).abs() <= 0.05);
}

#[test]
fn build_constant_model() {
    let m = zero_model(1.0);
    let g = GridSpec::uniform_1d(1.0, 50, 0.0, 1.0, 50);
    let b = BoxSet::central(&g, 0.5);
    let phi = |_: f64, _: &[f64]| 2.0;
    let out = build_smooth_supersolution(&m, &g, Target::Function(&phi), &b, 0.5, &RegularizeOptions::default()).unwrap();
    // max_B(w_eps - w_0) = 2 eps, so eta/2 = 0.25 first admits eps = 0.1
    let eps = out.report.eps;
    assert_eq!(eps, 0.1);
    for &(t, x) in &[(0.0, 0.0), (0.5, 0.3), (1.0, -0.2)] {
        assert!((out.surface.eval(t, &[x]) - (1.0 + 2.0 * eps)).abs() <= 1e-12);
    }
    assert!(out.report.certificate.passed);
}

#[test]
fn build_black_scholes_and_first_rung() {
    let m = bs_model(0.2, Payoff::call(1.0));
    let g = smooth_grid(0.2);
    let b = BoxSet::central(&g, 0.5);
    let opts = RegularizeOptions::default();
    let out = build_smooth_supersolution(&m, &g, Target::ValuePlusMargin(0.2), &b, 0.1, &opts).unwrap();
    let rep = &out.report;
    assert!(rep.certificate.passed, "{:?}", rep.certificate);
    assert!(rep.certificate.min_residual >= -opts.tol);
    assert!(rep.certificate.terminal_margin >= 0.0);
    assert!(rep.attempts.last().unwrap().b_margin >= 0.0);
    assert!(rep.eps_curve.last().unwrap().c_b <= 0.05 + 1e-12);

    // with eta above 2 max_B(w_0.2 - w_0) the first rung is accepted
    let c_first = rep.eps_curve[0].c_b;
    let eta = 2.0 * c_first + 0.01;
    let out = build_smooth_supersolution(&m, &g, Target::ValuePlusMargin(eta + 0.1), &b, eta, &opts).unwrap();
    assert_eq!(out.report.eps_curve.len(), 1);
    assert_eq!(out.report.eps, 0.2);
}

#[test]
fn precondition_is_checked() {
    let m = bs_model(0.2, Payoff::call(1.0));
    let g = GridSpec::uniform_1d(1.0, 100, 0.0, 0.8, 40);
    let b = BoxSet::central(&g, 0.5);
    let err = build_smooth_supersolution(&m, &g, Target::ValuePlusMargin(0.05), &b, 0.1, &RegularizeOptions::default());
    assert!(matches!(err, Err(RegularizeError::Precondition { .. })));
}

#[test]
fn kernel_time_support_is_backward() {
    // a step in time at t = 0.5 is only seen by queries at t > 0.5
    let g = GridSpec::uniform_1d(1.0, 100, 0.0, 1.0, 20);
    let s = mollify(&g, tabulate(&g, |t, _| if t > 0.5 + 1e-9 { 1.0 } else { 0.0 }), 0.1, 0.0, 1.0);
    assert_eq!(s.eval(0.5, &[0.0]), 0.0);
    assert!(s.eval(0.55, &[0.0]) > 0.0);
    let view: Box<dyn TimeView> = s.at_time(0.4);
    assert_eq!(view.value(&[0.3]), 0.0);
}
