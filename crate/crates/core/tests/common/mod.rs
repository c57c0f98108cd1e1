#![allow(dead_code)]

use hedgegame::hjb::GridSpec;
use hedgegame::model::{ModelSpec, Payoff};
use statrs::distribution::{ContinuousCDF, Normal};

/// Black–Scholes call with zero dividend.
pub fn bs_call(s: f64, k: f64, sigma: f64, tau: f64, r: f64) -> f64 {
    if tau <= 0.0 {
        return (s - k).max(0.0);
    }
    let n = Normal::new(0.0, 1.0).unwrap();
    let sd = sigma * tau.sqrt();
    let d1 = ((s / k).ln() + (r + 0.5 * sigma * sigma) * tau) / sd;
    let d2 = d1 - sd;
    s * n.cdf(d1) - k * (-r * tau).exp() * n.cdf(d2)
}

/// Delta of the call with respect to the log-price.
pub fn bs_call_log_delta(s: f64, k: f64, sigma: f64, tau: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let sd = sigma * tau.sqrt();
    let d1 = ((s / k).ln() + 0.5 * sigma * sigma * tau) / sd;
    s * n.cdf(d1)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Single-volatility market with zero rates.
pub fn bs_model(sigma: f64, payoff: Payoff) -> ModelSpec {
    ModelSpec::uncertain_vol(1, 0.0, 0.0, 0.0, payoff, vec![vec![sigma]], 1.0).unwrap()
}

pub fn uv_model(payoff: Payoff) -> ModelSpec {
    ModelSpec::uncertain_vol(1, 0.0, 0.0, 0.0, payoff, vec![vec![0.1], vec![0.3]], 1.0).unwrap()
}

/// Log-price grid of half-width `6 sigma sqrt(T)` around zero.
pub fn log_grid(sigma: f64, x_steps: usize, t_steps: usize) -> GridSpec {
    GridSpec::uniform_1d(1.0, t_steps, 0.0, 6.0 * sigma, x_steps)
}

/// No dynamics at all: `dX = 0`, `dY = u dW`, constant payoff `c`.
pub fn zero_model(c: f64) -> ModelSpec {
    ModelSpec::builder(1)
        .mu_x(|_, _, _, o| o[0] = 0.0)
        .sigma_x(|_, _, _, o| o[0] = 0.0)
        .mu_y(|_, _, _, _, _| 0.0)
        .sigma_y(|_, _, _, u, _, o| o[0] = u[0])
        .u_hat(|_, _, _, z, _, o| {
            o[0] = z[0];
            Ok(())
        })
        .payoff(move |_| c)
        .a_points(vec![vec![0.0]])
        .lipschitz_k(1.0)
        .build()
        .unwrap()
}

/// The grid used for smooth supersolutions: half-width `4 sigma`, 400 space
/// steps, and the time step at 90% of the explicit stability limit.
pub fn smooth_grid(sigma: f64) -> GridSpec {
    let hw = 4.0 * sigma;
    let h = 2.0 * hw / 400.0;
    let t_steps = (1.0 / (0.9 * h * h / (sigma * sigma))).ceil() as usize;
    GridSpec::uniform_1d(1.0, t_steps, 0.0, hw, 400)
}
