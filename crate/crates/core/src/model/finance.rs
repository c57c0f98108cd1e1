//! Log-price market with different borrowing and lending rates.
//!
//! Prices are `S_j = exp(X_j)` with `dX = mu dt + sigma dW`. The hedger holds
//! an amount `u_j` of wealth in asset `j`; the rest `y - u^T 1` earns `r_lend`
//! when positive and pays `r_borrow` when negative.

use std::sync::Arc;

use super::{solve_transposed, MatrixFn, ModelError, ModelSpec, Payoff, VectorFn, MAX_DIM};

/// `(t, x, a)`.
pub type RateFn = dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub struct FinanceSpec {
    pub dim: usize,
    pub mu: Arc<VectorFn>,
    pub sigma: Arc<MatrixFn>,
    pub r_lend: Arc<RateFn>,
    pub r_borrow: Arc<RateFn>,
}

impl FinanceSpec {
    pub fn new(
        dim: usize,
        mu: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        sigma: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        r_lend: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
        r_borrow: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            mu: Arc::new(mu),
            sigma: Arc::new(sigma),
            r_lend: Arc::new(r_lend),
            r_borrow: Arc::new(r_borrow),
        }
    }

    /// `gamma_j = (sigma sigma^T)_{jj}`.
    pub fn gamma(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut sig = [0.0; MAX_DIM * MAX_DIM];
        (self.sigma)(t, x, a, &mut sig[..d * d]);
        for j in 0..d {
            out[j] = (0..d).map(|k| sig[j * d + k] * sig[j * d + k]).sum();
        }
    }

    /// Market prices of risk `(lambda_b, lambda_l)`; `None` if sigma is singular.
    pub fn risk_premia(&self, t: f64, x: &[f64], a: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.dim;
        let mut sig = [0.0; MAX_DIM * MAX_DIM];
        let mut mu = [0.0; MAX_DIM];
        let mut gam = [0.0; MAX_DIM];
        (self.sigma)(t, x, a, &mut sig[..d * d]);
        (self.mu)(t, x, a, &mut mu[..d]);
        self.gamma(t, x, a, &mut gam[..d]);
        let rb = (self.r_borrow)(t, x, a);
        let rl = (self.r_lend)(t, x, a);
        // sigma^{-1} v  ==  (sigma^T)^T-solve, so transpose sigma first
        let mut sig_t = [0.0; MAX_DIM * MAX_DIM];
        for i in 0..d {
            for j in 0..d {
                sig_t[i * d + j] = sig[j * d + i];
            }
        }
        let solve = |r: f64| {
            let rhs: Vec<f64> = (0..d).map(|j| mu[j] + 0.5 * gam[j] - r).collect();
            let mut out = vec![0.0; d];
            solve_transposed(&sig_t[..d * d], &rhs, &mut out).map(|_| out)
        };
        Some((solve(rb)?, solve(rl)?))
    }
}

/// Interest earned on the cash position `y - u^T 1` under the two rates.
pub fn rho(t: f64, x: &[f64], y: f64, u: &[f64], a: &[f64], finance: &FinanceSpec) -> f64 {
    let cash = y - u.iter().sum::<f64>();
    if cash >= 0.0 {
        cash * (finance.r_lend)(t, x, a)
    } else {
        cash * (finance.r_borrow)(t, x, a)
    }
}

/// `(sigma^{-1})^T z`: the positions whose wealth diffusion equals `z`.
pub fn u_hat_finance(t: f64, x: &[f64], _y: f64, z: &[f64], a: &[f64], finance: &FinanceSpec) -> Result<Vec<f64>, ModelError> {
    let d = finance.dim;
    let mut u = vec![0.0; d];
    u_hat_into(t, x, z, a, finance, &mut u)?;
    Ok(u)
}

fn u_hat_into(t: f64, x: &[f64], z: &[f64], a: &[f64], finance: &FinanceSpec, out: &mut [f64]) -> Result<(), ModelError> {
    let d = finance.dim;
    let mut sig = [0.0; MAX_DIM * MAX_DIM];
    (finance.sigma)(t, x, a, &mut sig[..d * d]);
    solve_transposed(&sig[..d * d], z, out).ok_or_else(|| ModelError::SingularSigma {
        t,
        x: x.to_vec(),
        a: a.to_vec(),
    })
}

impl ModelSpec {
    /// Model of the two-rate market. `descriptor` should identify the
    /// coefficient closures; it feeds [`ModelSpec::hash`].
    pub fn finance_model(
        finance: FinanceSpec,
        payoff: Payoff,
        a_points: Vec<Vec<f64>>,
        horizon_t: f64,
        lipschitz_k: f64,
        descriptor: &str,
    ) -> Result<ModelSpec, ModelError> {
        let d = finance.dim;
        if payoff.underlying != super::Underlying::Price {
            return Err(ModelError::Invalid("finance payoffs act on prices".into()));
        }
        let fin = Arc::new(finance);
        let (f1, f2, f3, f4, f5, f6) = (fin.clone(), fin.clone(), fin.clone(), fin.clone(), fin.clone(), fin.clone());
        let descriptor = format!("finance|d={d}|{descriptor}|payoff={payoff:?}|A={a_points:?}|T={horizon_t}|K={lipschitz_k}");
        ModelSpec::builder(d)
            .mu_x(move |t, x, a, out| (f1.mu)(t, x, a, out))
            .sigma_x(move |t, x, a, out| (f2.sigma)(t, x, a, out))
            .mu_y(move |t, x, y, u, a| {
                let mut mu = [0.0; MAX_DIM];
                let mut gam = [0.0; MAX_DIM];
                (f3.mu)(t, x, a, &mut mu[..d]);
                f3.gamma(t, x, a, &mut gam[..d]);
                let drift: f64 = (0..d).map(|j| u[j] * (mu[j] + 0.5 * gam[j])).sum();
                drift + rho(t, x, y, u, a, &f3)
            })
            .sigma_y(move |t, x, _y, u, a, out| {
                let mut sig = [0.0; MAX_DIM * MAX_DIM];
                (f4.sigma)(t, x, a, &mut sig[..d * d]);
                for j in 0..d {
                    out[j] = (0..d).map(|i| sig[i * d + j] * u[i]).sum();
                }
            })
            .u_hat(move |t, x, _y, z, a, out| u_hat_into(t, x, z, a, &f5, out))
            .upwind_drift(move |t, x, a, out| {
                f6.gamma(t, x, a, out);
                out.iter_mut().for_each(|v| *v *= 0.5);
            })
            .payoff(move |x| payoff.eval(x))
            .a_points(a_points)
            .horizon(horizon_t)
            .lipschitz_k(lipschitz_k)
            .descriptor(descriptor)
            .finance_spec(fin)
            .build()
    }

    /// Constant-coefficient market in which every adverse point `a` is a
    /// volatility vector: `sigma = diag(a)` (a scalar `a` is broadcast).
    pub fn uncertain_vol(
        dim: usize,
        mu: f64,
        r_lend: f64,
        r_borrow: f64,
        payoff: Payoff,
        a_points: Vec<Vec<f64>>,
        horizon_t: f64,
    ) -> Result<ModelSpec, ModelError> {
        let fin = FinanceSpec::new(
            dim,
            move |_, _, _, out| out.fill(mu),
            move |_, _, a, out| {
                out.fill(0.0);
                for j in 0..dim {
                    out[j * dim + j] = if a.len() == 1 { a[0] } else { a[j] };
                }
            },
            move |_, _, _| r_lend,
            move |_, _, _| r_borrow,
        );
        let k = a_points
            .iter()
            .flat_map(|a| a.iter().map(|v| v.abs()))
            .fold(mu.abs(), f64::max)
            .max(1e-12);
        ModelSpec::finance_model(
            fin,
            payoff,
            a_points,
            horizon_t,
            k,
            &format!("diag-vol|mu={mu}|rl={r_lend}|rb={r_borrow}"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{operator_la, operator_l, DerivativePack};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(dim: usize, mu: f64, sig: f64, rl: f64, rb: f64) -> FinanceSpec {
        FinanceSpec::new(
            dim,
            move |_, _, _, out| out.fill(mu),
            move |_, _, _, out| {
                out.fill(0.0);
                let d = (out.len() as f64).sqrt() as usize;
                for j in 0..d {
                    out[j * d + j] = sig;
                }
            },
            move |_, _, _| rl,
            move |_, _, _| rb,
        )
    }

    #[test]
    fn rho_formula() {
        let f = flat(1, 0.0, 0.2, 0.02, 0.05);
        assert!((rho(0.0, &[0.0], 1.0, &[0.4], &[], &f) - 0.012).abs() < 1e-15);
        assert!((rho(0.0, &[0.0], 0.4, &[1.0], &[], &f) + 0.03).abs() < 1e-15);
        assert_eq!(rho(0.0, &[0.0], 0.7, &[0.7], &[], &f), 0.0);
    }

    #[test]
    fn u_hat_inversions() {
        let f = flat(1, 0.0, 0.2, 0.0, 0.0);
        let u = u_hat_finance(0.0, &[0.0], 0.0, &[0.1], &[], &f).unwrap();
        assert!((u[0] - 0.5).abs() < 1e-15);
        assert_eq!(u_hat_finance(0.0, &[0.0], 0.0, &[0.0], &[], &f).unwrap(), vec![0.0]);
        let f2 = FinanceSpec::new(
            2,
            |_, _, _, out| out.fill(0.0),
            |_, _, _, out| out.copy_from_slice(&[0.1, 0.0, 0.0, 0.2]),
            |_, _, _| 0.0,
            |_, _, _| 0.0,
        );
        let u = u_hat_finance(0.0, &[0.0, 0.0], 0.0, &[0.1, 0.2], &[], &f2).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-14 && (u[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_sigma_reports_point() {
        let f = flat(1, 0.0, 0.0, 0.0, 0.0);
        let err = u_hat_finance(0.5, &[1.0], 0.0, &[0.1], &[0.3], &f).unwrap_err();
        assert_eq!(err, ModelError::SingularSigma { t: 0.5, x: vec![1.0], a: vec![0.3] });
    }

    #[test]
    fn mu_y_hat_composes_rho_and_inverse() {
        let m = ModelSpec::uncertain_vol(1, 0.0, 0.0, 0.0, Payoff::constant(0.0), vec![vec![0.2]], 1.0).unwrap();
        assert_eq!(m.mu_y_hat(0.0, &[0.0], 1.0, &[0.0], &[0.2]).unwrap(), 0.0);
        assert!((m.mu_y_hat(0.0, &[0.0], 1.0, &[0.2], &[0.2]).unwrap() - 0.02).abs() < 1e-15);

        let f = flat(1, 0.01, 0.2, 0.02, 0.05);
        let m = ModelSpec::uncertain_vol(1, 0.01, 0.02, 0.05, Payoff::constant(0.0), vec![vec![0.2]], 1.0).unwrap();
        let u = u_hat_finance(0.0, &[0.0], 2.0, &[0.2], &[0.2], &f).unwrap();
        let oracle = rho(0.0, &[0.0], 2.0, &u, &[0.2], &f) + u[0] * (0.01 + 0.5 * 0.04);
        let got = m.mu_y_hat(0.0, &[0.0], 2.0, &[0.2], &[0.2]).unwrap();
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 0.05).abs() < 1e-14);
    }

    #[test]
    fn drift_cancels_in_la() {
        let m = ModelSpec::uncertain_vol(1, 0.07, 0.0, 0.0, Payoff::constant(0.0), vec![vec![0.2]], 1.0).unwrap();
        let pack = DerivativePack::new(0.0, 0.0, vec![1.0], vec![1.0]).unwrap();
        assert!(operator_la(&m, 0.0, &[0.0], &pack, 0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn two_point_minimum() {
        let m = ModelSpec::uncertain_vol(1, 0.0, 0.0, 0.0, Payoff::constant(0.0), vec![vec![0.1], vec![0.3]], 1.0).unwrap();
        let pack = DerivativePack::new(0.0, 0.0, vec![0.0], vec![1.0]).unwrap();
        let (v, idx) = operator_l(&m, 0.0, &[0.0], &pack).unwrap();
        assert!((v + 0.045).abs() < 1e-15);
        assert_eq!(idx, 1);
    }

    #[test]
    fn finance_reduction_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sig = [0.25, 0.05, -0.03, 0.18];
        let f = FinanceSpec::new(
            2,
            |_, x, a, out| {
                out[0] = 0.03 + 0.01 * x[0].sin() + a[0];
                out[1] = -0.02;
            },
            move |_, _, a, out| {
                out.copy_from_slice(&sig);
                out[0] += a[0];
            },
            |_, _, _| 0.01,
            |_, _, _| 0.04,
        );
        let spec = f.clone();
        let m = ModelSpec::finance_model(f, Payoff::constant(0.0), vec![vec![0.0], vec![0.05]], 1.0, 1.0, "test").unwrap();
        for _ in 0..500 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let y = rng.random_range(-2.0..2.0);
            let q = rng.random_range(-1.0..1.0);
            let p = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let c = rng.random_range(-1.0..1.0);
            let mm = vec![rng.random_range(-1.0..1.0), c, c, rng.random_range(-1.0..1.0)];
            let ai = rng.random_range(0..2);
            let a = &m.a_points()[ai];
            let pack = DerivativePack::new(y, q, p.clone(), mm.clone()).unwrap();
            let got = operator_la(&m, 0.3, &x, &pack, ai).unwrap();
            // rho(y, p) + gamma^T p / 2 - q - Tr[sigma sigma^T M] / 2
            let mut s = [0.0; 4];
            (spec.sigma)(0.3, &x, a, &mut s);
            let cov = |i: usize, j: usize| s[i * 2] * s[j * 2] + s[i * 2 + 1] * s[j * 2 + 1];
            let tr: f64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| cov(i, j) * mm[j * 2 + i]).sum();
            let expect = rho(0.3, &x, y, &p, a, &spec) + 0.5 * (cov(0, 0) * p[0] + cov(1, 1) * p[1]) - q - 0.5 * tr;
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }
}
