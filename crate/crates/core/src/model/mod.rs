//! Coefficients of the controlled state/wealth system and the operators built
//! on top of them.
//!
//! The state `X` lives in `R^d` and is driven by an adverse control `a` taken
//! from a finite list of points; the wealth `Y` is driven by the hedger's
//! control `u`. Every coefficient is a plain closure so presets (see
//! [`finance`]) and hand-written test models share one representation.
//!
//! Matrices are stored row-major as flat slices of length `d * d`.

mod config;
mod finance;
mod payoff;
mod validate;

pub use config::{Coefficient, FinanceConfig, ModelConfig, ModelKind, PayoffConfig, PayoffName, TabulatedConfig};
pub use finance::{rho, u_hat_finance, FinanceSpec, RateFn};
pub use payoff::{Payoff, PayoffKind, Underlying};
pub use validate::{
    validate_assumptions, validate_assumptions_in, AssumptionCheck, AssumptionId, SamplingBox,
    ValidationReport, Witness,
};

use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Largest state dimension supported by the stack-allocated hot paths.
pub const MAX_DIM: usize = 4;

/// `(t, x, a, out)`: writes a vector of length `d` into `out`.
pub type VectorFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;
/// `(t, x, a, out)`: writes a row-major `d x d` matrix into `out`.
pub type MatrixFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;
/// `(t, x, y, u, a)`.
pub type WealthDriftFn = dyn Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync;
/// `(t, x, y, u, a, out)`: diffusion row of the wealth process.
pub type WealthDiffusionFn = dyn Fn(f64, &[f64], f64, &[f64], &[f64], &mut [f64]) + Send + Sync;
/// `(t, x, y, z, a, out)`: the control `u` with `sigma_y(.., u, ..) = z`.
pub type ControlInverseFn =
    dyn Fn(f64, &[f64], f64, &[f64], &[f64], &mut [f64]) -> Result<(), ModelError> + Send + Sync;
pub type PayoffFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("singular volatility matrix at t={t}, x={x:?}, a={a:?}")]
    SingularSigma { t: f64, x: Vec<f64>, a: Vec<f64> },
    #[error("invalid model definition: {0}")]
    Invalid(String),
    #[error("invalid derivative pack: {0}")]
    BadPack(String),
}

/// Complete description of a stochastic target game.
#[derive(Clone)]
pub struct ModelSpec {
    dim: usize,
    mu_x: Arc<VectorFn>,
    sigma_x: Arc<MatrixFn>,
    mu_y: Arc<WealthDriftFn>,
    sigma_y: Arc<WealthDiffusionFn>,
    u_hat: Arc<ControlInverseFn>,
    payoff: Arc<PayoffFn>,
    a_points: Vec<Vec<f64>>,
    horizon_t: f64,
    lipschitz_k: f64,
    upwind_drift: Option<Arc<VectorFn>>,
    finance: Option<Arc<FinanceSpec>>,
    descriptor: String,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dim", &self.dim)
            .field("a_points", &self.a_points)
            .field("horizon_t", &self.horizon_t)
            .field("lipschitz_k", &self.lipschitz_k)
            .field("finance", &self.finance.is_some())
            .field("descriptor", &self.descriptor)
            .finish()
    }
}

/// Builder for [`ModelSpec`]; every coefficient must be supplied.
pub struct ModelBuilder {
    dim: usize,
    mu_x: Option<Arc<VectorFn>>,
    sigma_x: Option<Arc<MatrixFn>>,
    mu_y: Option<Arc<WealthDriftFn>>,
    sigma_y: Option<Arc<WealthDiffusionFn>>,
    u_hat: Option<Arc<ControlInverseFn>>,
    payoff: Option<Arc<PayoffFn>>,
    a_points: Vec<Vec<f64>>,
    horizon_t: f64,
    lipschitz_k: f64,
    upwind_drift: Option<Arc<VectorFn>>,
    finance: Option<Arc<FinanceSpec>>,
    descriptor: String,
}

impl ModelBuilder {
    pub fn mu_x(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.mu_x = Some(Arc::new(f));
        self
    }

    pub fn sigma_x(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.sigma_x = Some(Arc::new(f));
        self
    }

    pub fn mu_y(
        mut self,
        f: impl Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.mu_y = Some(Arc::new(f));
        self
    }

    pub fn sigma_y(
        mut self,
        f: impl Fn(f64, &[f64], f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.sigma_y = Some(Arc::new(f));
        self
    }

    pub fn u_hat(
        mut self,
        f: impl Fn(f64, &[f64], f64, &[f64], &[f64], &mut [f64]) -> Result<(), ModelError>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        self.u_hat = Some(Arc::new(f));
        self
    }

    pub fn payoff(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.payoff = Some(Arc::new(f));
        self
    }

    pub fn a_points(mut self, points: Vec<Vec<f64>>) -> Self {
        self.a_points = points;
        self
    }

    pub fn horizon(mut self, t: f64) -> Self {
        self.horizon_t = t;
        self
    }

    pub fn lipschitz_k(mut self, k: f64) -> Self {
        self.lipschitz_k = k;
        self
    }

    /// Part of the first-order term that is linear in the gradient: the
    /// vector `c` with `mu_y_hat(.., sigma_x^T p, ..) - mu_x^T p = c^T p + rest`.
    /// The finite-difference scheme upwinds on `c` and centres the rest.
    pub fn upwind_drift(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.upwind_drift = Some(Arc::new(f));
        self
    }

    pub fn descriptor(mut self, d: impl Into<String>) -> Self {
        self.descriptor = d.into();
        self
    }

    pub(crate) fn finance_spec(mut self, f: Arc<FinanceSpec>) -> Self {
        self.finance = Some(f);
        self
    }

    pub fn build(self) -> Result<ModelSpec, ModelError> {
        let missing = |name: &str| ModelError::Invalid(format!("missing coefficient `{name}`"));
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(ModelError::Invalid(format!(
                "dimension {} outside 1..={MAX_DIM}",
                self.dim
            )));
        }
        if self.a_points.is_empty() {
            return Err(ModelError::Invalid("A_points must be nonempty".into()));
        }
        let a_len = self.a_points[0].len();
        if self.a_points.iter().any(|a| a.len() != a_len) {
            return Err(ModelError::Invalid("A_points must share one length".into()));
        }
        if !(self.horizon_t > 0.0) || !self.horizon_t.is_finite() {
            return Err(ModelError::Invalid(format!("horizon_T must be positive, got {}", self.horizon_t)));
        }
        if !(self.lipschitz_k > 0.0) {
            return Err(ModelError::Invalid(format!("lipschitz_K must be positive, got {}", self.lipschitz_k)));
        }
        Ok(ModelSpec {
            dim: self.dim,
            mu_x: self.mu_x.ok_or_else(|| missing("mu_x"))?,
            sigma_x: self.sigma_x.ok_or_else(|| missing("sigma_x"))?,
            mu_y: self.mu_y.ok_or_else(|| missing("mu_y"))?,
            sigma_y: self.sigma_y.ok_or_else(|| missing("sigma_y"))?,
            u_hat: self.u_hat.ok_or_else(|| missing("u_hat"))?,
            payoff: self.payoff.ok_or_else(|| missing("payoff"))?,
            a_points: self.a_points,
            horizon_t: self.horizon_t,
            lipschitz_k: self.lipschitz_k,
            upwind_drift: self.upwind_drift,
            finance: self.finance,
            descriptor: self.descriptor,
        })
    }
}

impl ModelSpec {
    pub fn builder(dim: usize) -> ModelBuilder {
        ModelBuilder {
            dim,
            mu_x: None,
            sigma_x: None,
            mu_y: None,
            sigma_y: None,
            u_hat: None,
            payoff: None,
            a_points: Vec::new(),
            horizon_t: 1.0,
            lipschitz_k: 1.0,
            upwind_drift: None,
            finance: None,
            descriptor: String::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn a_points(&self) -> &[Vec<f64>] {
        &self.a_points
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_t
    }

    pub fn lipschitz_k(&self) -> f64 {
        self.lipschitz_k
    }

    pub fn finance(&self) -> Option<&FinanceSpec> {
        self.finance.as_deref()
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    /// Hex SHA-256 of the descriptor; identifies the model in surface files.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.descriptor.as_bytes()))
    }

    /// Copy of this model with a different list of adverse control points.
    pub fn with_a_points(&self, points: Vec<Vec<f64>>) -> Result<ModelSpec, ModelError> {
        if points.is_empty() {
            return Err(ModelError::Invalid("A_points must be nonempty".into()));
        }
        let mut m = self.clone();
        m.descriptor = format!("{}|A={:?}", self.descriptor, points);
        m.a_points = points;
        Ok(m)
    }

    /// Copy of this model with another terminal function.
    pub fn with_payoff(&self, tag: &str, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> ModelSpec {
        let mut m = self.clone();
        m.payoff = Arc::new(f);
        m.descriptor = format!("{}|payoff={tag}", self.descriptor);
        m
    }

    /// Coefficients are extended constantly in time outside `[0, T]`.
    #[inline]
    pub fn clamp_time(&self, t: f64) -> f64 {
        t.clamp(0.0, self.horizon_t)
    }

    #[inline]
    pub fn mu_x(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        (self.mu_x)(self.clamp_time(t), x, a, out)
    }

    #[inline]
    pub fn sigma_x(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        (self.sigma_x)(self.clamp_time(t), x, a, out)
    }

    #[inline]
    pub fn mu_y(&self, t: f64, x: &[f64], y: f64, u: &[f64], a: &[f64]) -> f64 {
        (self.mu_y)(self.clamp_time(t), x, y, u, a)
    }

    #[inline]
    pub fn sigma_y(&self, t: f64, x: &[f64], y: f64, u: &[f64], a: &[f64], out: &mut [f64]) {
        (self.sigma_y)(self.clamp_time(t), x, y, u, a, out)
    }

    #[inline]
    pub fn u_hat(&self, t: f64, x: &[f64], y: f64, z: &[f64], a: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        (self.u_hat)(self.clamp_time(t), x, y, z, a, out)
    }

    #[inline]
    pub fn payoff(&self, x: &[f64]) -> f64 {
        (self.payoff)(x)
    }

    /// Writes the upwind drift `c(t, x, a)`; zero when the model has none.
    #[inline]
    pub fn upwind_drift(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        match &self.upwind_drift {
            Some(f) => f(self.clamp_time(t), x, a, out),
            None => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    /// `mu_Y` evaluated at the control that makes the wealth diffusion equal `z`.
    pub fn mu_y_hat(&self, t: f64, x: &[f64], y: f64, z: &[f64], a: &[f64]) -> Result<f64, ModelError> {
        let mut u = [0.0; MAX_DIM];
        let u = &mut u[..self.dim];
        self.u_hat(t, x, y, z, a, u)?;
        Ok(self.mu_y(t, x, y, u, a))
    }

    /// First-order part of `L^a`: `mu_y_hat(.., sigma_x^T p, ..) - mu_x^T p`.
    pub(crate) fn first_order(&self, t: f64, x: &[f64], y: f64, p: &[f64], a: &[f64]) -> Result<f64, ModelError> {
        let d = self.dim;
        let mut sig = [0.0; MAX_DIM * MAX_DIM];
        let mut mu = [0.0; MAX_DIM];
        self.sigma_x(t, x, a, &mut sig[..d * d]);
        self.mu_x(t, x, a, &mut mu[..d]);
        let mut z = [0.0; MAX_DIM];
        for j in 0..d {
            // z = sigma^T p
            z[j] = (0..d).map(|i| sig[i * d + j] * p[i]).sum();
        }
        let drift: f64 = (0..d).map(|i| mu[i] * p[i]).sum();
        Ok(self.mu_y_hat(t, x, y, &z[..d], a)? - drift)
    }

    /// `1/2 Tr[sigma sigma^T M]`.
    pub(crate) fn half_trace(&self, t: f64, x: &[f64], a: &[f64], m: &[f64]) -> f64 {
        let d = self.dim;
        let mut sig = [0.0; MAX_DIM * MAX_DIM];
        self.sigma_x(t, x, a, &mut sig[..d * d]);
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                let cov: f64 = (0..d).map(|k| sig[i * d + k] * sig[j * d + k]).sum();
                acc += cov * m[j * d + i];
            }
        }
        0.5 * acc
    }

    /// `L^a(t, x, y, q, p, M)` on raw slices.
    pub fn la(&self, t: f64, x: &[f64], y: f64, q: f64, p: &[f64], m: &[f64], a: &[f64]) -> Result<f64, ModelError> {
        Ok(self.first_order(t, x, y, p, a)? - q - self.half_trace(t, x, a, m))
    }
}

/// Value and derivatives of a test function at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativePack {
    pub y: f64,
    pub q: f64,
    pub p: Vec<f64>,
    /// Row-major Hessian.
    pub m: Vec<f64>,
}

impl DerivativePack {
    pub fn new(y: f64, q: f64, p: Vec<f64>, m: Vec<f64>) -> Result<Self, ModelError> {
        let d = p.len();
        if m.len() != d * d {
            return Err(ModelError::BadPack(format!("hessian has {} entries, expected {}", m.len(), d * d)));
        }
        for i in 0..d {
            for j in 0..i {
                if (m[i * d + j] - m[j * d + i]).abs() > 1e-12 {
                    return Err(ModelError::BadPack(format!("hessian not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { y, q, p, m })
    }

    pub fn zero(dim: usize) -> Self {
        Self { y: 0.0, q: 0.0, p: vec![0.0; dim], m: vec![0.0; dim * dim] }
    }
}

/// `mu_Y^{u_hat}(t, x, y, z, a)`.
pub fn mu_y_hat(model: &ModelSpec, t: f64, x: &[f64], y: f64, z: &[f64], a_index: usize) -> Result<f64, ModelError> {
    model.mu_y_hat(t, x, y, z, &model.a_points[a_index])
}

/// `L^a` at the `a_index`-th adverse control point.
pub fn operator_la(model: &ModelSpec, t: f64, x: &[f64], pack: &DerivativePack, a_index: usize) -> Result<f64, ModelError> {
    model.la(t, x, pack.y, pack.q, &pack.p, &pack.m, &model.a_points[a_index])
}

/// `L = min_a L^a`, with ties going to the lowest index.
pub fn operator_l(model: &ModelSpec, t: f64, x: &[f64], pack: &DerivativePack) -> Result<(f64, usize), ModelError> {
    let mut best = (f64::INFINITY, 0);
    for (i, a) in model.a_points.iter().enumerate() {
        let v = model.la(t, x, pack.y, pack.q, &pack.p, &pack.m, a)?;
        if v < best.0 {
            best = (v, i);
        }
    }
    Ok(best)
}

/// Shaken operator: minimum of [`operator_l`] over the base points `(t, x) + b`.
///
/// Each shake point is `[b_t, b_x...]` and must lie in the closed ball of
/// radius `eps`. Shifted times are clamped to `[0, T]`.
pub fn operator_h_eps(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    pack: &DerivativePack,
    eps: f64,
    shake_points: &[Vec<f64>],
) -> Result<f64, ModelError> {
    let d = model.dim();
    let mut best = f64::INFINITY;
    let mut xs = [0.0; MAX_DIM];
    for b in shake_points {
        if b.len() != d + 1 {
            return Err(ModelError::Invalid(format!("shake point has {} entries, expected {}", b.len(), d + 1)));
        }
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > eps * (1.0 + 1e-12) + 1e-15 {
            return Err(ModelError::Invalid(format!("shake point {b:?} outside ball of radius {eps}")));
        }
        for j in 0..d {
            xs[j] = x[j] + b[j + 1];
        }
        let ts = model.clamp_time(t + b[0]);
        let (v, _) = operator_l(model, ts, &xs[..d], pack)?;
        best = best.min(v);
    }
    Ok(best)
}

/// The lattice `{-eps, 0, eps}^{d+1}` intersected with the closed ball of
/// radius `eps`. For `eps = 0` this is the origin alone.
pub fn shake_lattice(eps: f64, dim: usize) -> Vec<Vec<f64>> {
    if eps <= 0.0 {
        return vec![vec![0.0; dim + 1]];
    }
    let n = dim + 1;
    let mut out = Vec::new();
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut nonzero = 0;
        let mut point = Vec::with_capacity(n);
        for _ in 0..n {
            let digit = c % 3;
            c /= 3;
            let v = match digit {
                0 => 0.0,
                1 => -eps,
                _ => eps,
            };
            if digit != 0 {
                nonzero += 1;
            }
            point.push(v);
        }
        // |b| = eps * sqrt(nonzero)
        if nonzero <= 1 {
            out.push(point);
        }
    }
    out
}

/// Solves `A^T u = z` for a row-major `d x d` matrix with partial pivoting.
/// Returns `None` when the matrix is numerically singular.
pub(crate) fn solve_transposed(a: &[f64], z: &[f64], out: &mut [f64]) -> Option<()> {
    let d = z.len();
    let mut m = [0.0; MAX_DIM * MAX_DIM];
    let mut rhs = [0.0; MAX_DIM];
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for i in 0..d {
        for j in 0..d {
            m[i * d + j] = a[j * d + i];
        }
        rhs[i] = z[i];
    }
    for col in 0..d {
        let (piv, pval) = (col..d)
            .map(|r| (r, m[r * d + col].abs()))
            .fold((col, -1.0), |acc, v| if v.1 > acc.1 { v } else { acc });
        if pval <= 1e-14 * scale {
            return None;
        }
        if piv != col {
            for j in 0..d {
                m.swap(piv * d + j, col * d + j);
            }
            rhs.swap(piv, col);
        }
        for r in col + 1..d {
            let f = m[r * d + col] / m[col * d + col];
            if f != 0.0 {
                for j in col..d {
                    m[r * d + j] -= f * m[col * d + j];
                }
                rhs[r] -= f * rhs[col];
            }
        }
    }
    for i in (0..d).rev() {
        let s: f64 = (i + 1..d).map(|j| m[i * d + j] * out[j]).sum();
        out[i] = (rhs[i] - s) / m[i * d + i];
    }
    Some(())
}
