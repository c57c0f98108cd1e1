//! Grid solver for the terminal-value problem `L(., phi, d_t phi, D phi, D^2 phi) = 0`,
//! `phi(T, .) = g`.
//!
//! The equation is stepped backward with an explicit monotone scheme (see
//! [`scheme`]) on a truncated rectangle; the result is an immutable
//! [`ValueSurface`] carrying values and the minimizing adverse control at
//! every node.

pub(crate) mod io;
mod scheme;
mod surface;

pub use io::{read_surface, write_surface, write_surface_csv};
pub use scheme::{solve, solve_with, SolveOptions, SolveStats};
pub use surface::{PolicySource, PolicyView, SurfaceField, TimeView};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{operator_l, DerivativePack, ModelError, ModelSpec, MAX_DIM};

#[derive(Debug, Error)]
pub enum HjbError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("CFL number {cfl:.4} exceeds 1 (explicit scheme); refine t_steps or coarsen x_steps")]
    Cfl { cfl: f64 },
    #[error("fixed point did not converge at t_index {t_index}, node {node:?}: last change {residual:e}")]
    NonConvergence { t_index: usize, node: Vec<usize>, residual: f64 },
    #[error("query ({t}, {x:?}) outside the grid")]
    OutOfBounds { t: f64, x: Vec<f64> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("surface file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Zero second difference across each face.
    #[default]
    ExtrapolateLinear,
    /// Terminal data discounted at the lending rate.
    ClampPayoff,
}

/// Uniform space-time lattice `[t_start, t_end] x prod_j [x_min_j, x_max_j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t_start: f64,
    pub t_end: f64,
    pub t_steps: usize,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub x_steps: Vec<usize>,
    pub boundary_mode: BoundaryMode,
}

impl GridSpec {
    pub fn new(horizon: f64, t_steps: usize, x_min: Vec<f64>, x_max: Vec<f64>, x_steps: Vec<usize>) -> Self {
        Self {
            t_start: 0.0,
            t_end: horizon,
            t_steps,
            x_min,
            x_max,
            x_steps,
            boundary_mode: BoundaryMode::default(),
        }
    }

    /// One-dimensional grid `[center - half_width, center + half_width]`.
    pub fn uniform_1d(horizon: f64, t_steps: usize, center: f64, half_width: f64, x_steps: usize) -> Self {
        Self::new(horizon, t_steps, vec![center - half_width], vec![center + half_width], vec![x_steps])
    }

    pub fn with_boundary(mut self, mode: BoundaryMode) -> Self {
        self.boundary_mode = mode;
        self
    }

    pub fn with_t_start(mut self, t_start: f64) -> Self {
        self.t_start = t_start;
        self
    }

    pub fn validate(&self) -> Result<(), HjbError> {
        let d = self.x_min.len();
        if d == 0 || d > MAX_DIM {
            return Err(HjbError::Grid(format!("dimension {d} outside 1..={MAX_DIM}")));
        }
        if self.x_max.len() != d || self.x_steps.len() != d {
            return Err(HjbError::Grid("x_min, x_max and x_steps must have equal length".into()));
        }
        if self.t_steps == 0 {
            return Err(HjbError::Grid("t_steps must be positive".into()));
        }
        if !(self.t_start < self.t_end) || !self.t_start.is_finite() || !self.t_end.is_finite() {
            return Err(HjbError::Grid(format!("time span [{}, {}] is empty", self.t_start, self.t_end)));
        }
        for j in 0..d {
            if !(self.x_min[j] < self.x_max[j]) || !self.x_min[j].is_finite() || !self.x_max[j].is_finite() {
                return Err(HjbError::Grid(format!("axis {j}: x_min must be below x_max")));
            }
            if self.x_steps[j] < 2 {
                return Err(HjbError::Grid(format!("axis {j}: need at least 2 steps")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.x_min.len()
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.t_steps as f64
    }

    pub fn dx(&self, axis: usize) -> f64 {
        (self.x_max[axis] - self.x_min[axis]) / self.x_steps[axis] as f64
    }

    pub fn n_t(&self) -> usize {
        self.t_steps + 1
    }

    pub fn n_x(&self, axis: usize) -> usize {
        self.x_steps[axis] + 1
    }

    /// Number of nodes in one time layer.
    pub fn n_space(&self) -> usize {
        self.x_steps.iter().map(|s| s + 1).product()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_t() * self.n_space()
    }

    /// Time of layer `n`; the last layer is `t_end` exactly.
    pub fn t_at(&self, n: usize) -> f64 {
        if n == self.t_steps {
            self.t_end
        } else {
            self.t_start + n as f64 * self.dt()
        }
    }

    pub fn x_coord(&self, axis: usize, i: usize) -> f64 {
        if i == self.x_steps[axis] {
            self.x_max[axis]
        } else {
            self.x_min[axis] + i as f64 * self.dx(axis)
        }
    }

    /// Row-major strides of a layer; the last axis is contiguous.
    pub fn strides(&self) -> [usize; MAX_DIM] {
        let d = self.dim();
        let mut s = [0; MAX_DIM];
        let mut acc = 1;
        for j in (0..d).rev() {
            s[j] = acc;
            acc *= self.n_x(j);
        }
        s
    }

    pub fn unravel(&self, mut s: usize, out: &mut [usize]) {
        for j in (0..self.dim()).rev() {
            let n = self.n_x(j);
            out[j] = s % n;
            s /= n;
        }
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        let st = self.strides();
        idx.iter().enumerate().map(|(j, i)| i * st[j]).sum()
    }

    pub fn node_x(&self, s: usize, out: &mut [f64]) {
        let mut idx = [0; MAX_DIM];
        self.unravel(s, &mut idx);
        for j in 0..self.dim() {
            out[j] = self.x_coord(j, idx[j]);
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let s = serde_json::to_string(self).expect("grid serializes");
        hex::encode(Sha256::digest(s.as_bytes()))
    }

    fn contains(&self, t: f64, x: &[f64]) -> bool {
        let tol = |a: f64, b: f64| 1e-12 * (1.0 + a.abs().max(b.abs()));
        if t < self.t_start - tol(t, self.t_start) || t > self.t_end + tol(t, self.t_end) {
            return false;
        }
        (0..self.dim()).all(|j| {
            x[j] >= self.x_min[j] - tol(x[j], self.x_min[j]) && x[j] <= self.x_max[j] + tol(x[j], self.x_max[j])
        })
    }

    /// Cell index and weight of the upper node along time.
    fn locate_t(&self, t: f64) -> (usize, f64) {
        let u = snap(((t - self.t_start) / self.dt()).clamp(0.0, self.t_steps as f64));
        let n = (u.floor() as usize).min(self.t_steps - 1);
        (n, u - n as f64)
    }

    fn locate_x(&self, axis: usize, x: f64) -> (usize, f64) {
        let steps = self.x_steps[axis];
        let u = snap(((x - self.x_min[axis]) / self.dx(axis)).clamp(0.0, steps as f64));
        let i = (u.floor() as usize).min(steps - 1);
        (i, u - i as f64)
    }

    /// Clamp a point into the grid box; returns whether clamping was needed.
    pub fn clamp_point(&self, t: f64, x: &mut [f64]) -> (f64, bool) {
        let mut clamped = false;
        let tc = t.clamp(self.t_start, self.t_end);
        clamped |= tc != t;
        for j in 0..self.dim() {
            let c = x[j].clamp(self.x_min[j], self.x_max[j]);
            clamped |= c != x[j];
            x[j] = c;
        }
        (tc, clamped)
    }
}

/// Rounds fractional grid coordinates that are within roundoff of a node.
fn snap(u: f64) -> f64 {
    let r = u.round();
    if (u - r).abs() < 1e-9 {
        r
    } else {
        u
    }
}

/// Solved grid function together with the adverse control selected at each node.
#[derive(Debug, Clone)]
pub struct ValueSurface {
    grid: GridSpec,
    values: Vec<f64>,
    policy: Vec<u16>,
    model_hash: String,
    stats: SolveStats,
}

impl ValueSurface {
    pub(crate) fn from_parts(grid: GridSpec, values: Vec<f64>, policy: Vec<u16>, model_hash: String, stats: SolveStats) -> Self {
        debug_assert_eq!(values.len(), grid.n_nodes());
        debug_assert_eq!(policy.len(), grid.n_nodes());
        Self { grid, values, policy, model_hash, stats }
    }

    /// Surface from tabulated values (policy all zero), e.g. for tests and
    /// for loading external surfaces.
    pub fn tabulated(grid: GridSpec, values: Vec<f64>) -> Result<Self, HjbError> {
        grid.validate()?;
        if values.len() != grid.n_nodes() {
            return Err(HjbError::Grid(format!("{} values for {} nodes", values.len(), grid.n_nodes())));
        }
        let n = values.len();
        Ok(Self { grid, values, policy: vec![0; n], model_hash: String::new(), stats: SolveStats::default() })
    }

    /// Tabulates `f(t, x)` on every node.
    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, &[f64]) -> f64) -> Result<Self, HjbError> {
        grid.validate()?;
        let ns = grid.n_space();
        let d = grid.dim();
        let mut values = Vec::with_capacity(grid.n_nodes());
        let mut x = [0.0; MAX_DIM];
        for n in 0..grid.n_t() {
            let t = grid.t_at(n);
            for s in 0..ns {
                grid.node_x(s, &mut x[..d]);
                values.push(f(t, &x[..d]));
            }
        }
        Self::tabulated(grid, values)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// All node values, time-major.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layer(&self, n: usize) -> &[f64] {
        let ns = self.grid.n_space();
        &self.values[n * ns..(n + 1) * ns]
    }

    pub fn value_at(&self, n: usize, idx: &[usize]) -> f64 {
        self.values[n * self.grid.n_space() + self.grid.ravel(idx)]
    }

    pub fn policy_indices(&self) -> &[u16] {
        &self.policy
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn stats(&self) -> &SolveStats {
        &self.stats
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Same grid with every value mapped through `f(t, x, v)`.
    pub fn map(&self, f: impl Fn(f64, &[f64], f64) -> f64) -> ValueSurface {
        let ns = self.grid.n_space();
        let d = self.grid.dim();
        let mut x = [0.0; MAX_DIM];
        let mut out = self.clone();
        for n in 0..self.grid.n_t() {
            let t = self.grid.t_at(n);
            for s in 0..ns {
                self.grid.node_x(s, &mut x[..d]);
                out.values[n * ns + s] = f(t, &x[..d], self.values[n * ns + s]);
            }
        }
        out
    }
}

/// Adverse-control indices of a solved surface.
pub fn policy(surface: &ValueSurface) -> &[u16] {
    surface.policy_indices()
}

/// Interpolated value and finite-difference derivatives at `(t, x)`.
///
/// The value is the multilinear interpolant in `(t, x)`; the gradient and
/// Hessian interpolate nodal centred differences (one-sided on faces); the
/// time derivative is that of the interpolant.
pub fn eval(surface: &ValueSurface, t: f64, x: &[f64]) -> Result<DerivativePack, HjbError> {
    let g = &surface.grid;
    if x.len() != g.dim() || !g.contains(t, x) {
        return Err(HjbError::OutOfBounds { t, x: x.to_vec() });
    }
    let (n0, wt) = g.locate_t(t);
    let lo = surface.layer_view(n0);
    let hi = surface.layer_view(n0 + 1);
    let d = g.dim();
    let (v0, p0, m0) = lo.pack_parts(x);
    let (v1, p1, m1) = hi.pack_parts(x);
    let lerp = |a: f64, b: f64| (1.0 - wt) * a + wt * b;
    Ok(DerivativePack {
        y: lerp(v0, v1),
        q: (v1 - v0) / g.dt(),
        p: (0..d).map(|j| lerp(p0[j], p1[j])).collect(),
        m: (0..d * d).map(|j| lerp(m0[j], m1[j])).collect(),
    })
}

/// One time layer with multilinear interpolation and nodal difference fields.
pub(crate) struct LayerView<'a> {
    grid: &'a GridSpec,
    values: &'a [f64],
}

impl ValueSurface {
    pub(crate) fn layer_view(&self, n: usize) -> LayerView<'_> {
        LayerView { grid: &self.grid, values: self.layer(n) }
    }
}

impl<'a> LayerView<'a> {
    /// Centred first difference along `axis` at node `idx`, one-sided on faces.
    fn grad_node(&self, idx: &[usize], axis: usize) -> f64 {
        let g = self.grid;
        let st = g.strides();
        let s = g.ravel(idx);
        let n = g.n_x(axis);
        let h = g.dx(axis);
        let i = idx[axis];
        let v = self.values;
        if i == 0 {
            (v[s + st[axis]] - v[s]) / h
        } else if i == n - 1 {
            (v[s] - v[s - st[axis]]) / h
        } else {
            (v[s + st[axis]] - v[s - st[axis]]) / (2.0 * h)
        }
    }

    /// Second differences at the nearest node whose stencil fits.
    fn hess_node(&self, idx: &[usize], j: usize, k: usize) -> f64 {
        let g = self.grid;
        let st = g.strides();
        let mut c = [0usize; MAX_DIM];
        c[..idx.len()].copy_from_slice(idx);
        for &ax in &[j, k] {
            c[ax] = c[ax].clamp(1, g.n_x(ax) - 2);
        }
        let s = g.ravel(&c[..idx.len()]);
        let v = self.values;
        if j == k {
            let h = g.dx(j);
            (v[s + st[j]] - 2.0 * v[s] + v[s - st[j]]) / (h * h)
        } else {
            let (a, b) = (st[j], st[k]);
            (v[s + a + b] - v[s + a - b] - v[s - a + b] + v[s - a - b]) / (4.0 * g.dx(j) * g.dx(k))
        }
    }

    /// Interpolated value, gradient and Hessian.
    pub(crate) fn pack_parts(&self, x: &[f64]) -> (f64, [f64; MAX_DIM], [f64; MAX_DIM * MAX_DIM]) {
        let g = self.grid;
        let d = g.dim();
        let mut base = [0usize; MAX_DIM];
        let mut w = [0.0; MAX_DIM];
        for j in 0..d {
            let (i, f) = g.locate_x(j, x[j]);
            base[j] = i;
            w[j] = f;
        }
        let mut val = 0.0;
        let mut grad = [0.0; MAX_DIM];
        let mut hess = [0.0; MAX_DIM * MAX_DIM];
        let mut idx = [0usize; MAX_DIM];
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            for j in 0..d {
                let up = (corner >> j) & 1;
                idx[j] = base[j] + up;
                weight *= if up == 1 { w[j] } else { 1.0 - w[j] };
            }
            if weight == 0.0 {
                continue;
            }
            let s = g.ravel(&idx[..d]);
            val += weight * self.values[s];
            for j in 0..d {
                grad[j] += weight * self.grad_node(&idx[..d], j);
                for k in j..d {
                    let h = weight * self.hess_node(&idx[..d], j, k);
                    hess[j * d + k] += h;
                    if k != j {
                        hess[k * d + j] += h;
                    }
                }
            }
        }
        (val, grad, hess)
    }

    pub(crate) fn value(&self, x: &[f64]) -> f64 {
        let g = self.grid;
        let d = g.dim();
        let mut base = [0usize; MAX_DIM];
        let mut w = [0.0; MAX_DIM];
        for j in 0..d {
            let (i, f) = g.locate_x(j, x[j]);
            base[j] = i;
            w[j] = f;
        }
        let st = g.strides();
        let mut val = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut s = 0;
            for j in 0..d {
                let up = (corner >> j) & 1;
                s += (base[j] + up) * st[j];
                weight *= if up == 1 { w[j] } else { 1.0 - w[j] };
            }
            if weight != 0.0 {
                val += weight * self.values[s];
            }
        }
        val
    }
}

/// Residual of `L` on a solved surface.
#[derive(Debug, Clone)]
pub struct ResidualGrid {
    pub grid: GridSpec,
    /// `L` at every evaluated node; NaN elsewhere (faces and the last layer).
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualSummary {
    pub max_abs: f64,
    pub min: f64,
    /// `(t_index, space index)` of the most negative residual.
    pub argmin: (usize, usize),
    pub count: usize,
}

impl ResidualGrid {
    pub fn summary(&self) -> ResidualSummary {
        self.summary_where(|_, _| true)
    }

    /// Summary restricted to nodes where `keep(t, x)` holds.
    pub fn summary_where(&self, keep: impl Fn(f64, &[f64]) -> bool) -> ResidualSummary {
        let g = &self.grid;
        let ns = g.n_space();
        let d = g.dim();
        let mut x = [0.0; MAX_DIM];
        let mut out = ResidualSummary { max_abs: 0.0, min: f64::INFINITY, argmin: (0, 0), count: 0 };
        for (i, &r) in self.values.iter().enumerate() {
            if r.is_nan() {
                continue;
            }
            let (n, s) = (i / ns, i % ns);
            g.node_x(s, &mut x[..d]);
            if !keep(g.t_at(n), &x[..d]) {
                continue;
            }
            out.count += 1;
            out.max_abs = out.max_abs.max(r.abs());
            if r < out.min {
                out.min = r;
                out.argmin = (n, s);
            }
        }
        if out.count == 0 {
            out.min = 0.0;
        }
        out
    }
}

/// `L` evaluated with centred differences of the stored values at interior
/// nodes of layers `0..n_t - 1` (forward difference in time on layer 0).
pub fn residual(surface: &ValueSurface, model: &ModelSpec) -> Result<ResidualGrid, HjbError> {
    use rayon::prelude::*;
    let g = &surface.grid;
    let d = g.dim();
    let ns = g.n_space();
    let nt = g.n_t();
    let dt = g.dt();
    let mut out = vec![f64::NAN; g.n_nodes()];
    out[..(nt - 1) * ns]
        .par_chunks_mut(ns)
        .enumerate()
        .try_for_each(|(n, row)| -> Result<(), HjbError> {
            let t = g.t_at(n);
            let view = surface.layer_view(n);
            let (prev, next) = (if n > 0 { surface.layer(n - 1) } else { surface.layer(n) }, surface.layer(n + 1));
            let span = if n > 0 { 2.0 * dt } else { dt };
            let mut idx = [0usize; MAX_DIM];
            let mut x = [0.0; MAX_DIM];
            let mut pack = DerivativePack::zero(d);
            for s in 0..ns {
                g.unravel(s, &mut idx[..d]);
                if (0..d).any(|j| idx[j] == 0 || idx[j] == g.n_x(j) - 1) {
                    continue;
                }
                g.node_x(s, &mut x[..d]);
                pack.y = view.values[s];
                pack.q = (next[s] - prev[s]) / span;
                for j in 0..d {
                    pack.p[j] = view.grad_node(&idx[..d], j);
                    for k in 0..d {
                        pack.m[j * d + k] = view.hess_node(&idx[..d], j, k);
                    }
                }
                row[s] = operator_l(model, t, &x[..d], &pack)?.0;
            }
            Ok(())
        })?;
    Ok(ResidualGrid { grid: g.clone(), values: out })
}
