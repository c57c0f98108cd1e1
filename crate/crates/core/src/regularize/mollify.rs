//! Mollification with a compactly supported polynomial bump, one-sided in time.
//!
//! The kernel is `psi(s, y) = psi_t(s) prod_j b(y_j)` with
//! `b(u) = C (1 - u^2)^4` on `[-1, 1]` and `psi_t(s) = 2 b(2 s + 1)` on
//! `[-1, 0]`; `psi_delta(z) = delta^{-d-1} psi(z / delta)`. The smooth
//! function is
//!
//! ```text
//! w(t, x) = int W(t + s, x + y) psi_delta(s, y) ds dy
//! ```
//!
//! so `w(t, .)` averages `W` over `[t - delta, t]`. `W` is the piecewise
//! multilinear interpolant of node values, extended constantly outside the
//! grid. Integrals are split at grid lines and done with 5-point
//! Gauss–Legendre, which is exact for a linear factor times the degree-8
//! kernel; derivatives differentiate the kernel instead of the data.

use super::BoxSet;
use crate::hjb::{GridSpec, SurfaceField, TimeView};
use crate::model::{DerivativePack, MAX_DIM};

const GL_X: [f64; 5] = [-0.906_179_845_938_664, -0.538_469_310_105_683_1, 0.0, 0.538_469_310_105_683_1, 0.906_179_845_938_664];
const GL_W: [f64; 5] = [0.236_926_885_056_189_1, 0.478_628_670_499_366_5, 0.568_888_888_888_888_9, 0.478_628_670_499_366_5, 0.236_926_885_056_189_1];

/// Normalization: `int_{-1}^{1} (1 - u^2)^4 du = 256 / 315`.
const BUMP_C: f64 = 315.0 / 256.0;

/// The polynomial bump and its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bump;

impl Bump {
    pub fn value(u: f64) -> f64 {
        if u.abs() >= 1.0 {
            return 0.0;
        }
        let v = 1.0 - u * u;
        BUMP_C * v * v * v * v
    }

    pub fn d1(u: f64) -> f64 {
        if u.abs() >= 1.0 {
            return 0.0;
        }
        let v = 1.0 - u * u;
        -8.0 * BUMP_C * u * v * v * v
    }

    pub fn d2(u: f64) -> f64 {
        if u.abs() >= 1.0 {
            return 0.0;
        }
        let v = 1.0 - u * u;
        -8.0 * BUMP_C * v * v * (1.0 - 7.0 * u * u)
    }

    /// `int u^2 b(u) du`.
    pub const SECOND_MOMENT: f64 = 1.0 / 11.0;
}

/// Quadrature weights of the hat basis of one uniform axis against a kernel
/// centred at a query point: `w_i = int phi_i(y) K(y) dy`.
#[derive(Debug, Clone, Default)]
pub(crate) struct AxisWeights {
    pub first: usize,
    /// Kernel, first-derivative and second-derivative weights.
    pub w: [Vec<f64>; 3],
}

/// `kernel(y)` returns the three kernel values at offset `y` from the
/// query; the support is `[lo, hi]` in absolute coordinates.
fn axis_weights(x0: f64, h: f64, steps: usize, lo: f64, hi: f64, kernel: impl Fn(f64) -> [f64; 3]) -> AxisWeights {
    let last = steps;
    // cells are [x_i, x_{i+1}]; below x_0 and above x_last the data are constant
    let cell_of = |y: f64| ((y - x0) / h).floor();
    let first = cell_of(lo).clamp(0.0, last as f64) as usize;
    let end = (cell_of(hi) + 1.0).clamp(0.0, last as f64) as usize;
    let mut out = AxisWeights { first, w: [vec![0.0; end - first + 1], vec![0.0; end - first + 1], vec![0.0; end - first + 1]] };
    let mut add = |node: usize, weight: f64, k: [f64; 3]| {
        let i = node - first;
        for m in 0..3 {
            out.w[m][i] += weight * k[m];
        }
    };
    let mut a = lo;
    while a < hi {
        let c = cell_of(a + 1e-12 * h.max(a.abs() * 1e-3));
        let cell = c as i64;
        let b = if cell < 0 {
            x0.min(hi)
        } else if cell >= last as i64 {
            hi
        } else {
            (x0 + (cell + 1) as f64 * h).min(hi)
        };
        let b = if b <= a { hi.min(a + h) } else { b };
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for g in 0..5 {
            let y = mid + half * GL_X[g];
            let wq = half * GL_W[g];
            let k = kernel(y);
            if cell < 0 {
                add(0, wq, k);
            } else if cell >= last as i64 {
                add(last, wq, k);
            } else {
                let i = cell as usize;
                let f = (y - (x0 + i as f64 * h)) / h;
                add(i, wq * (1.0 - f), k);
                add(i + 1, wq * f, k);
            }
        }
        a = b;
    }
    out
}

/// Spatial weights at `x` on `axis`: value, `d/dx`, `d^2/dx^2`.
pub(crate) fn space_weights(grid: &GridSpec, axis: usize, x: f64, delta: f64) -> AxisWeights {
    let h = grid.dx(axis);
    axis_weights(grid.x_min[axis], h, grid.x_steps[axis], x - delta, x + delta, |y| {
        let u = (y - x) / delta;
        [Bump::value(u) / delta, -Bump::d1(u) / (delta * delta), Bump::d2(u) / (delta * delta * delta)]
    })
}

/// Time weights at `t`: value and `d/dt` (third slot unused).
pub(crate) fn time_weights(grid: &GridSpec, t: f64, delta: f64) -> AxisWeights {
    axis_weights(grid.t_start, grid.dt(), grid.t_steps, t - delta, t, |tau| {
        let s = (tau - t) / delta; // in [-1, 0]
        let u = 2.0 * s + 1.0;
        [2.0 * Bump::value(u) / delta, -4.0 * Bump::d1(u) / (delta * delta), 0.0]
    })
}

/// Parameters of a smooth supersolution.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SmoothParams {
    pub eps: f64,
    pub k: f64,
    pub delta: f64,
}

/// Mollified grid function with kernel-derivative evaluation at any point.
#[derive(Debug, Clone)]
pub struct SmoothSurface {
    params: SmoothParams,
    grid: GridSpec,
    values: Vec<f64>,
    b_set: Option<BoxSet>,
}

/// Mollifies node values on `grid` with radius `delta`.
pub fn mollify(grid: &GridSpec, values: Vec<f64>, delta: f64, eps: f64, k: f64) -> SmoothSurface {
    assert!(delta > 0.0, "delta must be positive");
    assert_eq!(values.len(), grid.n_nodes());
    let cell = (0..grid.dim()).map(|j| grid.dx(j)).fold(grid.dt(), f64::max);
    if delta < cell {
        log::warn!("mollifier radius {delta:e} is below one grid cell ({cell:e}); quadrature sees a sub-cell kernel");
    }
    SmoothSurface { params: SmoothParams { eps, k, delta }, grid: grid.clone(), values, b_set: None }
}

impl SmoothSurface {
    pub fn params(&self) -> SmoothParams {
        self.params
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn node_values(&self) -> &[f64] {
        &self.values
    }

    pub fn b_set(&self) -> Option<&BoxSet> {
        self.b_set.as_ref()
    }

    pub(crate) fn with_b_set(mut self, b: BoxSet) -> Self {
        self.b_set = Some(b);
        self
    }

    pub(crate) fn from_parts(params: SmoothParams, grid: GridSpec, values: Vec<f64>, b_set: Option<BoxSet>) -> Self {
        Self { params, grid, values, b_set }
    }

    /// Time slice: the time-mollified nodal profile and its time derivative.
    pub fn slice(&self, t: f64) -> SmoothSlice<'_> {
        let g = &self.grid;
        let ns = g.n_space();
        let tw = time_weights(g, t, self.params.delta);
        let mut prof = vec![0.0; ns];
        let mut dprof = vec![0.0; ns];
        for (i, (&w0, &w1)) in tw.w[0].iter().zip(&tw.w[1]).enumerate() {
            let layer = &self.values[(tw.first + i) * ns..(tw.first + i + 1) * ns];
            for s in 0..ns {
                prof[s] += w0 * layer[s];
                dprof[s] += w1 * layer[s];
            }
        }
        SmoothSlice { surface: self, prof, dprof }
    }

    /// Value at one point.
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        self.slice(t).value(x)
    }
}

/// A fixed-time slice of a [`SmoothSurface`].
pub struct SmoothSlice<'a> {
    surface: &'a SmoothSurface,
    prof: Vec<f64>,
    dprof: Vec<f64>,
}

impl SmoothSlice<'_> {
    fn weights(&self, x: &[f64]) -> [AxisWeights; MAX_DIM] {
        let g = &self.surface.grid;
        let mut out: [AxisWeights; MAX_DIM] = Default::default();
        for j in 0..g.dim() {
            out[j] = space_weights(g, j, x[j], self.surface.params.delta);
        }
        out
    }

    /// `sum_i data[i] prod_j w_j[order_j][i_j]`.
    fn contract(&self, data: &[f64], ws: &[AxisWeights], order: &[usize]) -> f64 {
        let g = &self.surface.grid;
        let d = g.dim();
        let st = g.strides();
        match d {
            1 => ws[0].w[order[0]].iter().enumerate().map(|(i, w)| w * data[ws[0].first + i]).sum(),
            _ => {
                let lens: Vec<usize> = (0..d).map(|j| ws[j].w[0].len()).collect();
                let total: usize = lens.iter().product();
                let mut acc = 0.0;
                let mut idx = [0usize; MAX_DIM];
                for _ in 0..total {
                    let mut w = 1.0;
                    let mut s = 0;
                    for j in 0..d {
                        w *= ws[j].w[order[j]][idx[j]];
                        s += (ws[j].first + idx[j]) * st[j];
                    }
                    acc += w * data[s];
                    for j in (0..d).rev() {
                        idx[j] += 1;
                        if idx[j] < lens[j] {
                            break;
                        }
                        idx[j] = 0;
                    }
                }
                acc
            }
        }
    }
}

impl TimeView for SmoothSlice<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let ws = self.weights(x);
        self.contract(&self.prof, &ws, &[0; MAX_DIM])
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let ws = self.weights(x);
        let d = self.surface.grid.dim();
        for j in 0..d {
            let mut order = [0; MAX_DIM];
            order[j] = 1;
            out[j] = self.contract(&self.prof, &ws, &order);
        }
    }

    fn pack(&self, x: &[f64]) -> DerivativePack {
        let ws = self.weights(x);
        let d = self.surface.grid.dim();
        let mut pack = DerivativePack::zero(d);
        pack.y = self.contract(&self.prof, &ws, &[0; MAX_DIM]);
        pack.q = self.contract(&self.dprof, &ws, &[0; MAX_DIM]);
        for j in 0..d {
            let mut order = [0; MAX_DIM];
            order[j] = 1;
            pack.p[j] = self.contract(&self.prof, &ws, &order);
            for k in j..d {
                let mut order = [0; MAX_DIM];
                if j == k {
                    order[j] = 2;
                } else {
                    order[j] = 1;
                    order[k] = 1;
                }
                let v = self.contract(&self.prof, &ws, &order);
                pack.m[j * d + k] = v;
                pack.m[k * d + j] = v;
            }
        }
        pack
    }
}

impl SurfaceField for SmoothSurface {
    fn dim(&self) -> usize {
        self.grid.dim()
    }

    fn t_range(&self) -> (f64, f64) {
        (self.grid.t_start, self.grid.t_end)
    }

    fn x_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.grid.x_min.clone(), self.grid.x_max.clone())
    }

    fn at_time(&self, t: f64) -> Box<dyn TimeView + '_> {
        Box::new(self.slice(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gl_integral(f: impl Fn(f64) -> f64, a: f64, b: f64, pieces: usize) -> f64 {
        let h = (b - a) / pieces as f64;
        (0..pieces)
            .map(|p| {
                let mid = a + (p as f64 + 0.5) * h;
                (0..5).map(|g| 0.5 * h * GL_W[g] * f(mid + 0.5 * h * GL_X[g])).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn bump_normalized_with_second_moment() {
        assert!((gl_integral(Bump::value, -1.0, 1.0, 4) - 1.0).abs() < 1e-14);
        assert!((gl_integral(|u| u * u * Bump::value(u), -1.0, 1.0, 64) - Bump::SECOND_MOMENT).abs() < 1e-13);
        // derivatives against finite differences
        for &u in &[-0.7, -0.2, 0.0, 0.33, 0.91] {
            let h = 1e-6;
            assert!(((Bump::value(u + h) - Bump::value(u - h)) / (2.0 * h) - Bump::d1(u)).abs() < 1e-7);
            assert!(((Bump::d1(u + h) - Bump::d1(u - h)) / (2.0 * h) - Bump::d2(u)).abs() < 1e-6);
        }
    }

    #[test]
    fn axis_weights_partition_unity() {
        let g = GridSpec::uniform_1d(1.0, 10, 0.0, 1.0, 20);
        for &x in &[-0.93, -0.5, 0.0, 0.0312, 0.99, 1.0] {
            let w = space_weights(&g, 0, x, 0.17);
            assert!((w.w[0].iter().sum::<f64>() - 1.0).abs() < 1e-13);
            assert!(w.w[1].iter().sum::<f64>().abs() < 1e-10);
        }
        let tw = time_weights(&g, 0.05, 0.3);
        assert!((tw.w[0].iter().sum::<f64>() - 1.0).abs() < 1e-13);
        assert_eq!(tw.first, 0);
    }
}
