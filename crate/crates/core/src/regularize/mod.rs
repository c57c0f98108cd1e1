//! Smooth supersolutions from shaken coefficients.
//!
//! Pipeline: solve the shaken equation `H_eps = 0` with terminal data
//! `g + 2 eps` on a grid extended slightly below `t = 0`, take the quadratic
//! inf-convolution of the node values, mollify with a kernel supported on
//! `[-delta, 0] x [-delta, delta]^d`, and certify the result on a check grid.

mod infconv;
mod io;
mod mollify;

pub use infconv::{axis_costs, inf_convolution, InfConvolution};
pub use io::{read_smooth, write_smooth};
pub use mollify::{mollify, Bump, SmoothParams, SmoothSlice, SmoothSurface};

use crate::hjb::{self, GridSpec, HjbError, SolveOptions, SurfaceField, ValueSurface};
use crate::model::{operator_l, shake_lattice, ModelError, ModelSpec, MAX_DIM};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegularizeError {
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("target does not dominate v + eta on B: margin {margin:.3e} at t={t}, x={x:?}")]
    Precondition { margin: f64, t: f64, x: Vec<f64> },
    #[error("no certified surface: {reason}; best min residual {best_residual:.3e} (eps={eps}, delta={delta:e})")]
    Exhausted { reason: String, best_residual: f64, eps: f64, delta: f64 },
}

/// Compact set `[t_lo, t_hi] x prod [lo_j, hi_j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSet {
    pub t_lo: f64,
    pub t_hi: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    /// The central `fraction` of the spatial grid box over `[0, T]`.
    pub fn central(grid: &GridSpec, fraction: f64) -> Self {
        let d = grid.dim();
        let (mut lo, mut hi) = (vec![0.0; d], vec![0.0; d]);
        for j in 0..d {
            let c = 0.5 * (grid.x_min[j] + grid.x_max[j]);
            let h = 0.5 * fraction * (grid.x_max[j] - grid.x_min[j]);
            lo[j] = c - h;
            hi[j] = c + h;
        }
        Self { t_lo: grid.t_start.max(0.0), t_hi: grid.t_end, lo, hi }
    }

    pub fn contains(&self, t: f64, x: &[f64]) -> bool {
        let eps = 1e-12;
        t >= self.t_lo - eps
            && t <= self.t_hi + eps
            && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= l - eps && *v <= h + eps)
    }
}

/// Tensor check grid: `n_t` times evenly spaced in `[t_lo, t_hi)` plus the
/// terminal time `t_hi`, and `n_x[j]` points per axis including both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckGrid {
    pub region: BoxSet,
    pub n_t: usize,
    pub n_x: Vec<usize>,
}

impl CheckGrid {
    pub fn new(region: BoxSet, n_t: usize, n_x: Vec<usize>) -> Self {
        Self { region, n_t, n_x }
    }

    pub fn times(&self) -> Vec<f64> {
        let r = &self.region;
        (0..self.n_t).map(|i| r.t_lo + (r.t_hi - r.t_lo) * i as f64 / self.n_t as f64).collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        let r = &self.region;
        let d = r.lo.len();
        let total: usize = self.n_x.iter().product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            out.push(
                (0..d)
                    .map(|j| {
                        let n = self.n_x[j];
                        if n <= 1 {
                            0.5 * (r.lo[j] + r.hi[j])
                        } else {
                            r.lo[j] + (r.hi[j] - r.lo[j]) * idx[j] as f64 / (n - 1) as f64
                        }
                    })
                    .collect(),
            );
            for j in (0..d).rev() {
                idx[j] += 1;
                if idx[j] < self.n_x[j] {
                    break;
                }
                idx[j] = 0;
            }
        }
        out
    }

    fn validate(&self, dim: usize) -> Result<(), RegularizeError> {
        if self.region.lo.len() != dim || self.region.hi.len() != dim || self.n_x.len() != dim {
            return Err(RegularizeError::Invalid("check grid dimension mismatch".into()));
        }
        if self.n_t == 0 || self.n_x.iter().any(|&n| n == 0) || !(self.region.t_lo < self.region.t_hi) {
            return Err(RegularizeError::Invalid("empty check grid".into()));
        }
        Ok(())
    }
}

/// Solution of the shaken equation.
#[derive(Debug, Clone)]
pub struct ShakenSurface {
    pub eps: f64,
    pub surface: ValueSurface,
    /// Empirical constant of `|w_eps - g_eps| <= c sqrt(T - t)` near `T`.
    pub c_reg: f64,
}

impl ShakenSurface {
    /// Length of the terminal window on which `w_eps >= g + eps`.
    pub fn c_eps(&self) -> f64 {
        if self.c_reg <= 0.0 {
            f64::INFINITY
        } else {
            (self.eps / self.c_reg).powi(2)
        }
    }
}

/// Number of layers before `T` used to estimate `c_reg`.
const C_REG_LAYERS: usize = 10;

/// Solves `H_eps = 0` with terminal `g + 2 eps`. `shake_points` defaults to
/// [`shake_lattice`]`(eps, d)`.
pub fn solve_shaken(
    model: &ModelSpec,
    grid: &GridSpec,
    eps: f64,
    shake_points: Option<&[Vec<f64>]>,
) -> Result<ShakenSurface, RegularizeError> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(RegularizeError::Invalid(format!("eps {eps} outside [0, 1]")));
    }
    let shakes = match shake_points {
        Some(s) => s.to_vec(),
        None => shake_lattice(eps, model.dim()),
    };
    for b in &shakes {
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > eps * (1.0 + 1e-12) + 1e-15 {
            return Err(RegularizeError::Invalid(format!("shake point {b:?} outside ball of radius {eps}")));
        }
    }
    let opts = SolveOptions { shake_points: Some(shakes), terminal_shift: 2.0 * eps, ..Default::default() };
    let surface = hjb::solve_with(model, grid, &opts)?;
    let c_reg = estimate_c_reg(model, &surface, eps);
    Ok(ShakenSurface { eps, surface, c_reg })
}

fn estimate_c_reg(model: &ModelSpec, s: &ValueSurface, eps: f64) -> f64 {
    let g = s.grid();
    let d = g.dim();
    let nt = g.n_t();
    let mut x = [0.0; MAX_DIM];
    let mut c: f64 = 0.0;
    for n in nt.saturating_sub(C_REG_LAYERS + 1)..nt - 1 {
        let tau = g.t_end - g.t_at(n);
        for (s_idx, &v) in s.layer(n).iter().enumerate() {
            g.node_x(s_idx, &mut x[..d]);
            let ge = model.payoff(&x[..d]) + 2.0 * eps;
            c = c.max((v - ge).abs() / tau.sqrt());
        }
    }
    c
}

/// Outcome of [`verify_supersolution`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertReport {
    pub passed: bool,
    pub tol: f64,
    pub min_residual: f64,
    pub argmin_t: f64,
    pub argmin_x: Vec<f64>,
    /// `min (w - g)` on the terminal check layer.
    pub terminal_margin: f64,
    pub terminal_argmin_x: Vec<f64>,
    pub n_checked: usize,
}

/// Evaluates `L(t, x, w, w_t, Dw, D^2 w)` with the analytic kernel
/// derivatives at every check node; PASS iff the minimum is `>= -tol` and
/// `w >= g - tol` on the terminal layer.
pub fn verify_supersolution(
    smooth: &dyn SurfaceField,
    model: &ModelSpec,
    check: &CheckGrid,
    tol: f64,
) -> Result<CertReport, RegularizeError> {
    check.validate(model.dim())?;
    let points = check.points();
    let times = check.times();
    let rows: Vec<Result<(f64, usize), ModelError>> = times
        .par_iter()
        .map(|&t| {
            let view = smooth.at_time(t);
            let mut best = (f64::INFINITY, 0);
            for (i, x) in points.iter().enumerate() {
                let (l, _) = operator_l(model, t, x, &view.pack(x))?;
                if l < best.0 {
                    best = (l, i);
                }
            }
            Ok(best)
        })
        .collect();
    let mut min = (f64::INFINITY, 0, 0);
    for (n, row) in rows.into_iter().enumerate() {
        let (l, i) = row?;
        if l < min.0 {
            min = (l, n, i);
        }
    }
    let term = smooth.at_time(check.region.t_hi);
    let mut tmin = (f64::INFINITY, 0);
    for (i, x) in points.iter().enumerate() {
        let m = term.value(x) - model.payoff(x);
        if m < tmin.0 {
            tmin = (m, i);
        }
    }
    let passed = min.0 >= -tol && tmin.0 >= -tol;
    Ok(CertReport {
        passed,
        tol,
        min_residual: min.0,
        argmin_t: times[min.1],
        argmin_x: points[min.2].clone(),
        terminal_margin: tmin.0,
        terminal_argmin_x: points[tmin.1].clone(),
        n_checked: points.len() * (times.len() + 1),
    })
}

/// The function `phi` that the supersolution must stay below on `B`.
pub enum Target<'a> {
    /// `phi = v + margin` with `v` the unshaken grid solution.
    ValuePlusMargin(f64),
    Function(&'a (dyn Fn(f64, &[f64]) -> f64 + Sync)),
}

/// Knobs of [`build_smooth_supersolution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizeOptions {
    pub eps_ladder: Vec<f64>,
    pub tol: f64,
    /// Per-axis weights `(t, x_1, ..., x_d)` of the inf-convolution metric;
    /// empty means 1 on every axis.
    pub axis_weights: Vec<f64>,
    /// Length of the time extension below `t = 0`; `None` means half the
    /// first ladder rung.
    pub time_extension: Option<f64>,
    pub delta_halvings: usize,
    /// Check-grid resolution `(n_t, n_x)`, applied per axis.
    pub check_n_t: usize,
    pub check_n_x: usize,
    /// Fraction of the spatial grid covered by the residual check.
    pub check_fraction: f64,
}

impl Default for RegularizeOptions {
    fn default() -> Self {
        Self {
            eps_ladder: vec![0.2, 0.1, 0.05, 0.025, 0.0125],
            tol: 1e-3,
            axis_weights: Vec::new(),
            time_extension: None,
            delta_halvings: 6,
            check_n_t: 50,
            check_n_x: 100,
            check_fraction: 2.0 / 3.0,
        }
    }
}

/// One rung of the ε-ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsPoint {
    pub eps: f64,
    /// `max_B (w_eps - w_0)`.
    pub c_b: f64,
}

/// One mollifier radius tried.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaAttempt {
    pub delta: f64,
    pub min_residual: f64,
    pub terminal_margin: f64,
    /// `min_B (phi - w)`.
    pub b_margin: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildReport {
    pub eta: f64,
    pub eps: f64,
    pub k: f64,
    pub delta: f64,
    pub eps_curve: Vec<EpsPoint>,
    pub c_reg: f64,
    pub c_eps: f64,
    /// `min_B (phi - v) - eta` before construction.
    pub precheck_margin: f64,
    pub max_displacement_sq: f64,
    pub attempts: Vec<DeltaAttempt>,
    pub certificate: CertReport,
    pub check: CheckGrid,
}

pub struct Built {
    pub surface: SmoothSurface,
    pub report: BuildReport,
    /// Unshaken grid solution on the extended grid.
    pub value: ValueSurface,
}

/// Extends `grid` below `t = 0` by at least `ext`, keeping the time step.
pub fn extend_time(grid: &GridSpec, ext: f64) -> GridSpec {
    let dt = grid.dt();
    let m = (ext / dt - 1e-9).ceil().max(0.0) as usize;
    let mut g = grid.clone();
    g.t_steps += m;
    g.t_start = grid.t_start - m as f64 * dt;
    g
}

/// Chooses `eps` on the ladder, `k`, and `delta` and returns the first
/// certified smooth supersolution with `w <= phi` on `b_set`.
///
/// `grid` covers `[0, T]`; the solve runs on [`extend_time`] of it with
/// coefficients frozen at `t = 0` below zero.
pub fn build_smooth_supersolution(
    model: &ModelSpec,
    grid: &GridSpec,
    phi: Target<'_>,
    b_set: &BoxSet,
    eta: f64,
    opts: &RegularizeOptions,
) -> Result<Built, RegularizeError> {
    let d = model.dim();
    if !(eta > 0.0) {
        return Err(RegularizeError::Invalid(format!("eta must be positive, got {eta}")));
    }
    if opts.eps_ladder.is_empty() || opts.eps_ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(RegularizeError::Invalid("eps ladder must be nonempty and decreasing".into()));
    }
    let weights = if opts.axis_weights.is_empty() { vec![1.0; d + 1] } else { opts.axis_weights.clone() };
    if weights.len() != d + 1 || weights.iter().any(|&w| !(w > 0.0)) {
        return Err(RegularizeError::Invalid(format!("axis weights need {} positive entries", d + 1)));
    }
    if b_set.lo.len() != d || b_set.hi.len() != d {
        return Err(RegularizeError::Invalid("B has the wrong dimension".into()));
    }
    let ext = opts.time_extension.unwrap_or(0.5 * opts.eps_ladder[0]);
    let xgrid = extend_time(grid, ext);
    let t0 = grid.t_start.max(0.0);

    let w0 = solve_shaken(model, &xgrid, 0.0, None)?;
    let b_check = CheckGrid::new(
        BoxSet { t_lo: b_set.t_lo.max(t0), t_hi: b_set.t_hi, lo: b_set.lo.clone(), hi: b_set.hi.clone() },
        opts.check_n_t,
        vec![opts.check_n_x; d],
    );
    b_check.validate(d)?;
    let b_times = b_check.times();
    let b_points = b_check.points();
    let phi_at = |t: f64, x: &[f64], v_view: &dyn hjb::TimeView| match &phi {
        Target::ValuePlusMargin(m) => v_view.value(x) + m,
        Target::Function(f) => f(t, x),
    };

    // phi >= v + eta on B
    let mut pre = (f64::INFINITY, 0.0, Vec::new());
    for &t in b_times.iter().chain(std::iter::once(&b_check.region.t_hi)) {
        let view = w0.surface.at_time(t);
        for x in &b_points {
            let m = phi_at(t, x, view.as_ref()) - view.value(x) - eta;
            if m < pre.0 {
                pre = (m, t, x.clone());
            }
        }
    }
    if pre.0 < -1e-12 {
        return Err(RegularizeError::Precondition { margin: pre.0, t: pre.1, x: pre.2 });
    }

    // eps ladder
    let mut curve = Vec::new();
    let mut chosen = None;
    for &eps in &opts.eps_ladder {
        let we = solve_shaken(model, &xgrid, eps, None)?;
        let c_b = max_diff_on(&xgrid, we.surface.values(), w0.surface.values(), b_set);
        log::info!("eps={eps}: max_B(w_eps - w_0) = {c_b:.6e}");
        curve.push(EpsPoint { eps, c_b });
        // c_b is 2 eps exactly in exact arithmetic for translation-invariant
        // models, so allow for roundoff
        if c_b <= 0.5 * eta * (1.0 + 1e-12) + 1e-12 {
            chosen = Some(we);
            break;
        }
    }
    let Some(we) = chosen else {
        return Err(RegularizeError::Exhausted {
            reason: format!("max_B(w_eps - w_0) never reached eta/2 = {}", 0.5 * eta),
            best_residual: f64::NEG_INFINITY,
            eps: *opts.eps_ladder.last().unwrap(),
            delta: 0.0,
        });
    };
    let eps = we.eps;
    let c_eps = we.c_eps();

    // inf-convolution with the semi-concavity budget
    let sup = we.surface.max_abs();
    let k = (8.0 * sup / (eps * eps)).ceil().max(1.0);
    let mut shape = vec![xgrid.n_t()];
    let mut spacing = vec![xgrid.dt()];
    for j in 0..d {
        shape.push(xgrid.n_x(j));
        spacing.push(xgrid.dx(j));
    }
    let costs = axis_costs(k, &spacing, &weights);
    let ic = inf_convolution(we.surface.values(), &shape, &costs);
    let max_disp = max_displacement_sq(&shape, &spacing, &weights, &ic.argmin);
    log::info!("k={k:e}, max |z - z_k|^2 = {max_disp:.3e} (bound {:.3e})", 2.0 * sup / k);

    let check = CheckGrid::new(BoxSet::central(grid, opts.check_fraction), opts.check_n_t, vec![opts.check_n_x; d]);
    let mut attempts = Vec::new();
    let mut delta = 0.5 * eps;
    while delta >= c_eps {
        delta *= 0.5;
    }
    let mut best: Option<(f64, f64)> = None;
    for _ in 0..=opts.delta_halvings {
        let smooth = mollify(&xgrid, ic.values.clone(), delta, eps, k).with_b_set(b_set.clone());
        let cert = verify_supersolution(&smooth, model, &check, opts.tol)?;
        let mut b_margin = f64::INFINITY;
        for &t in b_times.iter().chain(std::iter::once(&b_check.region.t_hi)) {
            let view = smooth.at_time(t);
            let vview = w0.surface.at_time(t);
            for x in &b_points {
                b_margin = b_margin.min(phi_at(t, x, vview.as_ref()) - view.value(x));
            }
        }
        let passed = cert.passed && b_margin >= 0.0;
        log::info!(
            "delta={delta:e}: min residual {:.3e}, terminal margin {:.3e}, B margin {b_margin:.3e}",
            cert.min_residual,
            cert.terminal_margin
        );
        attempts.push(DeltaAttempt {
            delta,
            min_residual: cert.min_residual,
            terminal_margin: cert.terminal_margin,
            b_margin,
            passed,
        });
        if best.is_none_or(|(r, _)| cert.min_residual > r) {
            best = Some((cert.min_residual, delta));
        }
        if passed {
            let report = BuildReport {
                eta,
                eps,
                k,
                delta,
                eps_curve: curve,
                c_reg: we.c_reg,
                c_eps,
                precheck_margin: pre.0,
                max_displacement_sq: max_disp,
                attempts,
                certificate: cert,
                check,
            };
            return Ok(Built { surface: smooth, report, value: w0.surface });
        }
        delta *= 0.5;
    }
    let (best_residual, best_delta) = best.unwrap_or((f64::NEG_INFINITY, delta));
    Err(RegularizeError::Exhausted { reason: "delta halvings exhausted".into(), best_residual, eps, delta: best_delta })
}

/// `max (a - b)` over grid nodes inside `b_set`.
fn max_diff_on(grid: &GridSpec, a: &[f64], b: &[f64], b_set: &BoxSet) -> f64 {
    let d = grid.dim();
    let ns = grid.n_space();
    let mut x = [0.0; MAX_DIM];
    let mut out = f64::NEG_INFINITY;
    for n in 0..grid.n_t() {
        let t = grid.t_at(n);
        for s in 0..ns {
            grid.node_x(s, &mut x[..d]);
            if b_set.contains(t, &x[..d]) {
                out = out.max(a[n * ns + s] - b[n * ns + s]);
            }
        }
    }
    out
}

/// `max_z |z - z_k(z)|^2` in the weighted metric.
pub fn max_displacement_sq(shape: &[usize], spacing: &[f64], weights: &[f64], argmin: &[usize]) -> f64 {
    let m = shape.len();
    let mut strides = vec![1usize; m];
    for a in (0..m - 1).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    argmin
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            (0..m)
                .map(|a| {
                    let di = ((i / strides[a]) % shape[a]) as f64 - ((j / strides[a]) % shape[a]) as f64;
                    weights[a] * (di * spacing[a]).powi(2)
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}
