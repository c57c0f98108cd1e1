//! Explicit monotone backward scheme.
//!
//! One step from layer `n + 1` to layer `n` reads, at every interior node,
//!
//! ```text
//! phi^n = phi^{n+1} + dt * max_c [ 1/2 Tr(Sigma_c D^2 phi) - c_c . D_up phi - r_c(phi^n, D_0 phi) ]
//! ```
//!
//! where `c` ranges over pairs (adverse point, shake of the base point),
//! `c_c` is the model's upwind drift, `r_c` the remaining first-order part
//! evaluated with centred differences, and the `phi^n`-dependence of `r_c`
//! is resolved by a per-node fixed point. Cross derivatives use the
//! seven-point stencil matching the sign of the covariance.

use rayon::prelude::*;
use serde::Serialize;

use super::{BoundaryMode, GridSpec, HjbError, ValueSurface};
use crate::model::{ModelSpec, MAX_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    /// Relaxation of the fixed-point update, in `(0, 1]`.
    pub relaxation: f64,
    pub fixed_point_tol: f64,
    pub fixed_point_rounds: usize,
    /// Shifts `[b_t, b_x...]` of the base point; the operator takes the
    /// minimum over them. `None` means the origin only.
    pub shake_points: Option<Vec<Vec<f64>>>,
    /// Constant added to the terminal data.
    pub terminal_shift: f64,
    /// Number of layers sampled for the CFL estimate.
    pub cfl_layers: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            relaxation: 1.0,
            fixed_point_tol: 1e-10,
            fixed_point_rounds: 50,
            shake_points: None,
            terminal_shift: 0.0,
            cfl_layers: 5,
        }
    }
}

/// Diagnostics gathered while solving.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolveStats {
    /// Largest `dt * |centre coefficient|` over sampled nodes and controls.
    pub cfl: f64,
    /// Bound on the same quantity from `lipschitz_K` alone.
    pub cfl_k_bound: f64,
    /// Smallest neighbour weight (divided by `dt`) over sampled nodes; negative
    /// values mean the centred first-order part breaks monotonicity.
    pub monotone_margin: f64,
    /// Sampled nodes where the covariance is not diagonally dominant.
    pub non_dominant_nodes: usize,
    /// Most fixed-point rounds used at any node.
    pub max_rounds: usize,
    /// `max|g| e^{K T} + K T`.
    pub value_bound: f64,
    pub max_abs_value: f64,
}

/// Solves with default options.
pub fn solve(model: &ModelSpec, grid: &GridSpec) -> Result<ValueSurface, HjbError> {
    solve_with(model, grid, &SolveOptions::default())
}

struct Control {
    a: usize,
    shake: [f64; MAX_DIM + 1],
}

pub fn solve_with(model: &ModelSpec, grid: &GridSpec, opts: &SolveOptions) -> Result<ValueSurface, HjbError> {
    grid.validate()?;
    let d = grid.dim();
    if d != model.dim() {
        return Err(HjbError::Grid(format!("grid dimension {d} differs from model dimension {}", model.dim())));
    }
    if (grid.t_end - model.horizon()).abs() > 1e-12 * (1.0 + model.horizon()) {
        return Err(HjbError::Grid(format!("grid ends at {} but the horizon is {}", grid.t_end, model.horizon())));
    }
    if !(opts.relaxation > 0.0 && opts.relaxation <= 1.0) {
        return Err(HjbError::Grid(format!("relaxation {} outside (0, 1]", opts.relaxation)));
    }
    if model.a_points().len() > u16::MAX as usize {
        return Err(HjbError::Grid("too many adverse points".into()));
    }
    let origin = vec![vec![0.0; d + 1]];
    let shakes = opts.shake_points.as_ref().unwrap_or(&origin);
    let mut controls = Vec::new();
    for a in 0..model.a_points().len() {
        for b in shakes {
            if b.len() != d + 1 {
                return Err(HjbError::Grid(format!("shake point {b:?} has wrong length")));
            }
            let mut shake = [0.0; MAX_DIM + 1];
            shake[..d + 1].copy_from_slice(b);
            controls.push(Control { a, shake });
        }
    }

    let mut stats = cfl_stats(model, grid, &controls, opts.cfl_layers)?;
    if stats.cfl > 1.0 {
        return Err(HjbError::Cfl { cfl: stats.cfl });
    }
    if stats.monotone_margin < 0.0 {
        log::warn!("scheme not monotone at sampled nodes (margin {:.3e})", stats.monotone_margin);
    }
    if stats.non_dominant_nodes > 0 {
        log::warn!("{} sampled nodes lack diagonal dominance", stats.non_dominant_nodes);
    }

    let ns = grid.n_space();
    let nt = grid.n_t();
    let mut values = vec![0.0; grid.n_nodes()];
    let mut policy = vec![0u16; grid.n_nodes()];

    // terminal layer
    let terminal = |x: &[f64]| {
        let g = model.payoff(x);
        if opts.terminal_shift != 0.0 {
            g + opts.terminal_shift
        } else {
            g
        }
    };
    {
        let last = &mut values[(nt - 1) * ns..];
        let mut x = [0.0; MAX_DIM];
        for (s, v) in last.iter_mut().enumerate() {
            grid.node_x(s, &mut x[..d]);
            *v = terminal(&x[..d]);
        }
    }

    let ctx = Ctx { model, grid, controls: &controls, opts };
    let mut max_rounds = 0;
    for n in (0..nt - 1).rev() {
        let (head, tail) = values.split_at_mut((n + 1) * ns);
        let cur = &mut head[n * ns..];
        let next = &tail[..ns];
        let pol = &mut policy[n * ns..(n + 1) * ns];
        const CHUNK: usize = 256;
        let results: Vec<Result<usize, HjbError>> = cur
            .par_chunks_mut(CHUNK)
            .zip(pol.par_chunks_mut(CHUNK))
            .enumerate()
            .map(|(c, (vals, pols))| ctx.step_chunk(n, next, c * CHUNK, vals, pols))
            .collect();
        for r in results {
            max_rounds = max_rounds.max(r?);
        }
        apply_boundary(model, grid, n, cur, pol, &terminal);
    }
    // the terminal layer reports the policy of the layer before it
    let (head, tail) = policy.split_at_mut((nt - 1) * ns);
    tail.copy_from_slice(&head[(nt - 2) * ns..]);

    stats.max_rounds = max_rounds;
    let gmax = values[(nt - 1) * ns..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let kt = model.lipschitz_k() * (grid.t_end - grid.t_start);
    stats.value_bound = gmax * kt.exp() + kt;
    stats.max_abs_value = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(ValueSurface::from_parts(grid.clone(), values, policy, model.hash(), stats))
}

struct Ctx<'a> {
    model: &'a ModelSpec,
    grid: &'a GridSpec,
    controls: &'a [Control],
    opts: &'a SolveOptions,
}

/// Finite differences of one layer at one node.
struct Diffs {
    v: f64,
    fwd: [f64; MAX_DIM],
    bwd: [f64; MAX_DIM],
    cen: [f64; MAX_DIM],
    dd: [f64; MAX_DIM],
    /// Seven-point cross differences for positive and negative covariance.
    cross_pos: [f64; MAX_DIM * MAX_DIM],
    cross_neg: [f64; MAX_DIM * MAX_DIM],
}

impl Diffs {
    fn at(grid: &GridSpec, layer: &[f64], s: usize) -> Self {
        let d = grid.dim();
        let st = grid.strides();
        let v = layer[s];
        let mut out = Diffs {
            v,
            fwd: [0.0; MAX_DIM],
            bwd: [0.0; MAX_DIM],
            cen: [0.0; MAX_DIM],
            dd: [0.0; MAX_DIM],
            cross_pos: [0.0; MAX_DIM * MAX_DIM],
            cross_neg: [0.0; MAX_DIM * MAX_DIM],
        };
        for j in 0..d {
            let h = grid.dx(j);
            let (up, dn) = (layer[s + st[j]], layer[s - st[j]]);
            out.fwd[j] = (up - v) / h;
            out.bwd[j] = (v - dn) / h;
            out.cen[j] = (up - dn) / (2.0 * h);
            out.dd[j] = (up - 2.0 * v + dn) / (h * h);
        }
        for j in 0..d {
            for k in j + 1..d {
                let (a, b) = (st[j], st[k]);
                let axes = layer[s + a] + layer[s - a] + layer[s + b] + layer[s - b];
                let hh = 2.0 * grid.dx(j) * grid.dx(k);
                let pos = (2.0 * v - axes + layer[s + a + b] + layer[s - a - b]) / hh;
                let neg = -(2.0 * v - axes + layer[s + a - b] + layer[s - a + b]) / hh;
                out.cross_pos[j * d + k] = pos;
                out.cross_neg[j * d + k] = neg;
            }
        }
        out
    }
}

impl Ctx<'_> {
    /// Advances one chunk of layer `n`; returns the most fixed-point rounds used.
    fn step_chunk(&self, n: usize, next: &[f64], offset: usize, vals: &mut [f64], pols: &mut [u16]) -> Result<usize, HjbError> {
        let g = self.grid;
        let m = self.model;
        let d = g.dim();
        let t = g.t_at(n);
        let dt = g.dt();
        let nc = self.controls.len();
        let mut linear = vec![0.0; nc];
        let mut xs = vec![[0.0; MAX_DIM]; nc];
        let mut ts = vec![0.0; nc];
        let mut idx = [0usize; MAX_DIM];
        let mut x = [0.0; MAX_DIM];
        let mut sig = [0.0; MAX_DIM * MAX_DIM];
        let mut c = [0.0; MAX_DIM];
        let mut max_rounds = 0;
        for (i, (out, pol)) in vals.iter_mut().zip(pols.iter_mut()).enumerate() {
            let s = offset + i;
            g.unravel(s, &mut idx[..d]);
            if (0..d).any(|j| idx[j] == 0 || idx[j] == g.n_x(j) - 1) {
                continue; // faces are set by the boundary rule
            }
            g.node_x(s, &mut x[..d]);
            let df = Diffs::at(g, next, s);
            for (ci, ctl) in self.controls.iter().enumerate() {
                let a = &m.a_points()[ctl.a];
                ts[ci] = m.clamp_time(t + ctl.shake[0]);
                for j in 0..d {
                    xs[ci][j] = x[j] + ctl.shake[j + 1];
                }
                let xc = &xs[ci][..d];
                m.sigma_x(ts[ci], xc, a, &mut sig[..d * d]);
                m.upwind_drift(ts[ci], xc, a, &mut c[..d]);
                let mut acc = 0.0;
                for j in 0..d {
                    let cov_jj: f64 = (0..d).map(|l| sig[j * d + l] * sig[j * d + l]).sum();
                    acc += 0.5 * cov_jj * df.dd[j];
                    for k in j + 1..d {
                        let cov: f64 = (0..d).map(|l| sig[j * d + l] * sig[k * d + l]).sum();
                        acc += cov * if cov >= 0.0 { df.cross_pos[j * d + k] } else { df.cross_neg[j * d + k] };
                    }
                    let up = if c[j] > 0.0 { df.bwd[j] } else { df.fwd[j] };
                    acc -= c[j] * (up - df.cen[j]);
                }
                linear[ci] = acc;
            }
            // fixed point in the node value
            let mut y = df.v;
            let mut rounds = 0;
            loop {
                rounds += 1;
                let mut best = f64::NEG_INFINITY;
                let mut best_c = 0;
                for (ci, ctl) in self.controls.iter().enumerate() {
                    let a = &m.a_points()[ctl.a];
                    let val = linear[ci] - m.first_order(ts[ci], &xs[ci][..d], y, &df.cen[..d], a)?;
                    if val > best {
                        best = val;
                        best_c = ci;
                    }
                }
                let target = df.v + dt * best;
                let y_new = y + self.opts.relaxation * (target - y);
                let change = (y_new - y).abs();
                y = y_new;
                *pol = self.controls[best_c].a as u16;
                if change <= self.opts.fixed_point_tol && rounds > 1 || !best.is_finite() {
                    break;
                }
                if rounds >= self.opts.fixed_point_rounds {
                    return Err(HjbError::NonConvergence { t_index: n, node: idx[..d].to_vec(), residual: change });
                }
            }
            if !y.is_finite() {
                return Err(HjbError::NonConvergence { t_index: n, node: idx[..d].to_vec(), residual: f64::NAN });
            }
            *out = y;
            max_rounds = max_rounds.max(rounds);
        }
        Ok(max_rounds)
    }
}

fn apply_boundary(
    model: &ModelSpec,
    grid: &GridSpec,
    n: usize,
    layer: &mut [f64],
    pol: &mut [u16],
    terminal: &dyn Fn(&[f64]) -> f64,
) {
    let d = grid.dim();
    let st = grid.strides();
    let ns = grid.n_space();
    let mut idx = [0usize; MAX_DIM];
    let mut x = [0.0; MAX_DIM];
    let t = grid.t_at(n);
    // Axis j sets its two faces where later axes are interior; faces of
    // earlier axes are already final by then.
    for j in 0..d {
        let nj = grid.n_x(j);
        for s in 0..ns {
            grid.unravel(s, &mut idx[..d]);
            let i = idx[j];
            if i != 0 && i != nj - 1 {
                continue;
            }
            if (j + 1..d).any(|k| idx[k] == 0 || idx[k] == grid.n_x(k) - 1) {
                continue;
            }
            let (s1, s2) = if i == 0 { (s + st[j], s + 2 * st[j]) } else { (s - st[j], s - 2 * st[j]) };
            pol[s] = pol[s1];
            layer[s] = match grid.boundary_mode {
                BoundaryMode::ExtrapolateLinear => 2.0 * layer[s1] - layer[s2],
                BoundaryMode::ClampPayoff => {
                    grid.node_x(s, &mut x[..d]);
                    let r = model
                        .finance()
                        .map(|f| (f.r_lend)(model.clamp_time(t), &x[..d], &model.a_points()[0]))
                        .unwrap_or(0.0);
                    terminal(&x[..d]) * (-r * (grid.t_end - t)).exp()
                }
            };
        }
    }
}

/// CFL number and monotonicity margin sampled on a few layers.
fn cfl_stats(model: &ModelSpec, grid: &GridSpec, controls: &[Control], layers: usize) -> Result<SolveStats, HjbError> {
    let d = grid.dim();
    let dt = grid.dt();
    let nt = grid.n_t();
    let ns = grid.n_space();
    let k = model.lipschitz_k();
    let mut stats = SolveStats { monotone_margin: f64::INFINITY, ..Default::default() };
    stats.cfl_k_bound = dt * (0..d).map(|j| k * k / grid.dx(j).powi(2) + 0.5 * k * k / grid.dx(j)).sum::<f64>();

    let layers = layers.max(1);
    let mut sampled: Vec<usize> = (0..layers).map(|i| i * (nt - 2) / (layers - 1).max(1)).collect();
    sampled.push(nt - 2);
    sampled.sort_unstable();
    sampled.dedup();

    // representative gradient: centred differences of the terminal data
    let mut term = vec![0.0; ns];
    let mut x = [0.0; MAX_DIM];
    for (s, v) in term.iter_mut().enumerate() {
        grid.node_x(s, &mut x[..d]);
        *v = model.payoff(&x[..d]);
    }
    let mut idx = [0usize; MAX_DIM];
    let mut sig = [0.0; MAX_DIM * MAX_DIM];
    let mut c = [0.0; MAX_DIM];
    let mut xs = [0.0; MAX_DIM];
    let mut probe = [0.0; MAX_DIM];
    for &n in &sampled {
        let t = grid.t_at(n.min(nt - 2));
        for s in 0..ns {
            grid.unravel(s, &mut idx[..d]);
            if (0..d).any(|j| idx[j] == 0 || idx[j] == grid.n_x(j) - 1) {
                continue;
            }
            grid.node_x(s, &mut x[..d]);
            let df = Diffs::at(grid, &term, s);
            for ctl in controls {
                let a = &model.a_points()[ctl.a];
                let tc = model.clamp_time(t + ctl.shake[0]);
                for j in 0..d {
                    xs[j] = x[j] + ctl.shake[j + 1];
                }
                model.sigma_x(tc, &xs[..d], a, &mut sig[..d * d]);
                model.upwind_drift(tc, &xs[..d], a, &mut c[..d]);
                let cov = |i: usize, j: usize| -> f64 { (0..d).map(|l| sig[i * d + l] * sig[j * d + l]).sum() };
                let mut centre = 0.0;
                for j in 0..d {
                    let h = grid.dx(j);
                    centre += cov(j, j) / (h * h) + c[j].abs() / h;
                    let mut off = 0.0;
                    for kk in 0..d {
                        if kk != j {
                            let cjk = cov(j, kk).abs();
                            off += cjk / (2.0 * h * grid.dx(kk));
                            if kk > j {
                                centre -= cjk / (h * grid.dx(kk));
                            }
                        }
                    }
                    if 0.5 * cov(j, j) / (h * h) < off - 1e-15 {
                        stats.non_dominant_nodes += 1;
                    }
                    // slope of the centred remainder in p_j, both sides
                    let y = df.v;
                    probe[..d].copy_from_slice(&df.cen[..d]);
                    let eps = 1e-6 * (1.0 + probe[j].abs());
                    let base = model.first_order(tc, &xs[..d], y, &probe[..d], a)? - c[..d].iter().zip(&probe[..d]).map(|(u, v)| u * v).sum::<f64>();
                    let mut slope = 0.0f64;
                    for sgn in [-1.0, 1.0] {
                        probe[j] = df.cen[j] + sgn * eps;
                        let f = model.first_order(tc, &xs[..d], y, &probe[..d], a)?
                            - c[..d].iter().zip(&probe[..d]).map(|(u, v)| u * v).sum::<f64>();
                        slope = slope.max(((f - base) / eps).abs());
                    }
                    // the upwinded neighbour also receives |c_j| / h, so this is the smaller weight
                    let weight = 0.5 * cov(j, j) / (h * h) - off - slope / (2.0 * h);
                    stats.monotone_margin = stats.monotone_margin.min(weight);
                }
                stats.cfl = stats.cfl.max(dt * centre);
            }
        }
    }
    if !stats.monotone_margin.is_finite() {
        stats.monotone_margin = 0.0;
    }
    Ok(stats)
}
