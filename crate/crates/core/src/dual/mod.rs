//! Regression Monte Carlo for the dual value `w_eps(t, x)`.
//!
//! The dual value is the supremum over controls `gamma = (a, b)` of the
//! backward SDE
//!
//! ```text
//! dX = mu_X((s, X) + b, a) ds + sigma_X((s, X) + b, a) dW
//! Y  = g(X_T) + 2 eps - int f((s, X) + b, Y, Z, a) ds - int Z dW
//! ```
//!
//! with driver `f = mu_Y` at the control `u_hat` that makes the wealth
//! diffusion equal `Z`. Controls are constant between the knots of a
//! [`ControlLattice`]; at every knot the fitted continuation values are
//! maximized over the lattice points.

mod regression;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{path_rng, Stream};
use crate::model::{ModelError, ModelSpec, MAX_DIM};
use regression::{fit, Fit, MAX_BASIS, MAX_DEGREE};

#[derive(Debug, Error)]
pub enum DualError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite backward value at t = {t}")]
    NonFinite { t: f64 },
}

type Result<T> = std::result::Result<T, DualError>;

/// Bootstrap replicates behind [`DualEstimate::std_error`].
pub const BOOTSTRAP_REPLICATES: usize = 200;

/// Default number of Euler steps over the whole horizon.
pub const DEFAULT_EULER_STEPS: usize = 24;

/// One control value: an adverse point and a shift of the base point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaPoint {
    pub a_index: usize,
    /// `[b_t, b_x...]`, inside the closed ball of radius `eps`.
    pub shake: Vec<f64>,
}

/// Piecewise-constant controls: one [`GammaPoint`] per knot interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlLattice {
    pub time_knots: Vec<f64>,
    pub gamma_points: Vec<GammaPoint>,
    /// Euler steps over `[t0, T]`; every knot interval gets its share,
    /// rounded up, and at least one.
    pub euler_steps: usize,
}

impl ControlLattice {
    pub fn new(time_knots: Vec<f64>, gamma_points: Vec<GammaPoint>) -> Self {
        Self { time_knots, gamma_points, euler_steps: DEFAULT_EULER_STEPS }
    }

    /// `n_knots` evenly spaced knots on `[t0, T]` and every adverse point
    /// paired with every shift on the grid of `gamma_grid` levels per
    /// coordinate of `[-eps, eps]^{d+1}` that lies in the ball.
    pub fn uniform(model: &ModelSpec, eps: f64, t0: f64, n_knots: usize, gamma_grid: usize) -> Result<Self> {
        let t_end = model.horizon();
        if !(t0 <= t_end) {
            return Err(DualError::Invalid(format!("t0 = {t0} is after T = {t_end}")));
        }
        let knots = if t0 == t_end {
            vec![t_end]
        } else {
            if n_knots < 2 {
                return Err(DualError::Invalid("at least two knots are needed".into()));
            }
            (0..n_knots)
                .map(|k| if k + 1 == n_knots { t_end } else { t0 + (t_end - t0) * k as f64 / (n_knots - 1) as f64 })
                .collect()
        };
        if gamma_grid == 0 {
            return Err(DualError::Invalid("gamma_grid must be positive".into()));
        }
        let shakes = shake_grid(eps, model.dim(), gamma_grid);
        let gamma_points = (0..model.a_points().len())
            .flat_map(|a| shakes.iter().map(move |b| GammaPoint { a_index: a, shake: b.clone() }))
            .collect();
        Ok(Self::new(knots, gamma_points))
    }

    pub fn with_euler_steps(mut self, n: usize) -> Self {
        self.euler_steps = n;
        self
    }

    pub fn validate(&self, model: &ModelSpec, eps: f64, t0: f64) -> Result<()> {
        let bad = |m: String| Err(DualError::Invalid(m));
        let t_end = model.horizon();
        let k = &self.time_knots;
        if k.is_empty() {
            return bad("no time knots".into());
        }
        if k[0] != t0 || k[k.len() - 1] != t_end {
            return bad(format!("knots must start at t0 = {t0} and end at T = {t_end}"));
        }
        if k.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("knots must be strictly increasing".into());
        }
        if self.gamma_points.is_empty() {
            return bad("no gamma points".into());
        }
        if self.euler_steps == 0 {
            return bad("euler_steps must be positive".into());
        }
        if !(eps >= 0.0) {
            return bad(format!("eps = {eps} must be nonnegative"));
        }
        for g in &self.gamma_points {
            if g.a_index >= model.a_points().len() {
                return bad(format!("a_index {} out of range", g.a_index));
            }
            if g.shake.len() != model.dim() + 1 {
                return bad(format!("shake {:?} has {} entries, expected {}", g.shake, g.shake.len(), model.dim() + 1));
            }
            let norm = g.shake.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > eps * (1.0 + 1e-12) {
                return bad(format!("shake {:?} outside the ball of radius {eps}", g.shake));
            }
        }
        Ok(())
    }
}

/// Points of `{-eps + 2 eps i / (n-1)}^{d+1}` in the closed ball; the origin
/// alone for `n = 1` or `eps = 0`.
fn shake_grid(eps: f64, dim: usize, n: usize) -> Vec<Vec<f64>> {
    if eps <= 0.0 || n == 1 {
        return vec![vec![0.0; dim + 1]];
    }
    let level = |i: usize| if 2 * i + 1 == n { 0.0 } else { -eps + 2.0 * eps * i as f64 / (n - 1) as f64 };
    let mut out = Vec::new();
    for code in 0..n.pow(dim as u32 + 1) {
        let mut c = code;
        let p: Vec<f64> = (0..=dim)
            .map(|_| {
                let v = level(c % n);
                c /= n;
                v
            })
            .collect();
        if p.iter().map(|v| v * v).sum::<f64>().sqrt() <= eps * (1.0 + 1e-12) {
            out.push(p);
        }
    }
    out
}

/// Dual value at one point with its bootstrap standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
    /// Lowest degree used by any regression; below the requested degree
    /// only after a rank-deficiency fallback.
    pub basis_degree: usize,
    pub knot_count: usize,
}

/// Direct estimate against the two-leg composition at `mid_time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppReport {
    pub mid_time: f64,
    pub direct: DualEstimate,
    pub composed: DualEstimate,
    pub difference: f64,
    pub combined_std_error: f64,
    /// `2 combined_std_error + 1% |direct|`.
    pub tolerance: f64,
    pub passed: bool,
}

/// Shifted driver `f((t, x) + b, y, z, a)` of control `g`.
fn driver(model: &ModelSpec, g: &GammaPoint, t: f64, x: &[f64], y: f64, z: &[f64]) -> std::result::Result<f64, ModelError> {
    let d = model.dim();
    let mut xs = [0.0; MAX_DIM];
    for j in 0..d {
        xs[j] = x[j] + g.shake[j + 1];
    }
    model.mu_y_hat(t + g.shake[0], &xs[..d], y, z, &model.a_points()[g.a_index])
}

/// Fitted `(Y, Z)` of every control point at a knot, turned into one
/// explicit Euler step of length `dt`.
struct KnotFn<'a> {
    t: f64,
    dt: f64,
    gammas: &'a [GammaPoint],
    /// `None` for controls that no path followed.
    fits: Vec<Option<Fit>>,
}

impl KnotFn<'_> {
    fn value_of(&self, model: &ModelSpec, k: usize, x: &[f64]) -> std::result::Result<Option<f64>, ModelError> {
        let Some(f) = &self.fits[k] else { return Ok(None) };
        let d = model.dim();
        let mut yz = [0.0; MAX_DIM + 1];
        f.eval(x, &mut yz[..d + 1]);
        let drift = driver(model, &self.gammas[k], self.t, x, yz[0], &yz[1..d + 1])?;
        Ok(Some(yz[0] - drift * self.dt))
    }

    /// The control with the largest fitted value, and that value.
    fn best(&self, model: &ModelSpec, x: &[f64]) -> std::result::Result<(usize, f64), ModelError> {
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..self.gammas.len() {
            if let Some(v) = self.value_of(model, k, x)? {
                if v > best.1 {
                    best = (k, v);
                }
            }
        }
        Ok(best)
    }
}

/// Value of the selected policy at the first knot: the control is chosen
/// by the first-pass fits, its value taken from the second pass.
struct ValueFn<'a> {
    select: KnotFn<'a>,
    value: KnotFn<'a>,
}

impl ValueFn<'_> {
    fn eval(&self, model: &ModelSpec, x: &[f64]) -> std::result::Result<f64, ModelError> {
        let (k, v) = self.select.best(model, x)?;
        Ok(self.value.value_of(model, k, x)?.unwrap_or(v))
    }
}

enum Terminal<'k, 'g> {
    /// `g(x) + shift`.
    Payoff(f64),
    Knot(&'k KnotFn<'g>),
    Value(&'k ValueFn<'g>),
}

impl Terminal<'_, '_> {
    fn eval(&self, model: &ModelSpec, x: &[f64]) -> std::result::Result<f64, ModelError> {
        match self {
            Terminal::Payoff(shift) => Ok(model.payoff(x) + shift),
            Terminal::Knot(k) => Ok(k.best(model, x)?.1),
            Terminal::Value(v) => v.eval(model, x),
        }
    }
}

/// One backward problem. Paths start at `(t0, x0)`; the knots may start
/// later than `t0`, in which case the first knot carries a distribution of
/// states instead of a point.
///
/// The first pass fits, knot by knot, the value of every control point from
/// the same states and takes the best one; it only decides the policy. The
/// second pass follows that policy on fresh paths and regresses along them,
/// so errors in the first-pass fits cost optimality but do not inflate the
/// value.
struct Leg<'a> {
    model: &'a ModelSpec,
    t0: f64,
    x0: &'a [f64],
    knots: &'a [f64],
    gammas: &'a [GammaPoint],
    /// Target Euler step length.
    h: f64,
    degree: usize,
    n_paths: usize,
    seed: u64,
    /// Separates the random streams of the legs of a composition.
    tag: u64,
}

struct LegOutput<'g> {
    first: ValueFn<'g>,
    /// Value and bootstrap error when the first knot is `t0`.
    value: Option<(f64, f64)>,
    min_degree: usize,
}

/// Segment `[a, b]` cut into steps of length at most about `h`.
fn steps_of(a: f64, b: f64, h: f64) -> (usize, f64) {
    let n = (((b - a) / h) - 1e-9).ceil().max(1.0) as usize;
    (n, (b - a) / n as f64)
}

/// One Euler step of `X` under control `g`.
fn euler(model: &ModelSpec, g: &GammaPoint, t: f64, dt: f64, x: &[f64], dw: &[f64], out: &mut [f64]) {
    let d = model.dim();
    let a = &model.a_points()[g.a_index];
    let mut xs = [0.0; MAX_DIM];
    let mut mu = [0.0; MAX_DIM];
    let mut sig = [0.0; MAX_DIM * MAX_DIM];
    for j in 0..d {
        xs[j] = x[j] + g.shake[j + 1];
    }
    model.mu_x(t + g.shake[0], &xs[..d], a, &mut mu[..d]);
    model.sigma_x(t + g.shake[0], &xs[..d], a, &mut sig[..d * d]);
    for i in 0..d {
        out[i] = x[i] + mu[i] * dt + (0..d).map(|k| sig[i * d + k] * dw[k]).sum::<f64>();
    }
}

/// Time steps of a leg: an optional lead-in from `t0` to the first knot,
/// then the knot intervals.
struct Layout {
    bounds: Vec<f64>,
    lead: usize,
    /// `(steps, dt)` per segment.
    segs: Vec<(usize, f64)>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(t0: f64, knots: &[f64], h: f64) -> Self {
        let mut bounds = Vec::new();
        if knots[0] > t0 {
            bounds.push(t0);
        }
        bounds.extend_from_slice(knots);
        let lead = usize::from(knots[0] > t0);
        let segs: Vec<(usize, f64)> = bounds.windows(2).map(|w| steps_of(w[0], w[1], h)).collect();
        let mut offsets = Vec::with_capacity(segs.len());
        let mut total = 0;
        for s in &segs {
            offsets.push(total);
            total += s.0;
        }
        Self { bounds, lead, segs, offsets, total }
    }

    fn time(&self, s: usize, j: usize) -> f64 {
        self.bounds[s] + j as f64 * self.segs[s].1
    }
}

/// Forward paths: states at every step, `n x (total + 1) x d`.
struct Paths {
    x: Vec<f64>,
    stride: usize,
    /// Control index per segment and path.
    choice: Vec<Vec<usize>>,
}

impl Paths {
    fn at(&self, i: usize, step: usize, d: usize) -> &[f64] {
        &self.x[i * self.stride + step * d..][..d]
    }
}

impl<'a> Leg<'a> {
    /// Brownian increments of `pass`, one stream per path.
    fn increments(&self, lay: &Layout, pass: u64) -> Vec<f64> {
        let d = self.model.dim();
        let row = lay.total * d;
        let mut dw = vec![0.0; self.n_paths * row];
        dw.par_chunks_mut(row.max(1)).enumerate().for_each(|(i, out)| {
            let mut rng = path_rng(self.seed, Stream::Dual, ((2 * self.tag + pass) << 40) | i as u64);
            let mut k = 0;
            for &(ns, dt) in &lay.segs {
                let sd = dt.sqrt();
                for _ in 0..ns * d {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    out[k] = sd * z;
                    k += 1;
                }
            }
        });
        dw
    }

    /// Simulates every path from `x0`; the control on knot interval `s`
    /// comes from `select(s, path, state)`, the lead-in cycles through the
    /// control points.
    fn forward(
        &self,
        lay: &Layout,
        dw: &[f64],
        select: &(dyn Fn(usize, usize, &[f64]) -> std::result::Result<usize, ModelError> + Sync),
    ) -> Result<Paths> {
        let model = self.model;
        let d = model.dim();
        let ng = self.gammas.len();
        let stride = (lay.total + 1) * d;
        let row = lay.total * d;
        let mut x = vec![0.0; self.n_paths * stride];
        let mut choice = vec![vec![0usize; self.n_paths]; lay.segs.len()];
        for i in 0..self.n_paths {
            x[i * stride..i * stride + d].copy_from_slice(self.x0);
        }
        for s in 0..lay.segs.len() {
            let (ns, dt) = lay.segs[s];
            let off = lay.offsets[s];
            x.par_chunks_mut(stride)
                .zip(choice[s].par_iter_mut())
                .enumerate()
                .try_for_each(|(i, (p, c))| -> std::result::Result<(), ModelError> {
                    *c = if s < lay.lead { (i + s) % ng } else { select(s, i, &p[off * d..(off + 1) * d])? };
                    let g = &self.gammas[*c];
                    for j in 0..ns {
                        let w = &dw[i * row + (off + j) * d..][..d];
                        let (prev, cur) = p.split_at_mut((off + j + 1) * d);
                        euler(model, g, lay.time(s, j), dt, &prev[(off + j) * d..], w, &mut cur[..d]);
                    }
                    Ok(())
                })?;
        }
        Ok(Paths { x, stride, choice })
    }

    fn run(&self, terminal: Terminal<'_, '_>) -> Result<LegOutput<'a>> {
        let lay = Layout::new(self.t0, self.knots, self.h);
        let mut min_degree = self.degree;
        let knot_fns = self.policy_pass(&lay, &terminal, &mut min_degree)?;

        // second pass: follow the policy on fresh paths
        let model = self.model;
        let d = model.dim();
        let n = self.n_paths;
        let ng = self.gammas.len();
        let row = lay.total * d;
        let dw = self.increments(&lay, 1);
        let paths = self.forward(&lay, &dw, &|s, _, x| Ok(knot_fns[s - lay.lead].best(model, x)?.0))?;
        let mut y = vec![0.0; n];
        y.par_iter_mut().enumerate().try_for_each(|(i, v)| -> std::result::Result<(), ModelError> {
            *v = terminal.eval(model, paths.at(i, lay.total, d))?;
            Ok(())
        })?;
        let mut first_fits = Vec::new();
        let mut first_y = Vec::new();
        for s in (lay.lead..lay.segs.len()).rev() {
            let (ns, dt) = lay.segs[s];
            let mut groups = vec![Vec::new(); ng];
            for (i, &c) in paths.choice[s].iter().enumerate() {
                groups[c].push(i);
            }
            for j in (0..ns).rev() {
                let step = lay.offsets[s] + j;
                let t = lay.time(s, j);
                let mut fits: Vec<Option<Fit>> = vec![None; ng];
                for (k, idx) in groups.iter().enumerate() {
                    if idx.is_empty() {
                        continue;
                    }
                    let f = fit(
                        idx.len(),
                        d,
                        d + 1,
                        self.degree,
                        &|m, o| o.copy_from_slice(paths.at(idx[m], step, d)),
                        &|m, o| {
                            let i = idx[m];
                            o[0] = y[i];
                            for q in 0..d {
                                o[q + 1] = y[i] * dw[i * row + step * d + q] / dt;
                            }
                        },
                    );
                    if !f.point_mass {
                        min_degree = min_degree.min(f.basis.degree);
                    }
                    fits[k] = Some(f);
                }
                if s == lay.lead && j == 0 {
                    first_y = y.clone();
                }
                // multistep update: subtract the driver along each path
                let updates: Vec<f64> = (0..n)
                    .into_par_iter()
                    .map(|i| -> std::result::Result<f64, ModelError> {
                        let c = paths.choice[s][i];
                        let f = fits[c].as_ref().expect("path belongs to its group");
                        let x = paths.at(i, step, d);
                        let mut yz = [0.0; MAX_DIM + 1];
                        f.eval(x, &mut yz[..d + 1]);
                        Ok(driver(model, &self.gammas[c], t, x, yz[0], &yz[1..d + 1])? * dt)
                    })
                    .collect::<std::result::Result<_, _>>()?;
                for (v, u) in y.iter_mut().zip(&updates) {
                    *v -= u;
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(DualError::NonFinite { t });
                }
                if s == lay.lead && j == 0 {
                    first_fits = fits;
                }
            }
        }
        let mut knot_fns = knot_fns;
        let select = knot_fns.swap_remove(0);
        let first = ValueFn {
            value: KnotFn { t: select.t, dt: select.dt, gammas: self.gammas, fits: first_fits },
            select,
        };

        let value = if lay.lead == 0 {
            let v = first.eval(model, self.x0)?;
            if !v.is_finite() {
                return Err(DualError::NonFinite { t: self.t0 });
            }
            let k = first.select.best(model, self.x0)?.0;
            let se = self.bootstrap(&self.gammas[k], first.value.t, first.value.dt, &first_y, &dw, row)?;
            Some((v, se))
        } else {
            None
        };
        Ok(LegOutput { first, value, min_degree })
    }

    /// Fits, knot by knot and backward, the value of every control point
    /// started from the same states; the states at a knot come from paths
    /// that cycle through the control points.
    fn policy_pass(&self, lay: &Layout, terminal: &Terminal<'_, '_>, min_degree: &mut usize) -> Result<Vec<KnotFn<'a>>> {
        let model = self.model;
        let d = model.dim();
        let n = self.n_paths;
        let ng = self.gammas.len();
        let row = lay.total * d;
        let dw = self.increments(lay, 0);
        let reference = self.forward(lay, &dw, &|s, i, _| Ok((i + s) % ng))?;

        let mut knot_fns: Vec<KnotFn<'a>> = Vec::new();
        for s in (lay.lead..lay.segs.len()).rev() {
            let (ns, dt) = lay.segs[s];
            let off = lay.offsets[s];
            let term = match knot_fns.last() {
                Some(k) => Terminal::Knot(k),
                None => match terminal {
                    Terminal::Payoff(c) => Terminal::Payoff(*c),
                    Terminal::Knot(k) => Terminal::Knot(k),
                    Terminal::Value(v) => Terminal::Value(v),
                },
            };
            let mut fits = Vec::with_capacity(ng);
            for g in self.gammas {
                // this control from the reference states at the knot
                let stride = (ns + 1) * d;
                let mut xs = vec![0.0; n * stride];
                xs.par_chunks_mut(stride).enumerate().for_each(|(i, out)| {
                    out[..d].copy_from_slice(reference.at(i, off, d));
                    for j in 0..ns {
                        let w = &dw[i * row + (off + j) * d..][..d];
                        let (prev, cur) = out.split_at_mut((j + 1) * d);
                        euler(model, g, lay.time(s, j), dt, &prev[j * d..], w, &mut cur[..d]);
                    }
                });
                let mut y = vec![0.0; n];
                y.par_iter_mut().enumerate().try_for_each(|(i, v)| -> std::result::Result<(), ModelError> {
                    *v = term.eval(model, &xs[i * stride + ns * d..][..d])?;
                    Ok(())
                })?;
                for j in (0..ns).rev() {
                    let t = lay.time(s, j);
                    let f = fit(
                        n,
                        d,
                        d + 1,
                        self.degree,
                        &|i, o| o.copy_from_slice(&xs[i * stride + j * d..][..d]),
                        &|i, o| {
                            o[0] = y[i];
                            for q in 0..d {
                                o[q + 1] = y[i] * dw[i * row + (off + j) * d + q] / dt;
                            }
                        },
                    );
                    if !f.point_mass {
                        *min_degree = (*min_degree).min(f.basis.degree);
                    }
                    if j == 0 {
                        fits.push(Some(f));
                        break;
                    }
                    let updates: Vec<f64> = (0..n)
                        .into_par_iter()
                        .map(|i| -> std::result::Result<f64, ModelError> {
                            let x = &xs[i * stride + j * d..][..d];
                            let mut yz = [0.0; MAX_DIM + 1];
                            f.eval(x, &mut yz[..d + 1]);
                            Ok(driver(model, g, t, x, yz[0], &yz[1..d + 1])? * dt)
                        })
                        .collect::<std::result::Result<_, _>>()?;
                    for (v, u) in y.iter_mut().zip(&updates) {
                        *v -= u;
                    }
                    if y.iter().any(|v| !v.is_finite()) {
                        return Err(DualError::NonFinite { t });
                    }
                }
            }
            knot_fns.push(KnotFn { t: lay.bounds[s], dt, gammas: self.gammas, fits });
        }
        knot_fns.reverse();
        Ok(knot_fns)
    }

    /// Standard deviation of the first-knot value of control `g` over
    /// resampled paths, later fits held fixed.
    fn bootstrap(&self, g: &GammaPoint, t: f64, dt: f64, y: &[f64], dw: &[f64], row: usize) -> Result<f64> {
        let model = self.model;
        let d = model.dim();
        let n = self.n_paths;
        let reps: Vec<f64> = (0..BOOTSTRAP_REPLICATES)
            .into_par_iter()
            .map(|b| -> std::result::Result<f64, ModelError> {
                let mut rng = path_rng(self.seed, Stream::Bootstrap, (self.tag << 40) | b as u64);
                let mut m = [0.0; MAX_DIM + 1];
                for _ in 0..n {
                    let i = rng.random_range(0..n);
                    m[0] += y[i];
                    for k in 0..d {
                        m[k + 1] += y[i] * dw[i * row + k] / dt;
                    }
                }
                m.iter_mut().for_each(|v| *v /= n as f64);
                Ok(m[0] - driver(model, g, t, self.x0, m[0], &m[1..d + 1])? * dt)
            })
            .collect::<std::result::Result<_, _>>()?;
        let mean = reps.iter().sum::<f64>() / reps.len() as f64;
        let var = reps.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps.len() - 1) as f64;
        Ok(var.sqrt())
    }
}

fn check_common(model: &ModelSpec, x0: &[f64], basis_degree: usize, n_paths: usize) -> Result<()> {
    let d = model.dim();
    if x0.len() != d {
        return Err(DualError::Invalid(format!("x0 has {} entries, expected {d}", x0.len())));
    }
    if basis_degree == 0 || basis_degree > MAX_DEGREE || (basis_degree + 1).pow(d as u32) > MAX_BASIS {
        return Err(DualError::Invalid(format!(
            "basis degree {basis_degree} must lie in 1..={MAX_DEGREE} with at most {MAX_BASIS} tensor terms"
        )));
    }
    if n_paths < 2 {
        return Err(DualError::Invalid("at least two paths are needed".into()));
    }
    Ok(())
}

/// Estimates `w_eps(t0, x0)` by backward regression over the knots of
/// `lattice`, maximizing over its control points at every knot.
#[allow(clippy::too_many_arguments)]
pub fn dual_value_lsmc(
    model: &ModelSpec,
    eps: f64,
    t0: f64,
    x0: &[f64],
    lattice: &ControlLattice,
    basis_degree: usize,
    n_paths: usize,
    seed: u64,
) -> Result<DualEstimate> {
    check_common(model, x0, basis_degree, n_paths)?;
    lattice.validate(model, eps, t0)?;
    let knots = &lattice.time_knots;
    let mut est = DualEstimate {
        value: model.payoff(x0) + 2.0 * eps,
        std_error: 0.0,
        n_paths,
        basis_degree,
        knot_count: knots.len(),
    };
    if knots.len() == 1 {
        return Ok(est);
    }
    let leg = Leg {
        model,
        t0,
        x0,
        knots,
        gammas: &lattice.gamma_points,
        h: (model.horizon() - t0) / lattice.euler_steps as f64,
        degree: basis_degree,
        n_paths,
        seed,
        tag: 0,
    };
    let out = leg.run(Terminal::Payoff(2.0 * eps))?;
    let (v, se) = out.value.expect("leg starts at t0");
    est.value = v;
    est.std_error = se;
    est.basis_degree = out.min_degree;
    Ok(est)
}

/// Compares the direct estimate with the composition of a leg on
/// `[mid_time, T]`, fitted as a function of the state, and a leg on
/// `[t0, mid_time]` that uses it as terminal value.
#[allow(clippy::too_many_arguments)]
pub fn dpp_check(
    model: &ModelSpec,
    eps: f64,
    t0: f64,
    x0: &[f64],
    mid_time: f64,
    lattice: &ControlLattice,
    n_paths: usize,
    seed: u64,
) -> Result<DppReport> {
    dpp_check_with_degree(model, eps, t0, x0, mid_time, lattice, 2, n_paths, seed)
}

/// [`dpp_check`] with an explicit basis degree.
#[allow(clippy::too_many_arguments)]
pub fn dpp_check_with_degree(
    model: &ModelSpec,
    eps: f64,
    t0: f64,
    x0: &[f64],
    mid_time: f64,
    lattice: &ControlLattice,
    basis_degree: usize,
    n_paths: usize,
    seed: u64,
) -> Result<DppReport> {
    if !(t0 < mid_time && mid_time < model.horizon()) {
        return Err(DualError::Invalid(format!("mid_time = {mid_time} must lie strictly between t0 and T")));
    }
    let direct = dual_value_lsmc(model, eps, t0, x0, lattice, basis_degree, n_paths, seed)?;

    let knots = &lattice.time_knots;
    let mut inner: Vec<f64> = vec![mid_time];
    inner.extend(knots.iter().copied().filter(|&t| t > mid_time));
    let mut outer: Vec<f64> = knots.iter().copied().filter(|&t| t < mid_time).collect();
    outer.push(mid_time);
    let h = (model.horizon() - t0) / lattice.euler_steps as f64;
    let inner_leg = Leg {
        model,
        t0,
        x0,
        knots: &inner,
        gammas: &lattice.gamma_points,
        h,
        degree: basis_degree,
        n_paths,
        seed,
        tag: 1,
    };
    let inner_out = inner_leg.run(Terminal::Payoff(2.0 * eps))?;
    let outer_leg = Leg { knots: &outer, tag: 2, ..inner_leg };
    let outer_out = outer_leg.run(Terminal::Value(&inner_out.first))?;
    let (v, se) = outer_out.value.expect("outer leg starts at t0");
    let composed = DualEstimate {
        value: v,
        std_error: se,
        n_paths,
        basis_degree: inner_out.min_degree.min(outer_out.min_degree),
        knot_count: inner.len() + outer.len() - 1,
    };
    let difference = (direct.value - composed.value).abs();
    let combined_std_error = direct.std_error.hypot(composed.std_error);
    let tolerance = 2.0 * combined_std_error + 0.01 * direct.value.abs();
    Ok(DppReport {
        mid_time,
        passed: difference <= tolerance,
        direct,
        composed,
        difference,
        combined_std_error,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shake_grid_respects_the_ball() {
        assert_eq!(shake_grid(0.0, 1, 5), vec![vec![0.0, 0.0]]);
        let g = shake_grid(0.1, 1, 3);
        // origin and the four axis points; corners are outside
        assert_eq!(g.len(), 5);
        assert!(g.iter().all(|p| p.iter().map(|v| v * v).sum::<f64>() <= 0.01 + 1e-15));
        assert_eq!(shake_grid(0.1, 2, 3).len(), 7);
    }

    #[test]
    fn steps_cover_the_segment() {
        assert_eq!(steps_of(0.0, 1.0, 0.25), (4, 0.25));
        assert_eq!(steps_of(0.0, 0.3, 0.25).0, 2);
        assert_eq!(steps_of(0.0, 1e-6, 0.25).0, 1);
    }
}
