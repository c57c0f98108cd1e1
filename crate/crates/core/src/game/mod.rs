//! Feedback hedges from value surfaces, simulated against adverse controls.

mod rng;

pub use rng::{path_rng, Stream};

use crate::hjb::{PolicySource, PolicyView, SurfaceField, TimeView, ValueSurface};
use crate::model::{operator_l, ModelError, ModelSpec, MAX_DIM};
use crate::regularize::SmoothSurface;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GameError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Surface that drives a hedge.
#[derive(Clone, Copy)]
pub enum HedgeSource<'a> {
    Grid(&'a ValueSurface),
    Smooth(&'a SmoothSurface),
}

impl<'a> HedgeSource<'a> {
    pub fn field(&self) -> &'a dyn SurfaceField {
        match *self {
            HedgeSource::Grid(s) => s,
            HedgeSource::Smooth(s) => s,
        }
    }

    /// Worst-case adverse feedback: the stored policy of a grid solution,
    /// or `argmin_a L^a` on the derivatives of a smooth surface.
    pub fn worst_policy(&self, model: &'a ModelSpec) -> Box<dyn PolicySource + 'a> {
        match *self {
            HedgeSource::Grid(s) => Box::new(GridPolicy(s)),
            HedgeSource::Smooth(s) => Box::new(OperatorPolicy { field: s, model }),
        }
    }
}

struct GridPolicy<'a>(&'a ValueSurface);

impl PolicySource for GridPolicy<'_> {
    fn policy_view(&self, t: f64) -> Box<dyn PolicyView + '_> {
        self.0.policy_view(t)
    }
}

/// Adverse feedback `argmin_a L^a(t, x, w, w_t, Dw, D^2 w)`.
pub struct OperatorPolicy<'a> {
    pub field: &'a dyn SurfaceField,
    pub model: &'a ModelSpec,
}

struct OperatorPolicyView<'a> {
    view: Box<dyn TimeView + 'a>,
    model: &'a ModelSpec,
    t: f64,
}

impl PolicyView for OperatorPolicyView<'_> {
    fn policy(&self, x: &[f64]) -> usize {
        operator_l(self.model, self.t, x, &self.view.pack(x)).map(|(_, i)| i).unwrap_or(0)
    }
}

impl PolicySource for OperatorPolicy<'_> {
    fn policy_view(&self, t: f64) -> Box<dyn PolicyView + '_> {
        Box::new(OperatorPolicyView { view: self.field.at_time(t), model: self.model, t })
    }
}

/// Markov hedge `u = u_hat(t, x, y, sigma_X(t, x, a)^T Dw(t, x), a)`.
pub struct StrategyMap<'a> {
    source: &'a dyn SurfaceField,
    model: &'a ModelSpec,
    lo: Vec<f64>,
    hi: Vec<f64>,
    clamped: AtomicU64,
}

pub fn make_strategy<'a>(source: &'a dyn SurfaceField, model: &'a ModelSpec) -> Result<StrategyMap<'a>, GameError> {
    if source.dim() != model.dim() {
        return Err(GameError::Invalid(format!("surface dimension {} vs model {}", source.dim(), model.dim())));
    }
    let (lo, hi) = source.x_bounds();
    Ok(StrategyMap { source, model, lo, hi, clamped: AtomicU64::new(0) })
}

impl StrategyMap<'_> {
    /// Queries that fell outside the surface box and were clamped.
    pub fn clamped_queries(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Rule evaluated against a prepared time slice.
    pub fn rule_in(&self, view: &dyn TimeView, t: f64, x: &[f64], y: f64, a_index: usize, out: &mut [f64]) -> Result<(), ModelError> {
        let d = self.model.dim();
        let (lo, hi) = (&self.lo, &self.hi);
        let mut xc = [0.0; MAX_DIM];
        let mut clamped = false;
        for j in 0..d {
            xc[j] = x[j].clamp(lo[j], hi[j]);
            clamped |= xc[j] != x[j];
        }
        if clamped {
            self.clamped.fetch_add(1, Ordering::Relaxed);
        }
        let mut p = [0.0; MAX_DIM];
        view.gradient(&xc[..d], &mut p[..d]);
        let a = &self.model.a_points()[a_index];
        let mut sig = [0.0; MAX_DIM * MAX_DIM];
        self.model.sigma_x(t, x, a, &mut sig[..d * d]);
        let mut z = [0.0; MAX_DIM];
        for j in 0..d {
            z[j] = (0..d).map(|i| sig[i * d + j] * p[i]).sum();
        }
        self.model.u_hat(t, x, y, &z[..d], a, out)
    }

    /// One-off evaluation; builds the time slice.
    pub fn rule(&self, t: f64, x: &[f64], y: f64, a_index: usize) -> Result<Vec<f64>, ModelError> {
        let view = self.source.at_time(t);
        let mut out = vec![0.0; self.model.dim()];
        self.rule_in(view.as_ref(), t, x, y, a_index, &mut out)?;
        Ok(out)
    }

    pub fn source(&self) -> &dyn SurfaceField {
        self.source
    }
}

/// Adverse control generator; every kind only sees `(t_n, X_n)` and its own
/// random stream up to step `n`.
#[derive(Clone, Copy)]
pub enum Adversary<'a> {
    Constant(usize),
    /// Redraws a uniform adverse point at the jumps of a Poisson clock.
    PiecewiseRandom { switch_rate: f64 },
    MarkovWorst(&'a dyn PolicySource),
}

impl Adversary<'_> {
    pub fn label(&self) -> String {
        match self {
            Adversary::Constant(i) => format!("constant:{i}"),
            Adversary::PiecewiseRandom { switch_rate } => format!("random:{switch_rate}"),
            Adversary::MarkovWorst(_) => "worst".into(),
        }
    }
}

/// State of the piecewise-random adversary; draws exactly two uniforms per step.
#[derive(Debug, Clone, Copy)]
pub struct RandomSwitcher {
    pub current: usize,
}

impl RandomSwitcher {
    pub fn start(rng: &mut impl Rng, n_points: usize) -> Self {
        Self { current: rng.random_range(0..n_points) }
    }

    pub fn step(&mut self, rng: &mut impl Rng, rate: f64, dt: f64, n_points: usize) -> usize {
        let jump: f64 = rng.random();
        let pick = rng.random_range(0..n_points);
        if jump < 1.0 - (-rate * dt).exp() {
            self.current = pick;
        }
        self.current
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub tol_sim: f64,
    pub p_sim: f64,
    pub switch_rate: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { n_paths: 10_000, n_steps: 400, seed: 1, tol_sim: 0.02, p_sim: 0.05, switch_rate: 4.0 }
    }
}

/// Quantile levels reported for `Y_T - g(X_T)`.
pub const QUANTILE_LEVELS: [f64; 7] = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub adversary: String,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub t0: f64,
    pub x0: Vec<f64>,
    pub y0: f64,
    /// `E[(g(X_T) - Y_T)^+]` over finite paths.
    pub shortfall_mean: f64,
    pub tol: f64,
    /// Fraction of finite paths with shortfall above `tol`.
    pub shortfall_prob: f64,
    /// `(level, quantile of Y_T - g(X_T))`.
    pub quantiles: Vec<(f64, f64)>,
    pub non_finite: usize,
    pub clamped_queries: u64,
}

/// Terminal state of one path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathEnd {
    pub path: usize,
    pub x: Vec<f64>,
    pub y: f64,
    pub shortfall: f64,
}

pub struct Simulation {
    pub report: SimReport,
    pub paths: Vec<PathEnd>,
}

/// Full trajectory of a single path, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTrace {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub a: Vec<usize>,
    pub u: Vec<Vec<f64>>,
}

struct PathState {
    x: [f64; MAX_DIM],
    y: f64,
    w_rng: ChaCha8Rng,
    a_rng: ChaCha8Rng,
    switcher: RandomSwitcher,
    finite: bool,
}

struct StepCtx<'a> {
    model: &'a ModelSpec,
    strategy: &'a StrategyMap<'a>,
    adversary: Adversary<'a>,
    t: f64,
    dt: f64,
    view: &'a dyn TimeView,
    policy: Option<&'a dyn PolicyView>,
}

impl StepCtx<'_> {
    /// Adverse control at the current state.
    fn control(&self, st: &mut PathState) -> usize {
        let na = self.model.a_points().len();
        match self.adversary {
            Adversary::Constant(i) => i,
            Adversary::PiecewiseRandom { switch_rate } => st.switcher.step(&mut st.a_rng, switch_rate, self.dt, na),
            Adversary::MarkovWorst(_) => {
                let d = self.model.dim();
                self.policy.expect("policy view").policy(&st.x[..d]).min(na - 1)
            }
        }
    }

    /// Euler–Maruyama step with increments `dw`; returns `(a, u)`.
    fn advance(&self, st: &mut PathState, a_idx: usize, dw: &[f64]) -> Result<[f64; MAX_DIM], ModelError> {
        let m = self.model;
        let d = m.dim();
        let a = &m.a_points()[a_idx];
        let x = st.x;
        let mut u = [0.0; MAX_DIM];
        self.strategy.rule_in(self.view, self.t, &x[..d], st.y, a_idx, &mut u[..d])?;
        let mut mu = [0.0; MAX_DIM];
        let mut sig = [0.0; MAX_DIM * MAX_DIM];
        m.mu_x(self.t, &x[..d], a, &mut mu[..d]);
        m.sigma_x(self.t, &x[..d], a, &mut sig[..d * d]);
        let muy = m.mu_y(self.t, &x[..d], st.y, &u[..d], a);
        let mut sy = [0.0; MAX_DIM];
        m.sigma_y(self.t, &x[..d], st.y, &u[..d], a, &mut sy[..d]);
        for i in 0..d {
            let diff: f64 = (0..d).map(|k| sig[i * d + k] * dw[k]).sum();
            st.x[i] = x[i] + mu[i] * self.dt + diff;
        }
        st.y += muy * self.dt + (0..d).map(|k| sy[k] * dw[k]).sum::<f64>();
        if !st.y.is_finite() || st.x[..d].iter().any(|v| !v.is_finite()) {
            st.finite = false;
        }
        Ok(u)
    }
}

fn validate(model: &ModelSpec, adversary: &Adversary<'_>, t0: f64, x0: &[f64], n_steps: usize) -> Result<(), GameError> {
    if n_steps == 0 {
        return Err(GameError::Invalid("n_steps must be at least 1".into()));
    }
    if x0.len() != model.dim() {
        return Err(GameError::Invalid(format!("x0 has {} entries, expected {}", x0.len(), model.dim())));
    }
    if !(0.0..model.horizon()).contains(&t0) {
        return Err(GameError::Invalid(format!("t0 = {t0} outside [0, T)")));
    }
    match *adversary {
        Adversary::Constant(i) if i >= model.a_points().len() => {
            Err(GameError::Invalid(format!("adverse index {i} out of range")))
        }
        Adversary::PiecewiseRandom { switch_rate } if !(switch_rate >= 0.0) => {
            Err(GameError::Invalid(format!("switch rate {switch_rate} must be nonnegative")))
        }
        _ => Ok(()),
    }
}

fn draw_increments(rng: &mut ChaCha8Rng, sqdt: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * sqdt;
    }
}

/// Simulates `n_paths` paths of the game from `(t0, x0, y0)` to `T`.
///
/// Path `i` draws its Brownian increments from stream `(seed, Brownian, i)`
/// whatever the adversary, so runs against different adversaries are
/// coupled; results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    model: &ModelSpec,
    strategy: &StrategyMap<'_>,
    adversary: Adversary<'_>,
    t0: f64,
    x0: &[f64],
    y0: f64,
    params: &SimParams,
) -> Result<Simulation, GameError> {
    let d = model.dim();
    validate(model, &adversary, t0, x0, params.n_steps)?;
    let n_steps = params.n_steps;
    let dt = (model.horizon() - t0) / n_steps as f64;
    let sqdt = dt.sqrt();
    let na = model.a_points().len();
    let before = strategy.clamped_queries();

    let mut states: Vec<PathState> = (0..params.n_paths)
        .map(|i| {
            let mut a_rng = path_rng(params.seed, Stream::Adversary, i as u64);
            let switcher = RandomSwitcher::start(&mut a_rng, na);
            let mut x = [0.0; MAX_DIM];
            x[..d].copy_from_slice(x0);
            PathState { x, y: y0, w_rng: path_rng(params.seed, Stream::Brownian, i as u64), a_rng, switcher, finite: true }
        })
        .collect();

    for n in 0..n_steps {
        let t = t0 + n as f64 * dt;
        let view = strategy.source.at_time(t);
        let pview = match adversary {
            Adversary::MarkovWorst(p) => Some(p.policy_view(t)),
            _ => None,
        };
        let ctx = StepCtx { model, strategy, adversary, t, dt, view: view.as_ref(), policy: pview.as_deref() };
        states.par_iter_mut().try_for_each(|st| -> Result<(), ModelError> {
            let mut dw = [0.0; MAX_DIM];
            // draw even for dead paths so streams stay aligned
            draw_increments(&mut st.w_rng, sqdt, &mut dw[..d]);
            let a = ctx.control(st);
            if st.finite {
                ctx.advance(st, a, &dw[..d])?;
            }
            Ok(())
        })?;
    }

    let mut paths = Vec::with_capacity(params.n_paths);
    let mut gaps = Vec::with_capacity(params.n_paths);
    let mut non_finite = 0;
    let (mut sum, mut above) = (0.0, 0usize);
    for (i, st) in states.iter().enumerate() {
        if !st.finite {
            non_finite += 1;
            continue;
        }
        let gap = st.y - model.payoff(&st.x[..d]);
        let shortfall = (-gap).max(0.0);
        sum += shortfall;
        above += (shortfall > params.tol_sim) as usize;
        gaps.push(gap);
        paths.push(PathEnd { path: i, x: st.x[..d].to_vec(), y: st.y, shortfall });
    }
    let finite = gaps.len();
    if non_finite > 0 {
        log::warn!("{non_finite} paths became non-finite and were excluded");
    }
    gaps.sort_by(f64::total_cmp);
    let quantiles = QUANTILE_LEVELS
        .iter()
        .map(|&q| {
            let v = if finite == 0 {
                f64::NAN
            } else {
                let k = ((q * finite as f64).ceil() as usize).clamp(1, finite) - 1;
                gaps[k]
            };
            (q, v)
        })
        .collect();
    let clamped = strategy.clamped_queries() - before;
    if clamped > 0 {
        log::warn!("{clamped} strategy queries clamped to the surface box");
    }
    let report = SimReport {
        adversary: adversary.label(),
        n_paths: params.n_paths,
        n_steps,
        seed: params.seed,
        t0,
        x0: x0.to_vec(),
        y0,
        shortfall_mean: if finite == 0 { f64::NAN } else { sum / finite as f64 },
        tol: params.tol_sim,
        shortfall_prob: if finite == 0 { f64::NAN } else { above as f64 / finite as f64 },
        quantiles,
        non_finite,
        clamped_queries: clamped,
    };
    Ok(Simulation { report, paths })
}

/// Single path with caller-supplied Brownian increments (`n_steps * d`
/// values, step-major) and adversary stream.
#[allow(clippy::too_many_arguments)]
pub fn trace_path(
    model: &ModelSpec,
    strategy: &StrategyMap<'_>,
    adversary: Adversary<'_>,
    t0: f64,
    x0: &[f64],
    y0: f64,
    increments: &[f64],
    adversary_rng: &mut ChaCha8Rng,
) -> Result<PathTrace, GameError> {
    let d = model.dim();
    if increments.len() % d != 0 {
        return Err(GameError::Invalid("increments must come in blocks of d".into()));
    }
    let n_steps = increments.len() / d;
    validate(model, &adversary, t0, x0, n_steps)?;
    let dt = (model.horizon() - t0) / n_steps as f64;
    let na = model.a_points().len();
    let mut x = [0.0; MAX_DIM];
    x[..d].copy_from_slice(x0);
    let switcher = RandomSwitcher::start(adversary_rng, na);
    let mut st = PathState {
        x,
        y: y0,
        w_rng: path_rng(0, Stream::Brownian, 0),
        a_rng: adversary_rng.clone(),
        switcher,
        finite: true,
    };
    let mut tr = PathTrace { x: vec![x0.to_vec()], y: vec![y0], a: Vec::new(), u: Vec::new() };
    for n in 0..n_steps {
        let t = t0 + n as f64 * dt;
        let view = strategy.source.at_time(t);
        let pview = match adversary {
            Adversary::MarkovWorst(p) => Some(p.policy_view(t)),
            _ => None,
        };
        let ctx = StepCtx { model, strategy, adversary, t, dt, view: view.as_ref(), policy: pview.as_deref() };
        let a = ctx.control(&mut st);
        let u = ctx.advance(&mut st, a, &increments[n * d..(n + 1) * d])?;
        tr.a.push(a);
        tr.u.push(u[..d].to_vec());
        tr.x.push(st.x[..d].to_vec());
        tr.y.push(st.y);
    }
    Ok(tr)
}

/// Outcome of [`superhedge_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HedgeCheck {
    pub passed: bool,
    pub y0: f64,
    pub margin: f64,
    pub p_sim: f64,
    pub reports: Vec<SimReport>,
}

/// Runs the hedge from `y0 = w(t0, x0) + margin` against every constant
/// adverse point, the piecewise-random adversary, and the worst-case
/// feedback; PASS iff every shortfall probability is at most `p_sim`.
pub fn superhedge_check(
    model: &ModelSpec,
    source: HedgeSource<'_>,
    margin: f64,
    t0: f64,
    x0: &[f64],
    params: &SimParams,
) -> Result<HedgeCheck, GameError> {
    if !(margin >= 0.0) {
        return Err(GameError::Invalid(format!("margin {margin} must be nonnegative")));
    }
    let field = source.field();
    let y0 = field.at_time(t0).value(x0) + margin;
    check_from(model, source, y0, margin, t0, x0, params)
}

/// [`superhedge_check`] from an explicit starting capital.
pub fn check_from(
    model: &ModelSpec,
    source: HedgeSource<'_>,
    y0: f64,
    margin: f64,
    t0: f64,
    x0: &[f64],
    params: &SimParams,
) -> Result<HedgeCheck, GameError> {
    let strategy = make_strategy(source.field(), model)?;
    let worst = source.worst_policy(model);
    let mut advs: Vec<Adversary<'_>> = (0..model.a_points().len()).map(Adversary::Constant).collect();
    advs.push(Adversary::PiecewiseRandom { switch_rate: params.switch_rate });
    advs.push(Adversary::MarkovWorst(worst.as_ref()));
    let mut reports = Vec::new();
    for adv in advs {
        let sim = simulate(model, &strategy, adv, t0, x0, y0, params)?;
        log::info!("{}: shortfall mean {:.3e}, P(> {}) = {:.4}", sim.report.adversary, sim.report.shortfall_mean, params.tol_sim, sim.report.shortfall_prob);
        reports.push(sim.report);
    }
    let passed = reports.iter().all(|r| r.shortfall_prob <= params.p_sim && r.non_finite == 0);
    Ok(HedgeCheck { passed, y0, margin, p_sim: params.p_sim, reports })
}
