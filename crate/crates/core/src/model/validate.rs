//! Randomized checks of the standing assumptions on a model.
//!
//! Nothing here is a proof: every check samples points in a box and reports
//! the worst empirical constant together with the point that produced it.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ModelSpec, MAX_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AssumptionId {
    /// Operator norm of `sigma_x` bounded by `K`.
    SigmaBound,
    /// `mu_x`, `sigma_x` Lipschitz in `x` with constant `K`.
    LipschitzX,
    /// Lipschitz ratios of `mu_y`, `sigma_y` in `y` (reported).
    LipschitzY,
    /// `sigma_y(u_hat(z)) = z`.
    Inversion,
    /// Linear growth of `mu_y_hat` in `(y, z)` (reported).
    Growth,
    /// `|mu_y| / (1 + |sigma_y|)` (reported).
    DriftOverVol,
    /// Midpoint concavity of `(y, p) -> L^a(t, x, y, 0, p, 0)`.
    Concavity,
    /// `r_borrow >= r_lend`.
    RateOrder,
    /// Risk premia finite and independent of `x`.
    RiskPremia,
    /// All coefficients finite.
    Finite,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: f64,
    pub a_index: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub id: AssumptionId,
    /// Worst empirical value of the checked quantity.
    pub worst: f64,
    /// Pass threshold; `None` for report-only quantities.
    pub threshold: Option<f64>,
    pub passed: bool,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub sample_count: usize,
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn violations(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, id: AssumptionId) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.id == id)
    }
}

/// Region the validator samples from.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingBox {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    /// Bound on `|y|` and on every gradient component.
    pub y_abs: f64,
}

impl SamplingBox {
    pub fn cube(dim: usize, half_width: f64, y_abs: f64) -> Self {
        Self { x_min: vec![-half_width; dim], x_max: vec![half_width; dim], y_abs }
    }
}

const CONCAVITY_TOL: f64 = 1e-9;
const INVERSION_TOL: f64 = 1e-10;

struct Tracker {
    id: AssumptionId,
    worst: f64,
    threshold: Option<f64>,
    /// `true` if larger values are worse.
    upper: bool,
    witness: Option<Witness>,
}

impl Tracker {
    fn new(id: AssumptionId, threshold: Option<f64>, upper: bool) -> Self {
        let worst = if upper { 0.0 } else { f64::INFINITY };
        Self { id, worst, threshold, upper, witness: None }
    }

    fn offer(&mut self, v: f64, w: impl FnOnce() -> Witness) {
        let worse = if self.upper { v > self.worst || v.is_nan() } else { v < self.worst || v.is_nan() };
        if worse && !self.worst.is_nan() {
            self.worst = v;
            self.witness = Some(w());
        }
    }

    fn finish(self) -> AssumptionCheck {
        let passed = match self.threshold {
            None => !self.worst.is_nan(),
            Some(th) if self.upper => self.worst <= th,
            Some(th) => self.worst >= th,
        };
        let worst = if self.worst.is_infinite() && !self.upper { 0.0 } else { self.worst };
        AssumptionCheck { id: self.id, worst, threshold: self.threshold, passed, witness: self.witness }
    }
}

fn op_norm(m: &[f64], d: usize) -> f64 {
    let s = DMatrix::from_row_slice(d, d, m);
    s.singular_values().max()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// [`validate_assumptions_in`] on `x in [-3, 3]^d`, `|y|, |p_j| <= 2`.
pub fn validate_assumptions(model: &ModelSpec, sample_count: usize, rng_seed: u64) -> ValidationReport {
    validate_assumptions_in(model, &SamplingBox::cube(model.dim(), 3.0, 2.0), sample_count, rng_seed)
}

pub fn validate_assumptions_in(model: &ModelSpec, region: &SamplingBox, sample_count: usize, rng_seed: u64) -> ValidationReport {
    let n = sample_count.max(1);
    let d = model.dim();
    let k = model.lipschitz_k();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let mut sigma_bound = Tracker::new(AssumptionId::SigmaBound, Some(k * (1.0 + 1e-9)), true);
    let mut lip_x = Tracker::new(AssumptionId::LipschitzX, Some(k * (1.0 + 1e-9)), true);
    let mut lip_y = Tracker::new(AssumptionId::LipschitzY, None, true);
    let mut inversion = Tracker::new(AssumptionId::Inversion, Some(INVERSION_TOL), true);
    let mut growth = Tracker::new(AssumptionId::Growth, None, true);
    let mut drift_vol = Tracker::new(AssumptionId::DriftOverVol, None, true);
    let mut concavity = Tracker::new(AssumptionId::Concavity, Some(-CONCAVITY_TOL), false);
    let mut finite = Tracker::new(AssumptionId::Finite, Some(0.0), true);
    let mut rate_order = Tracker::new(AssumptionId::RateOrder, Some(0.0), false);
    let mut premia = Tracker::new(AssumptionId::RiskPremia, Some(1e-9), true);

    let na = model.a_points().len();
    let sample_x = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|j| rng.random_range(region.x_min[j]..=region.x_max[j])).collect()
    };
    let yb = region.y_abs;
    let mut sig = [0.0; MAX_DIM * MAX_DIM];
    let mut sig2 = [0.0; MAX_DIM * MAX_DIM];
    let mut mu = [0.0; MAX_DIM];
    let mut mu2 = [0.0; MAX_DIM];
    let mut u = [0.0; MAX_DIM];
    let mut back = [0.0; MAX_DIM];

    for _ in 0..n {
        let t = rng.random_range(0.0..=model.horizon());
        let ai = rng.random_range(0..na);
        let a = &model.a_points()[ai];
        let x = sample_x(&mut rng);
        let x2 = sample_x(&mut rng);
        let y = rng.random_range(-yb..=yb);
        let y2 = rng.random_range(-yb..=yb);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-yb..=yb)).collect();
        let wit = |detail: String| Witness { t, x: x.clone(), y, a_index: ai, detail };

        model.sigma_x(t, &x, a, &mut sig[..d * d]);
        model.mu_x(t, &x, a, &mut mu[..d]);
        model.sigma_x(t, &x2, a, &mut sig2[..d * d]);
        model.mu_x(t, &x2, a, &mut mu2[..d]);
        let bad = sig[..d * d].iter().chain(&mu[..d]).filter(|v| !v.is_finite()).count();
        finite.offer(bad as f64, || wit("non-finite mu_x/sigma_x".into()));
        if bad > 0 {
            continue;
        }

        let sn = op_norm(&sig[..d * d], d);
        sigma_bound.offer(sn, || wit(format!("|sigma_x| = {sn}")));

        let dx = dist(&x, &x2);
        if dx > 1e-12 {
            let dm = dist(&mu[..d], &mu2[..d]);
            let ds = dist(&sig[..d * d], &sig2[..d * d]);
            let r = dm.max(ds) / dx;
            lip_x.offer(r, || wit(format!("ratio {r} against x'={x2:?}")));
        }

        // inversion and y-Lipschitz of the wealth coefficients
        match model.u_hat(t, &x, y, &z, a, &mut u[..d]) {
            Ok(()) => {
                model.sigma_y(t, &x, y, &u[..d], a, &mut back[..d]);
                let err = dist(&back[..d], &z);
                inversion.offer(err, || wit(format!("|sigma_y(u_hat(z)) - z| = {err:e}, z={z:?}")));
                let m1 = model.mu_y(t, &x, y, &u[..d], a);
                let m2 = model.mu_y(t, &x, y2, &u[..d], a);
                let mut back2 = [0.0; MAX_DIM];
                model.sigma_y(t, &x, y2, &u[..d], a, &mut back2[..d]);
                if (y - y2).abs() > 1e-12 {
                    let r = ((m1 - m2).abs()).max(dist(&back[..d], &back2[..d])) / (y - y2).abs();
                    lip_y.offer(r, || wit(format!("ratio {r} against y'={y2}")));
                }
                let g = m1.abs() / (1.0 + y.abs() + norm(&z));
                growth.offer(g, || wit(format!("|mu_y| / (1 + |y| + |z|) = {g}")));
                let dv = m1.abs() / (1.0 + norm(&back[..d]));
                drift_vol.offer(dv, || wit(format!("|mu_y| / (1 + |sigma_y|) = {dv}")));
                if !m1.is_finite() {
                    finite.offer(1.0, || wit("non-finite mu_y".into()));
                }
            }
            Err(e) => inversion.offer(f64::INFINITY, || wit(e.to_string())),
        }

        // midpoint concavity in (y, p)
        let p: Vec<f64> = (0..d).map(|_| rng.random_range(-yb..=yb)).collect();
        let p2: Vec<f64> = (0..d).map(|_| rng.random_range(-yb..=yb)).collect();
        let pm: Vec<f64> = p.iter().zip(&p2).map(|(a, b)| 0.5 * (a + b)).collect();
        let f = |yy: f64, pp: &[f64]| model.first_order(t, &x, yy, pp, a);
        if let (Ok(f1), Ok(f2), Ok(fm)) = (f(y, &p), f(y2, &p2), f(0.5 * (y + y2), &pm)) {
            let defect = fm - 0.5 * (f1 + f2);
            concavity.offer(defect, || {
                wit(format!("midpoint defect {defect:e} between (y={y}, p={p:?}) and (y'={y2}, p'={p2:?})"))
            });
        }

        if let Some(fin) = model.finance() {
            let rl = (fin.r_lend)(model.clamp_time(t), &x, a);
            let rb = (fin.r_borrow)(model.clamp_time(t), &x, a);
            let gap = rb - rl;
            rate_order.offer(gap, || wit(format!("r_borrow - r_lend = {gap}")));
            match (fin.risk_premia(t, &x, a), fin.risk_premia(t, &x2, a)) {
                (Some((b1, l1)), Some((b2, l2))) => {
                    let diff = dist(&b1, &b2).max(dist(&l1, &l2));
                    premia.offer(diff, || wit(format!("risk premia differ by {diff:e} against x'={x2:?}")));
                }
                _ => premia.offer(f64::INFINITY, || wit("singular sigma".into())),
            }
        }
    }

    let mut checks = vec![
        sigma_bound.finish(),
        lip_x.finish(),
        lip_y.finish(),
        inversion.finish(),
        growth.finish(),
        drift_vol.finish(),
        concavity.finish(),
        finite.finish(),
    ];
    if model.finance().is_some() {
        checks.push(rate_order.finish());
        checks.push(premia.finish());
    }
    ValidationReport { sample_count: n, checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Payoff;

    #[test]
    fn finance_preset_passes() {
        let m = ModelSpec::uncertain_vol(1, 0.05, 0.02, 0.05, Payoff::call(1.0), vec![vec![0.1], vec![0.3]], 1.0).unwrap();
        let r = validate_assumptions(&m, 2000, 1);
        assert!(r.passed(), "{r:#?}");
        assert_eq!(r.get(AssumptionId::LipschitzX).unwrap().worst, 0.0);
    }

    #[test]
    fn inverted_rates_flag_concavity() {
        let m = ModelSpec::uncertain_vol(1, 0.0, 0.05, 0.02, Payoff::call(1.0), vec![vec![0.2]], 1.0).unwrap();
        let r = validate_assumptions(&m, 500, 2);
        let ids: Vec<_> = r.violations().map(|c| c.id).collect();
        assert!(ids.contains(&AssumptionId::Concavity));
        assert!(ids.contains(&AssumptionId::RateOrder));
        assert!(r.get(AssumptionId::Concavity).unwrap().witness.is_some());
    }

    #[test]
    fn sigma_bound_violation() {
        let m = ModelSpec::uncertain_vol(1, 0.0, 0.0, 0.0, Payoff::call(1.0), vec![vec![0.2]], 1.0).unwrap();
        // same closures, understated K
        let m = ModelSpec::builder(1)
            .mu_x(|_, _, _, o| o[0] = 0.0)
            .sigma_x(|_, _, _, o| o[0] = 0.2)
            .mu_y(|_, _, _, _, _| 0.0)
            .sigma_y(|_, _, _, u, _, o| o[0] = 0.2 * u[0])
            .u_hat(|_, _, _, z, _, o| {
                o[0] = z[0] / 0.2;
                Ok(())
            })
            .payoff(move |x| m.payoff(x))
            .a_points(vec![vec![0.0]])
            .lipschitz_k(0.1)
            .build()
            .unwrap();
        let r = validate_assumptions(&m, 50, 3);
        assert!(!r.get(AssumptionId::SigmaBound).unwrap().passed);
    }
}
