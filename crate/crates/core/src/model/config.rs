//! JSON model definitions: the finance market with named coefficient
//! built-ins, or a one-dimensional model tabulated in `x`.

use serde::{Deserialize, Serialize};

use super::{FinanceSpec, ModelError, ModelSpec, Payoff, PayoffKind, Underlying, MAX_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "finance")]
    Finance,
    #[serde(rename = "custom-tabulated")]
    CustomTabulated,
}

/// A scalar coefficient that may depend on the adverse point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Coefficient {
    Constant { value: f64 },
    /// `intercept + slope * a_j` on component `j` (a scalar `a` is broadcast).
    AffineInA {
        #[serde(default)]
        intercept: f64,
        #[serde(default = "one")]
        slope: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Coefficient {
    fn at(&self, a: &[f64], j: usize) -> f64 {
        match *self {
            Coefficient::Constant { value } => value,
            Coefficient::AffineInA { intercept, slope } => {
                intercept + slope * if a.len() == 1 { a[0] } else { a[j] }
            }
        }
    }

    fn validate(&self, name: &str) -> Result<(), ModelError> {
        let ok = match *self {
            Coefficient::Constant { value } => value.is_finite(),
            Coefficient::AffineInA { intercept, slope } => intercept.is_finite() && slope.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::Invalid(format!("{name} has non-finite parameters")))
        }
    }
}

/// Coefficients of the log-price market. `sigma` is diagonal; rates use the
/// first component of `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinanceConfig {
    pub mu: Coefficient,
    pub sigma: Coefficient,
    pub r_lend: Coefficient,
    pub r_borrow: Coefficient,
}

/// One-dimensional model tabulated on `x_nodes`, one row per adverse point:
/// `dX = mu dt + sigma dW`, `dY = lambda sigma u dt + sigma u dW`.
/// Tables are interpolated linearly and held constant outside the nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabulatedConfig {
    pub x_nodes: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffName {
    Call,
    Put,
    CallSpread,
    DigitalSmoothed,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffConfig {
    pub name: PayoffName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strike: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    #[serde(default = "one")]
    pub scale: f64,
}

impl PayoffConfig {
    pub fn build(&self, underlying: Underlying) -> Result<Payoff, ModelError> {
        let need = |v: Option<f64>, n: &str| {
            v.ok_or_else(|| ModelError::Invalid(format!("payoff {:?} needs `{n}`", self.name)))
        };
        let kind = match self.name {
            PayoffName::Call => PayoffKind::Call { strike: need(self.strike, "strike")? },
            PayoffName::Put => PayoffKind::Put { strike: need(self.strike, "strike")? },
            PayoffName::CallSpread => PayoffKind::CallSpread {
                strike: need(self.strike, "strike")?,
                cap: need(self.cap, "cap")?,
            },
            PayoffName::DigitalSmoothed => PayoffKind::DigitalSmoothed {
                strike: need(self.strike, "strike")?,
                width: need(self.width, "width")?,
                level: self.level.unwrap_or(1.0),
            },
            PayoffName::Constant => PayoffKind::Constant { level: need(self.level, "level")? },
        };
        let p = Payoff::new(kind).scaled(self.scale).on(underlying);
        p.validate().map_err(ModelError::Invalid)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dim: usize,
    #[serde(rename = "A_points")]
    pub a_points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finance: Option<FinanceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tabulated: Option<TabulatedConfig>,
    pub payoff: PayoffConfig,
    #[serde(rename = "horizon_T")]
    pub horizon_t: f64,
    /// Overrides the Lipschitz constant derived from the coefficients.
    #[serde(rename = "lipschitz_K", default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_k: Option<f64>,
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec, ModelError> {
        let d = self.dim;
        if d == 0 || d > MAX_DIM {
            return Err(ModelError::Invalid(format!("dim {d} outside 1..={MAX_DIM}")));
        }
        match self.kind {
            ModelKind::Finance => {
                let f = self
                    .finance
                    .ok_or_else(|| ModelError::Invalid("finance model needs a `finance` section".into()))?;
                if self.tabulated.is_some() {
                    return Err(ModelError::Invalid("`tabulated` belongs to custom-tabulated models".into()));
                }
                self.build_finance(f)
            }
            ModelKind::CustomTabulated => {
                let t = self
                    .tabulated
                    .as_ref()
                    .ok_or_else(|| ModelError::Invalid("custom-tabulated model needs a `tabulated` section".into()))?;
                if self.finance.is_some() {
                    return Err(ModelError::Invalid("`finance` belongs to finance models".into()));
                }
                self.build_tabulated(t)
            }
        }
    }

    fn build_finance(&self, f: FinanceConfig) -> Result<ModelSpec, ModelError> {
        let d = self.dim;
        f.mu.validate("mu")?;
        f.sigma.validate("sigma")?;
        f.r_lend.validate("r_lend")?;
        f.r_borrow.validate("r_borrow")?;
        for a in &self.a_points {
            if a.len() != 1 && a.len() != d {
                return Err(ModelError::Invalid(format!("A point {a:?} must have 1 or {d} entries")));
            }
        }
        let spec = FinanceSpec::new(
            d,
            move |_, _, a, out| {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = f.mu.at(a, j);
                }
            },
            move |_, _, a, out| {
                out.fill(0.0);
                for j in 0..d {
                    out[j * d + j] = f.sigma.at(a, j);
                }
            },
            move |_, _, a| f.r_lend.at(a, 0),
            move |_, _, a| f.r_borrow.at(a, 0),
        );
        let k = match self.lipschitz_k {
            Some(k) => k,
            None => self
                .a_points
                .iter()
                .flat_map(|a| (0..d).flat_map(move |j| [f.sigma.at(a, j).abs(), f.mu.at(a, j).abs()]))
                .fold(1e-12, f64::max),
        };
        let payoff = self.payoff.build(Underlying::Price)?;
        let descriptor = serde_json::to_string(&f).expect("finance section serializes");
        ModelSpec::finance_model(spec, payoff, self.a_points.clone(), self.horizon_t, k, &format!("config|{descriptor}"))
    }

    fn build_tabulated(&self, t: &TabulatedConfig) -> Result<ModelSpec, ModelError> {
        if self.dim != 1 {
            return Err(ModelError::Invalid("tabulated models are one-dimensional".into()));
        }
        let n = t.x_nodes.len();
        if n < 2 || t.x_nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ModelError::Invalid("x_nodes must be at least two increasing values".into()));
        }
        let na = self.a_points.len();
        for (name, tab) in [("mu", &t.mu), ("sigma", &t.sigma), ("lambda", &t.lambda)] {
            if tab.len() != na || tab.iter().any(|r| r.len() != n || r.iter().any(|v| !v.is_finite())) {
                return Err(ModelError::Invalid(format!("{name} needs {na} finite rows of {n} values")));
            }
        }
        let table = Table { x: t.x_nodes.clone(), mu: t.mu.clone(), sigma: t.sigma.clone(), lambda: t.lambda.clone() };
        let slope = |rows: &[Vec<f64>]| {
            rows.iter()
                .flat_map(|r| r.windows(2).zip(t.x_nodes.windows(2)).map(|(v, x)| ((v[1] - v[0]) / (x[1] - x[0])).abs()))
                .fold(0.0, f64::max)
        };
        let sup = |rows: &[Vec<f64>]| rows.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let k = self.lipschitz_k.unwrap_or_else(|| {
            [slope(&t.mu), slope(&t.sigma), sup(&t.sigma), sup(&t.mu)].into_iter().fold(1e-12, f64::max)
        });
        // the adverse point is looked up by value
        let points = self.a_points.clone();
        let index = move |a: &[f64]| points.iter().position(|p| p.as_slice() == a).unwrap_or(0);
        let (t1, t2, t3, t4, t5) = (table.clone(), table.clone(), table.clone(), table.clone(), table);
        let (i1, i2, i3, i4, i5) = (index.clone(), index.clone(), index.clone(), index.clone(), index);
        let payoff = self.payoff.build(Underlying::Level)?;
        let descriptor = serde_json::to_string(t).expect("tabulated section serializes");
        ModelSpec::builder(1)
            .mu_x(move |_, x, a, o| o[0] = t1.interp(&t1.mu[i1(a)], x[0]))
            .sigma_x(move |_, x, a, o| o[0] = t2.interp(&t2.sigma[i2(a)], x[0]))
            .mu_y(move |_, x, _, u, a| {
                let k = i3(a);
                t3.interp(&t3.lambda[k], x[0]) * t3.interp(&t3.sigma[k], x[0]) * u[0]
            })
            .sigma_y(move |_, x, _, u, a, o| o[0] = t4.interp(&t4.sigma[i4(a)], x[0]) * u[0])
            .u_hat(move |t, x, _, z, a, o| {
                let s = t5.interp(&t5.sigma[i5(a)], x[0]);
                if s == 0.0 {
                    return Err(ModelError::SingularSigma { t, x: x.to_vec(), a: a.to_vec() });
                }
                o[0] = z[0] / s;
                Ok(())
            })
            .payoff(move |x| payoff.eval(x))
            .a_points(self.a_points.clone())
            .horizon(self.horizon_t)
            .lipschitz_k(k)
            .descriptor(format!("tabulated|{descriptor}|payoff={:?}", self.payoff))
            .build()
    }
}

#[derive(Debug, Clone)]
struct Table {
    x: Vec<f64>,
    mu: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    lambda: Vec<Vec<f64>>,
}

impl Table {
    fn interp(&self, row: &[f64], x: f64) -> f64 {
        let n = self.x.len();
        if x <= self.x[0] {
            return row[0];
        }
        if x >= self.x[n - 1] {
            return row[n - 1];
        }
        let i = self.x.partition_point(|&v| v <= x) - 1;
        let w = (x - self.x[i]) / (self.x[i + 1] - self.x[i]);
        row[i] + w * (row[i + 1] - row[i])
    }
}
