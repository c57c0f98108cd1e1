/// How the state is turned into the scalar the payoff acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Underlying {
    /// Mean of `exp(x_j)`: log-price state.
    Price,
    /// Mean of `x_j`.
    Level,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PayoffKind {
    Call { strike: f64 },
    Put { strike: f64 },
    CallSpread { strike: f64, cap: f64 },
    /// Linear ramp from 0 to `level` over `[strike - width/2, strike + width/2]`.
    DigitalSmoothed { strike: f64, width: f64, level: f64 },
    Constant { level: f64 },
}

/// Named terminal function `g`, multiplied by `scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Payoff {
    pub kind: PayoffKind,
    pub scale: f64,
    pub underlying: Underlying,
}

impl Payoff {
    pub fn new(kind: PayoffKind) -> Self {
        Self { kind, scale: 1.0, underlying: Underlying::Price }
    }

    pub fn call(strike: f64) -> Self {
        Self::new(PayoffKind::Call { strike })
    }

    pub fn put(strike: f64) -> Self {
        Self::new(PayoffKind::Put { strike })
    }

    pub fn call_spread(strike: f64, cap: f64) -> Self {
        Self::new(PayoffKind::CallSpread { strike, cap })
    }

    pub fn constant(level: f64) -> Self {
        Self::new(PayoffKind::Constant { level })
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn on(mut self, underlying: Underlying) -> Self {
        self.underlying = underlying;
        self
    }

    pub fn underlying_value(&self, x: &[f64]) -> f64 {
        let n = x.len() as f64;
        match self.underlying {
            Underlying::Price => x.iter().map(|v| v.exp()).sum::<f64>() / n,
            Underlying::Level => x.iter().sum::<f64>() / n,
        }
    }

    pub fn eval_underlying(&self, s: f64) -> f64 {
        let raw = match self.kind {
            PayoffKind::Call { strike } => (s - strike).max(0.0),
            PayoffKind::Put { strike } => (strike - s).max(0.0),
            PayoffKind::CallSpread { strike, cap } => (s - strike).max(0.0) - (s - cap).max(0.0),
            PayoffKind::DigitalSmoothed { strike, width, level } => {
                level * ((s - strike + 0.5 * width) / width).clamp(0.0, 1.0)
            }
            PayoffKind::Constant { level } => level,
        };
        self.scale * raw
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_underlying(self.underlying_value(x))
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite = |v: f64, n: &str| if v.is_finite() { Ok(()) } else { Err(format!("payoff {n} must be finite")) };
        finite(self.scale, "scale")?;
        match self.kind {
            PayoffKind::Call { strike } | PayoffKind::Put { strike } => finite(strike, "strike"),
            PayoffKind::CallSpread { strike, cap } => {
                finite(strike, "strike")?;
                finite(cap, "cap")?;
                if cap <= strike {
                    return Err(format!("call_spread cap {cap} must exceed strike {strike}"));
                }
                Ok(())
            }
            PayoffKind::DigitalSmoothed { strike, width, level } => {
                finite(strike, "strike")?;
                finite(level, "level")?;
                if !(width > 0.0) {
                    return Err("digital_smoothed width must be positive".into());
                }
                Ok(())
            }
            PayoffKind::Constant { level } => finite(level, "level"),
        }
    }
}
