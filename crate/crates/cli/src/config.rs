//! Run configuration: strict JSON with dotted-path overrides.

use std::path::Path;

use hedgegame::hjb::{BoundaryMode, GridSpec};
use hedgegame::model::ModelConfig;
use hedgegame::regularize::{BoxSet, RegularizeOptions};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub point: PointConfig,
    #[serde(default)]
    pub regularize: RegularizeConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub dual: DualConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_steps: usize,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub x_steps: Vec<usize>,
    #[serde(default)]
    pub boundary_mode: BoundaryMode,
}

impl GridConfig {
    pub fn spec(&self, horizon: f64) -> GridSpec {
        GridSpec::new(horizon, self.t_steps, self.x_min.clone(), self.x_max.clone(), self.x_steps.clone())
            .with_boundary(self.boundary_mode)
    }
}

/// Where prices are reported and simulations start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PointConfig {
    pub t0: f64,
    /// Empty means the origin.
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizeConfig {
    pub eta: f64,
    /// `v-plus-margin:<m>` or the path of a surface CSV written by `solve`.
    pub phi: String,
    /// `None` means the central half of the grid.
    pub b_box: Option<BoxSet>,
    pub eps_ladder: Vec<f64>,
    pub tol: f64,
    pub axis_weights: Vec<f64>,
    pub time_extension: Option<f64>,
    pub delta_halvings: usize,
    pub check_n_t: usize,
    pub check_n_x: usize,
    pub check_fraction: f64,
}

impl Default for RegularizeConfig {
    fn default() -> Self {
        let o = RegularizeOptions::default();
        Self {
            eta: 0.1,
            phi: "v-plus-margin:0.1".into(),
            b_box: None,
            eps_ladder: o.eps_ladder,
            tol: o.tol,
            axis_weights: o.axis_weights,
            time_extension: o.time_extension,
            delta_halvings: o.delta_halvings,
            check_n_t: o.check_n_t,
            check_n_x: o.check_n_x,
            check_fraction: o.check_fraction,
        }
    }
}

impl RegularizeConfig {
    pub fn options(&self) -> RegularizeOptions {
        RegularizeOptions {
            eps_ladder: self.eps_ladder.clone(),
            tol: self.tol,
            axis_weights: self.axis_weights.clone(),
            time_extension: self.time_extension,
            delta_halvings: self.delta_halvings,
            check_n_t: self.check_n_t,
            check_n_x: self.check_n_x,
            check_fraction: self.check_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub tol_sim: f64,
    pub p_sim: f64,
    pub margin: f64,
    pub switch_rate: f64,
    /// `all`, `constant:<i>`, `random:<rate>` or `worst`.
    pub adversary: String,
    /// `auto` or a number.
    pub y0: String,
    /// Surface cache to hedge from; empty means solve first.
    pub surface: String,
    pub write_paths: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            paths: 10_000,
            steps: 400,
            seed: 1,
            tol_sim: 0.02,
            p_sim: 0.05,
            margin: 0.0,
            switch_rate: 4.0,
            adversary: "all".into(),
            y0: "auto".into(),
            surface: String::new(),
            write_paths: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualConfig {
    pub eps: f64,
    pub knots: usize,
    pub gamma_grid: usize,
    pub degree: usize,
    pub paths: usize,
    pub seed: u64,
    pub euler_steps: usize,
    /// Enables the dynamic-programming check at this time.
    pub mid: Option<f64>,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            eps: 0.0,
            knots: 4,
            gamma_grid: 3,
            degree: 2,
            paths: 100_000,
            seed: 1,
            euler_steps: hedgegame::dual::DEFAULT_EULER_STEPS,
            mid: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    Tsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: String,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: "out".into(), formats: vec![Format::Json, Format::Csv, Format::Tsv] }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

/// Applies `a.b=value`; the value is parsed as JSON when possible and taken
/// as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form a.b=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(root, path, value)
}

/// Sets the dotted `path` in a JSON tree, creating missing objects; numeric
/// keys index arrays.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override path `{path}`")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| CliError::Config(format!("`{key}` in `{path}` indexes an array")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Config(format!("index {idx} out of range ({len}) in `{path}`")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Config(format!("`{path}` descends into a scalar"))),
        };
    }
    unreachable!("the loop returns on the last key")
}

impl RunConfig {
    pub fn from_value(v: Value) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads `path`, applies `--set` overrides, then typed flag values.
    pub fn load(path: &Path, overrides: &[String], flags: &[(String, Value)]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        for (p, val) in flags {
            set_path(&mut v, p, val.clone())?;
        }
        Self::from_value(v)
    }

    fn check(&self) -> Result<(), CliError> {
        let d = self.model.dim;
        let bad = |m: String| Err(CliError::Config(m));
        if !self.point.x0.is_empty() && self.point.x0.len() != d {
            return bad(format!("point.x0 has {} entries, model.dim is {d}", self.point.x0.len()));
        }
        if self.grid.x_min.len() != d {
            return bad(format!("grid has {} axes, model.dim is {d}", self.grid.x_min.len()));
        }
        self.grid.spec(self.model.horizon_t).validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sim.y0 != "auto" && self.sim.y0.parse::<f64>().is_err() {
            return bad(format!("sim.y0 must be `auto` or a number, got `{}`", self.sim.y0));
        }
        Ok(())
    }

    pub fn x0(&self) -> Vec<f64> {
        if self.point.x0.is_empty() {
            vec![0.0; self.model.dim]
        } else {
            self.point.x0.clone()
        }
    }

    /// Canonical serialization.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form with the output directory blanked, so
    /// the same run written elsewhere carries the same hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.directory.clear();
        hex::encode(Sha256::digest(c.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    pub(crate) fn sample() -> Value {
        json!({
            "model": {
                "kind": "finance", "dim": 1, "A_points": [[0.2]],
                "finance": {
                    "mu": {"type": "constant", "value": 0.0},
                    "sigma": {"type": "affine_in_a"},
                    "r_lend": {"type": "constant", "value": 0.0},
                    "r_borrow": {"type": "constant", "value": 0.0}
                },
                "payoff": {"name": "call", "strike": 1.0},
                "horizon_T": 1.0
            },
            "grid": {"t_steps": 400, "x_min": [-1.2], "x_max": [1.2], "x_steps": [200]}
        })
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = RunConfig::from_value(sample()).unwrap();
        let text = cfg.canonical();
        let again = RunConfig::from_value(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(text, again.canonical());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = sample();
        v["sim"] = json!({"pathz": 3});
        assert!(RunConfig::from_value(v).is_err());
        let mut v = sample();
        v["regularize"] = json!({"eps_ladder": [0.1], "bogus": 1});
        assert!(RunConfig::from_value(v).is_err());
        let mut v = sample();
        v["extra"] = json!(1);
        assert!(RunConfig::from_value(v).is_err());
    }

    #[test]
    fn overrides_set_nested_values() {
        let mut v = sample();
        apply_override(&mut v, "sim.paths=123").unwrap();
        apply_override(&mut v, "model.A_points.0.0=0.3").unwrap();
        apply_override(&mut v, "regularize.phi=v-plus-margin:0.2").unwrap();
        apply_override(&mut v, "regularize.eps_ladder=[0.1,0.05]").unwrap();
        let cfg = RunConfig::from_value(v).unwrap();
        assert_eq!(cfg.sim.paths, 123);
        assert_eq!(cfg.model.a_points, vec![vec![0.3]]);
        assert_eq!(cfg.regularize.phi, "v-plus-margin:0.2");
        assert_eq!(cfg.regularize.eps_ladder, vec![0.1, 0.05]);
        let mut v = sample();
        assert!(apply_override(&mut v, "sim.paths").is_err());
        assert!(apply_override(&mut v, "model.A_points.7.0=1").is_err());
    }

    #[test]
    fn hash_ignores_the_output_directory() {
        let a = RunConfig::from_value(sample()).unwrap();
        let mut b = a.clone();
        b.output.directory = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.sim.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
