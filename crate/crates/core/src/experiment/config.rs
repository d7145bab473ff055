//! TOML experiment configuration.
//!
//! Parsing is fail-closed: unknown keys are rejected and every structural
//! invariant is checked before anything runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::path::{CadlagPath, InitialCondition, TimeGrid};
use crate::sde::{Atom, CoefficientBounds, Drift, Engine, JumpMeasure, PresetCoefficients};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Canonical,
    Mp,
    Generator,
    Maf,
    Tightness,
    Continuity,
}

impl Suite {
    pub const ALL: [Suite; 6] = [Suite::Canonical, Suite::Mp, Suite::Generator, Suite::Maf, Suite::Tightness, Suite::Continuity];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Canonical => "canonical",
            Suite::Mp => "mp",
            Suite::Generator => "generator",
            Suite::Maf => "maf",
            Suite::Tightness => "tightness",
            Suite::Continuity => "continuity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// State dimension `m`.
    pub dim: usize,
    pub horizon: f64,
    pub dt: f64,
    pub drift: DriftConfig,
    /// Norm clip applied to the drift.
    #[serde(default)]
    pub clip: Option<f64>,
    /// Row-major `m × m` diffusion matrix.
    pub sigma: Vec<f64>,
    #[serde(default = "one")]
    pub jump_scale: f64,
    #[serde(default)]
    pub atoms: Vec<AtomConfig>,
    /// Overrides the bounds derived from the preset.
    #[serde(default)]
    pub bounds: Option<BoundsConfig>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftConfig {
    Constant { beta: Vec<f64> },
    Markov { kappa: f64, target: Vec<f64> },
    RunningMax { kappa: f64 },
    MovingAverage { kappa: f64, window: f64 },
    Delay { kappa: f64, lag: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomConfig {
    pub y: Vec<f64>,
    pub mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub beta: f64,
    pub sigma: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub s: f64,
    /// CSV path `t,x1,...,xm` on the model grid; relative to the config file.
    #[serde(default)]
    pub initial_path: Option<PathBuf>,
    /// Constant initial path; zero when neither this nor `initial_path` is set.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    pub n_paths: usize,
    pub seed: u64,
    /// Directory written by `simulate`; suites that take a fixed ensemble
    /// read it instead of simulating.
    #[serde(default)]
    pub ensemble: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub suites: Vec<Suite>,
    pub z_crit: f64,
    /// Frequencies of the trigonometric test functions.
    pub thetas: Option<Vec<Vec<f64>>>,
    /// Query times; defaults to the grid nodes nearest to the quarters of `[s, T]`.
    pub times: Option<Vec<f64>>,
    pub bank_size: usize,
    pub bank_spacing: f64,
    /// QV interval; defaults to `[s, T]`.
    pub qv_interval: Option<[f64; 2]>,
    /// Density windows in grid steps.
    pub rn_windows: Vec<usize>,
    pub nested_outer: usize,
    pub nested_inner: usize,
    pub flow_conditioning: usize,
    pub tightness_n: f64,
    pub tightness_epsilon: f64,
    pub tightness_alphas: Vec<f64>,
    /// Number of approximating initial conditions `η(0) + 2^{-n}`.
    pub approximants: usize,
    /// Test hook: drop the jump compensator from the generator.
    pub sabotage: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            suites: Suite::ALL.to_vec(),
            z_crit: 3.0,
            thetas: None,
            times: None,
            bank_size: 8,
            bank_spacing: 0.5,
            qv_interval: None,
            rn_windows: vec![1, 2, 4],
            nested_outer: 200,
            nested_inner: 200,
            flow_conditioning: 2,
            tightness_n: 1.0,
            tightness_epsilon: 0.05,
            tightness_alphas: vec![0.5],
            approximants: 5,
            sabotage: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), formats: vec![Format::Json, Format::Csv] }
    }
}

fn integral_ratio(x: f64, dt: f64) -> Option<usize> {
    let r = x / dt;
    let n = r.round();
    ((r - n).abs() <= 1e-9 * n.max(1.0) && n >= 0.0).then_some(n as usize)
}

fn finite(field: &str, x: f64) -> Result<(), ConfigError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, "must be finite"))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.check_structure()?;
        Ok(cfg)
    }

    /// Reads a config file and checks that referenced files exist.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &cfg.run.initial_path {
            let full = base.join(p);
            if !full.is_file() {
                return Err(invalid("run.initial_path", format!("{} does not exist", full.display())));
            }
            cfg.run.initial_path = Some(full);
        }
        if let Some(p) = &cfg.run.ensemble {
            cfg.run.ensemble = Some(base.join(p));
        }
        Ok(cfg)
    }

    pub fn steps(&self) -> usize {
        integral_ratio(self.model.horizon, self.model.dt).unwrap_or(0)
    }

    fn check_structure(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid("schema_version", format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version)));
        }
        let m = &self.model;
        if m.dim == 0 {
            return Err(invalid("model.dim", "must be at least 1"));
        }
        finite("model.horizon", m.horizon)?;
        finite("model.dt", m.dt)?;
        if m.horizon <= 0.0 || m.dt <= 0.0 {
            return Err(invalid("model.dt", "horizon and dt must be positive"));
        }
        match integral_ratio(m.horizon, m.dt) {
            Some(n) if (1..=1 << 20).contains(&n) => {}
            _ => return Err(invalid("model.dt", "must divide model.horizon into at most 2^20 steps")),
        }
        if m.sigma.len() != m.dim * m.dim {
            return Err(invalid("model.sigma", format!("expected {} entries (row-major m x m), got {}", m.dim * m.dim, m.sigma.len())));
        }
        if m.sigma.iter().any(|x| !x.is_finite()) {
            return Err(invalid("model.sigma", "must be finite"));
        }
        let vec_dim = |field: &str, v: &[f64]| {
            if v.len() != m.dim || v.iter().any(|x| !x.is_finite()) {
                Err(invalid(field, format!("expected {} finite entries", m.dim)))
            } else {
                Ok(())
            }
        };
        match &m.drift {
            DriftConfig::Constant { beta } => vec_dim("model.drift.beta", beta)?,
            DriftConfig::Markov { kappa, target } => {
                finite("model.drift.kappa", *kappa)?;
                vec_dim("model.drift.target", target)?
            }
            DriftConfig::RunningMax { kappa } => finite("model.drift.kappa", *kappa)?,
            DriftConfig::MovingAverage { kappa, window } => {
                finite("model.drift.kappa", *kappa)?;
                if !(*window > 0.0 && window.is_finite()) {
                    return Err(invalid("model.drift.window", "must be positive"));
                }
            }
            DriftConfig::Delay { kappa, lag } => {
                finite("model.drift.kappa", *kappa)?;
                if !(*lag >= 0.0 && lag.is_finite()) {
                    return Err(invalid("model.drift.lag", "must be non-negative"));
                }
            }
        }
        if let Some(c) = m.clip {
            if !(c > 0.0) {
                return Err(invalid("model.clip", "must be positive"));
            }
        }
        finite("model.jump_scale", m.jump_scale)?;
        for (i, a) in m.atoms.iter().enumerate() {
            vec_dim(&format!("model.atoms[{i}].y"), &a.y)?;
            if a.y.iter().all(|&x| x == 0.0) {
                return Err(invalid(format!("model.atoms[{i}].y"), "jump atoms must be nonzero"));
            }
            if !(a.mass > 0.0 && a.mass.is_finite()) {
                return Err(invalid(format!("model.atoms[{i}].mass"), "must be positive and finite"));
            }
        }
        if let Some(b) = m.bounds {
            for (f, v) in [("beta", b.beta), ("sigma", b.sigma), ("w", b.w)] {
                if !(v >= 0.0) {
                    return Err(invalid(format!("model.bounds.{f}"), "must be non-negative"));
                }
            }
        }

        let r = &self.run;
        finite("run.s", r.s)?;
        if r.s < 0.0 || r.s > m.horizon || integral_ratio(r.s, m.dt).is_none() {
            return Err(invalid("run.s", "must be a multiple of model.dt in [0, model.horizon]"));
        }
        if r.n_paths == 0 {
            return Err(invalid("run.n_paths", "must be at least 1"));
        }
        if r.initial_path.is_some() && r.x0.is_some() {
            return Err(invalid("run.x0", "give either run.x0 or run.initial_path, not both"));
        }
        if let Some(x0) = &r.x0 {
            vec_dim("run.x0", x0)?;
        }

        let v = &self.verify;
        if v.suites.is_empty() {
            return Err(invalid("verify.suites", "must name at least one suite"));
        }
        if !(v.z_crit > 0.0 && v.z_crit.is_finite()) {
            return Err(invalid("verify.z_crit", "must be positive"));
        }
        if let Some(th) = &v.thetas {
            if th.is_empty() {
                return Err(invalid("verify.thetas", "must not be empty"));
            }
            for (i, t) in th.iter().enumerate() {
                vec_dim(&format!("verify.thetas[{i}]"), t)?;
            }
        }
        if let Some(times) = &v.times {
            for (i, &t) in times.iter().enumerate() {
                if t < r.s || t > m.horizon || integral_ratio(t, m.dt).is_none() {
                    return Err(invalid(format!("verify.times[{i}]"), "must be a multiple of model.dt in [run.s, model.horizon]"));
                }
            }
        }
        if v.bank_size == 0 {
            return Err(invalid("verify.bank_size", "must be at least 1"));
        }
        if !(v.bank_spacing > 0.0 && v.bank_spacing.is_finite()) {
            return Err(invalid("verify.bank_spacing", "must be positive"));
        }
        if let Some([a, b]) = v.qv_interval {
            if !(r.s <= a && a < b && b <= m.horizon) || integral_ratio(a, m.dt).is_none() || integral_ratio(b, m.dt).is_none() {
                return Err(invalid("verify.qv_interval", "must be grid times s <= t < u <= horizon"));
            }
        }
        if v.rn_windows.is_empty() || v.rn_windows.contains(&0) {
            return Err(invalid("verify.rn_windows", "must be non-empty positive step counts"));
        }
        if v.nested_outer < 2 || v.nested_inner < 2 {
            return Err(invalid("verify.nested_outer", "nested budgets must be at least 2"));
        }
        if v.flow_conditioning == 0 {
            return Err(invalid("verify.flow_conditioning", "must be at least 1"));
        }
        if !(v.tightness_n > 0.0) || v.tightness_n > m.horizon {
            return Err(invalid("verify.tightness_n", "must be in (0, model.horizon]"));
        }
        if !(v.tightness_epsilon > 0.0 && v.tightness_epsilon < 1.0) {
            return Err(invalid("verify.tightness_epsilon", "must be in (0, 1)"));
        }
        if v.tightness_alphas.is_empty() || v.tightness_alphas.iter().any(|&a| !(a > 0.0)) {
            return Err(invalid("verify.tightness_alphas", "must be non-empty and positive"));
        }
        if v.approximants == 0 || v.approximants > 30 {
            return Err(invalid("verify.approximants", "must be in 1..=30"));
        }
        if self.output.formats.is_empty() {
            return Err(invalid("output.formats", "must not be empty"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every field that affects results.
    ///
    /// The output block and the ensemble location are excluded; an initial
    /// path file enters through its contents.
    pub fn hash(&self) -> Result<String, ConfigError> {
        let mut v = serde_json::to_value(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let obj = v.as_object_mut().expect("config serialises to an object");
        obj.remove("output");
        let run = obj.get_mut("run").and_then(|r| r.as_object_mut()).expect("run block");
        run.remove("ensemble");
        if let Some(p) = &self.run.initial_path {
            let bytes = fs::read(p).map_err(|e| ConfigError::Io { path: p.display().to_string(), message: e.to_string() })?;
            run.insert("initial_path".into(), serde_json::Value::String(hex::encode(Sha256::digest(&bytes))));
        }
        let canonical = serde_json::to_string(&v).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }

    pub fn grid(&self) -> Result<Arc<TimeGrid<f64>>, ConfigError> {
        TimeGrid::uniform(self.model.horizon, self.model.dt)
            .map(Arc::new)
            .map_err(|e| invalid("model.dt", e.to_string()))
    }

    pub fn jumps(&self) -> Result<JumpMeasure<f64>, ConfigError> {
        let atoms = self.model.atoms.iter().map(|a| Atom { y: a.y.clone(), mass: a.mass }).collect();
        JumpMeasure::new(atoms).map_err(|e| invalid("model.atoms", e.to_string()))
    }

    pub fn engine(&self) -> Result<Engine<f64>, ConfigError> {
        let m = &self.model;
        let drift = match &m.drift {
            DriftConfig::Constant { beta } => Drift::Constant(beta.clone()),
            DriftConfig::Markov { kappa, target } => Drift::Markov { kappa: *kappa, target: target.clone() },
            DriftConfig::RunningMax { kappa } => Drift::RunningMax { kappa: *kappa },
            DriftConfig::MovingAverage { kappa, window } => Drift::MovingAverage { kappa: *kappa, window: *window },
            DriftConfig::Delay { kappa, lag } => Drift::Delay { kappa: *kappa, lag: *lag },
        };
        let jumps = self.jumps()?;
        let mut coeffs = PresetCoefficients::new(m.dim, drift, m.clip, m.sigma.clone(), m.jump_scale, &jumps)
            .map_err(|e| invalid("model", e.to_string()))?;
        if let Some(b) = m.bounds {
            coeffs = coeffs.with_bounds(CoefficientBounds { beta: b.beta, sigma: b.sigma, w: b.w });
        }
        Engine::with_preset(coeffs, jumps, self.grid()?).map_err(|e| invalid("model", e.to_string()))
    }

    /// The initial condition `(s, η)` on the model grid.
    pub fn initial(&self) -> Result<InitialCondition<f64>, ConfigError> {
        let grid = self.grid()?;
        let m = self.model.dim;
        let eta = match (&self.run.initial_path, &self.run.x0) {
            (Some(p), _) => {
                let f = fs::File::open(p).map_err(|e| ConfigError::Io { path: p.display().to_string(), message: e.to_string() })?;
                let read = CadlagPath::<f64>::read_csv(std::io::BufReader::new(f)).map_err(|e| invalid("run.initial_path", e.to_string()))?;
                if read.dim() != m {
                    return Err(invalid("run.initial_path", format!("dimension {} does not match model.dim {m}", read.dim())));
                }
                let times = read.grid().times();
                if times.len() != grid.len() || times.iter().zip(grid.times()).any(|(a, b)| (a - b).abs() > 1e-9 * b.abs().max(1.0)) {
                    return Err(invalid("run.initial_path", "time column must match the model grid"));
                }
                CadlagPath::new(grid.clone(), m, read.values().to_vec()).map_err(|e| invalid("run.initial_path", e.to_string()))?
            }
            (None, Some(x0)) => CadlagPath::constant(grid.clone(), x0),
            (None, None) => CadlagPath::constant(grid.clone(), &vec![0.0; m]),
        };
        let k = integral_ratio(self.run.s, self.model.dt).ok_or_else(|| invalid("run.s", "not on the grid"))?;
        Ok(InitialCondition::at_node(k, &eta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
[model]
dim = 1
horizon = 1.0
dt = 0.25
drift = { kind = "constant", beta = [0.0] }
sigma = [0.0]
[run]
n_paths = 2
seed = 7
"#;

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.steps(), 4);
        assert_eq!(c.verify.suites.len(), 6);
        let e = c.engine().unwrap();
        assert_eq!(e.grid().len(), 5);
        assert_eq!(c.initial().unwrap().start_point(), &[0.0]);
    }

    #[test]
    fn rejections_name_the_field() {
        let err = |text: String| ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err(MINIMAL.replace("n_paths = 2", "n_paths = 0")).contains("run.n_paths"));
        assert!(err(MINIMAL.replace("dt = 0.25", "dt = 0.3")).contains("model.dt"));
        assert!(err(MINIMAL.replace("seed = 7", "seed = 7\ns = 0.1")).contains("run.s"));
        assert!(err(MINIMAL.replace("seed = 7", "seed = 7\nsede = 1")).contains("sede"));
        assert!(err(MINIMAL.replace("sigma = [0.0]", "sigma = [0.0]\natoms = [{ y = [0.0], mass = 1.0 }]")).contains("model.atoms[0].y"));
        assert!(err(MINIMAL.replace("schema_version = 1", "schema_version = 2")).contains("schema_version"));
        assert!(err(MINIMAL.replace("\"constant\"", "\"constnat\"")).contains("constnat"));
    }

    #[test]
    fn hash_ignores_layout_and_comments() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let reordered = r#"
# same experiment, different layout
schema_version = 1
[run]
seed = 7
n_paths = 2   # two paths
[model]
sigma = [0.0]
drift = { beta = [0.0], kind = "constant" }
dt = 0.25
horizon = 1.0
dim = 1
[output]
dir = "elsewhere"
"#;
        let b = ExperimentConfig::from_toml(reordered).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = ExperimentConfig::from_toml(&MINIMAL.replace("seed = 7", "seed = 8")).unwrap();
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }
}
