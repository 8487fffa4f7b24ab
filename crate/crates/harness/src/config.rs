//! Experiment description in TOML. Every key is optional; omitted keys take
//! the defaults of the scalar benchmark (`dx = (2x + u) dt + 2 dW`,
//! `φ = x − 1`, `N(x) = −2.5x`, `x0 = 3`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const SEED_ENV: &str = "PROBSAFE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in reports; defaults to the controller kind.
    pub name: Option<String>,
    pub seed: u64,
    pub system: SystemConfig,
    pub barrier: BarrierConfig,
    pub horizon: HorizonConfig,
    pub margin: MarginConfig,
    pub nominal: NominalConfig,
    pub controller: ControllerConfig,
    pub field: FieldConfig,
    pub simulation: SimulationConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            seed: 2024,
            system: SystemConfig::default(),
            barrier: BarrierConfig::default(),
            horizon: HorizonConfig::default(),
            margin: MarginConfig::default(),
            nominal: NominalConfig::default(),
            controller: ControllerConfig::default(),
            field: FieldConfig::default(),
            simulation: SimulationConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

/// `f(x) = A x + c`, `g ≡ B`, `σ ≡ Σ`; matrices as lists of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub a: Vec<Vec<f64>>,
    pub c: Option<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self { a: vec![vec![2.0]], c: None, b: vec![vec![1.0]], sigma: vec![vec![2.0]] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierKind {
    /// `φ(x) = w·x + offset`.
    Affine,
    /// `φ(x) = xᵀ Q x + w·x + offset`.
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarrierConfig {
    pub kind: BarrierKind,
    pub weights: Vec<f64>,
    pub offset: f64,
    pub q: Option<Vec<Vec<f64>>>,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self { kind: BarrierKind::Affine, weights: vec![1.0], offset: -1.0, q: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonModeConfig {
    Fixed,
    Receding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonConfig {
    pub mode: HorizonModeConfig,
    /// `H` in seconds.
    pub length: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self { mode: HorizonModeConfig::Fixed, length: 10.0 }
    }
}

/// `dL = rate dt`, `L_0 = initial`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginConfig {
    pub initial: f64,
    pub rate: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { initial: 0.0, rate: 0.0 }
    }
}

/// `N(x) = −K x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NominalConfig {
    pub gain: Vec<Vec<f64>>,
}

impl Default for NominalConfig {
    fn default() -> Self {
        Self { gain: vec![vec![2.5]] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Nominal,
    /// Probability-space condition on the safe-probability field.
    Proposed,
    Stocbf,
    Prsbc,
    Cvar,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Nominal => "nominal",
            Self::Proposed => "proposed",
            Self::Stocbf => "stocbf",
            Self::Prsbc => "prsbc",
            Self::Cvar => "cvar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Hold the condition with equality at every step.
    WorstCase,
    /// Use the nominal input when it satisfies the condition, otherwise the
    /// equality input.
    Switching,
    /// Minimal `H`-weighted deviation from the nominal input.
    ConstrainedOpt,
    /// `N + κ a` with the minimal restoring κ.
    Additive,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::WorstCase => "worst_case",
            Self::Switching => "switching",
            Self::ConstrainedOpt => "constrained_opt",
            Self::Additive => "additive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub setting: Setting,
    /// Slope of the linear α.
    pub alpha: f64,
    pub epsilon: f64,
    /// StoCBF / PrSBC gain.
    pub eta: f64,
    /// CVaR decay.
    pub gamma: f64,
    /// CVaR level.
    pub beta: f64,
    /// Weight `H` of the deviation cost; identity when omitted.
    pub weight: Option<Vec<Vec<f64>>>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kind: ControllerKind::Proposed,
            setting: Setting::WorstCase,
            alpha: 1.0,
            epsilon: 0.1,
            eta: 1.0,
            gamma: 0.65,
            beta: 0.1,
            weight: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    Cde,
    Mc,
    McSmoothed,
    /// Read from `field.path`.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeConfig {
    Auto,
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AxisConfig {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    pub sweeps: usize,
    pub omega: f64,
    pub max_deviation: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { sweeps: 3, omega: 0.5, max_deviation: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    /// "I", "II", "III" or "IV".
    pub ptype: String,
    pub source: FieldSource,
    pub path: Option<String>,
    /// One entry per state dimension.
    pub x_axes: Vec<AxisConfig>,
    /// Optional margin axis.
    pub margin_axis: Option<AxisConfig>,
    /// Horizon nodes on `[0, t_max]`.
    pub t_nodes: usize,
    /// Defaults to the horizon length.
    pub t_max: Option<f64>,
    pub scheme: SchemeConfig,
    pub max_substep: f64,
    /// Samples per node for Monte Carlo sources.
    pub mc_samples: usize,
    /// Step of Monte Carlo sources; defaults to `simulation.dt`.
    pub mc_dt: Option<f64>,
    pub smoothing: SmoothingConfig,
    /// Gain of the reference controller whose closed loop defines the
    /// field; defaults to the nominal gain.
    pub reference_gain: Option<Vec<Vec<f64>>>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            ptype: "I".into(),
            source: FieldSource::Cde,
            path: None,
            x_axes: vec![AxisConfig::default()],
            margin_axis: None,
            t_nodes: 101,
            t_max: None,
            scheme: SchemeConfig::Auto,
            max_substep: 0.01,
            mc_samples: 10_000,
            mc_dt: None,
            smoothing: SmoothingConfig::default(),
            reference_gain: None,
        }
    }
}

impl Default for AxisConfig {
    fn default() -> Self {
        Self { min: -1.0, max: 7.0, nodes: 321 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub x0: Vec<f64>,
    pub dt: f64,
    pub t_end: f64,
    pub n_trajectories: usize,
    /// Fraction of fallback steps above which the CLI exits with code 3.
    pub max_fallback_rate: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { x0: vec![3.0], dt: 0.1, t_end: 10.0, n_trajectories: 50, max_fallback_rate: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationLoop {
    /// `E[F]` from the field of the nominal (reference) closed loop.
    Nominal,
    /// `E[F]` from a field solved under the controlled closed loop.
    Overall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub closed_loop: EvaluationLoop,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { closed_loop: EvaluationLoop::Nominal }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies the `PROBSAFE_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| HarnessError::Io { context: format!("reading config {}", path.display()), source })?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|e| HarnessError::Config(format!("{SEED_ENV}={v:?}: {e}")))?;
        }
        Ok(())
    }

    /// Every key written out, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.controller.kind.as_str().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let n = self.system.a.len();
        if n == 0 || self.system.a.iter().any(|r| r.len() != n) {
            return bad("system.a must be a non-empty square matrix".into());
        }
        let m = self.system.b.first().map_or(0, Vec::len);
        if self.system.b.len() != n || m == 0 || self.system.b.iter().any(|r| r.len() != m) {
            return bad(format!("system.b must be {n} rows of equal, non-zero length"));
        }
        let w = self.system.sigma.first().map_or(0, Vec::len);
        if self.system.sigma.len() != n || w == 0 || self.system.sigma.iter().any(|r| r.len() != w) {
            return bad(format!("system.sigma must be {n} rows of equal, non-zero length"));
        }
        if self.system.c.as_ref().is_some_and(|c| c.len() != n) {
            return bad(format!("system.c must have {n} entries"));
        }
        if self.barrier.weights.len() != n {
            return bad(format!("barrier.weights must have {n} entries"));
        }
        if self.barrier.kind == BarrierKind::Quadratic
            && !self.barrier.q.as_ref().is_some_and(|q| q.len() == n && q.iter().all(|r| r.len() == n))
        {
            return bad(format!("a quadratic barrier needs an {n}x{n} barrier.q"));
        }
        let gain_ok = |g: &Vec<Vec<f64>>| g.len() == m && g.iter().all(|r| r.len() == n);
        if !gain_ok(&self.nominal.gain) {
            return bad(format!("nominal.gain must be {m}x{n}"));
        }
        if self.field.reference_gain.as_ref().is_some_and(|g| !gain_ok(g)) {
            return bad(format!("field.reference_gain must be {m}x{n}"));
        }
        if let Some(h) = &self.controller.weight {
            if h.len() != m || h.iter().any(|r| r.len() != m) {
                return bad(format!("controller.weight must be {m}x{m}"));
            }
        }
        if !(self.horizon.length > 0.0) {
            return bad("horizon.length must be positive".into());
        }
        let c = &self.controller;
        if !(c.epsilon > 0.0 && c.epsilon < 1.0) {
            return bad(format!("controller.epsilon must lie in (0, 1), got {}", c.epsilon));
        }
        if !(c.alpha > 0.0) {
            return bad("controller.alpha must be positive".into());
        }
        if !(c.eta > 0.0) {
            return bad("controller.eta must be positive".into());
        }
        if !(c.gamma > 0.0 && c.gamma < 1.0) || !(c.beta > 0.0 && c.beta <= 1.0) {
            return bad("controller.gamma must lie in (0, 1) and beta in (0, 1]".into());
        }
        let s = &self.simulation;
        if s.x0.len() != n {
            return bad(format!("simulation.x0 must have {n} entries"));
        }
        if !(s.dt > 0.0) || !(s.t_end >= s.dt) {
            return bad("simulation needs dt > 0 and t_end >= dt".into());
        }
        if s.n_trajectories == 0 {
            return bad("simulation.n_trajectories must be positive".into());
        }
        if self.horizon.mode == HorizonModeConfig::Receding && s.t_end > self.horizon.length + 1e-12 {
            return bad(format!(
                "receding horizon {} s cannot cover simulation.t_end = {} s",
                self.horizon.length, s.t_end
            ));
        }
        let f = &self.field;
        if f.ptype.parse::<probsafe_core::ProbabilityType>().is_err() {
            return bad(format!("field.ptype {:?} is not one of I, II, III, IV", f.ptype));
        }
        if f.x_axes.len() != n {
            return bad(format!("field.x_axes needs {n} entries"));
        }
        if f.source == FieldSource::File && f.path.is_none() {
            return bad("field.source = \"file\" needs field.path".into());
        }
        if f.mc_samples == 0 || f.t_nodes < 3 || !(f.max_substep > 0.0) {
            return bad("field needs mc_samples > 0, t_nodes >= 3 and max_substep > 0".into());
        }
        if self.margin.rate != 0.0 && f.margin_axis.is_none() {
            return bad("a varying margin needs field.margin_axis".into());
        }
        Ok(())
    }
}
