//! Safety filters built on a single affine constraint `aᵀu ≥ b`.
//!
//! The probability-space condition `D_F(z, u) ≥ −α(F(z) − (1 − ε))` and the
//! StoCBF, PrSBC and CVaR baselines all reduce to such a constraint at every
//! state, so the same projection, equality and additive filters serve them
//! all.

use std::sync::Arc;

use crate::cde_field::SafeProbabilityField;
use crate::dynamics::{barrier_lie, dot, AugmentedDynamics, AugmentedState, BarrierSpec, ControlAffineSystem};
use crate::error::{Error, Result};
use crate::normal;

/// Slack at or above `-SLACK_TOL` counts as satisfied.
pub const SLACK_TOL: f64 = 1e-9;

/// `aᵀ H⁻¹ a` at or below this is treated as `a = 0`.
const DEGENERATE: f64 = 1e-24;

/// Deterministic map `(x, L, T) → u`.
pub trait Policy: Send + Sync {
    fn evaluate(&self, z: &AugmentedState) -> StepOutcome;

    fn label(&self) -> String;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub u: Vec<f64>,
    pub condition_satisfied: bool,
    /// The filter could not act (`a = 0`) and emitted the nominal input.
    pub fell_back: bool,
    /// Left minus right side of the active condition at `u`.
    pub slack: f64,
    /// `u` differs from the nominal input.
    pub modified: bool,
}

/// Class-K-like gain in the safety condition.
#[derive(Clone)]
pub enum Alpha {
    /// `α(y) = a·y`.
    Linear(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Alpha {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Alpha::Linear(a) => write!(f, "Linear({a})"),
            Alpha::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl Alpha {
    pub fn eval(&self, y: f64) -> f64 {
        match self {
            Alpha::Linear(a) => a * y,
            Alpha::Custom(f) => f(y),
        }
    }

    /// Checks monotone increase, concavity and `α(0) ≤ 0` on samples in
    /// `[-1, 1]`.
    pub fn validate(&self) -> Result<()> {
        if let Alpha::Linear(a) = self {
            return if *a > 0.0 && a.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("linear alpha needs a positive slope, got {a}")))
            };
        }
        if self.eval(0.0) > 0.0 {
            return Err(Error::invalid("alpha(0) must be <= 0"));
        }
        let ys: Vec<f64> = (0..=80).map(|i| -1.0 + i as f64 * 0.025).collect();
        let vs: Vec<f64> = ys.iter().map(|&y| self.eval(y)).collect();
        if vs.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("alpha must be finite on [-1, 1]"));
        }
        if vs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("alpha must be increasing"));
        }
        let tol = 1e-12;
        if vs.windows(3).any(|w| w[1] < 0.5 * (w[0] + w[2]) - tol) {
            return Err(Error::invalid("alpha must be concave or linear"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SafetyCertParams {
    pub epsilon: f64,
    pub alpha: Alpha,
}

impl Default for SafetyCertParams {
    fn default() -> Self {
        Self { epsilon: 0.1, alpha: Alpha::Linear(1.0) }
    }
}

impl SafetyCertParams {
    pub fn new(epsilon: f64, alpha: Alpha) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::invalid(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        alpha.validate()?;
        Ok(Self { epsilon, alpha })
    }

    /// `1 − ε`.
    pub fn target(&self) -> f64 {
        1.0 - self.epsilon
    }
}

type NominalFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Nominal controller `N(x)`.
#[derive(Clone)]
pub enum NominalController {
    /// `N(x) = −K x` with `K` row-major `m × n`.
    Linear {
        gain: Vec<f64>,
        m: usize,
        n: usize,
    },
    Custom {
        label: String,
        f: NominalFn,
    },
}

impl std::fmt::Debug for NominalController {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Linear { gain, m, n } => write!(f, "Linear {{ gain: {gain:?}, m: {m}, n: {n} }}"),
            Self::Custom { label, .. } => write!(f, "Custom({label})"),
        }
    }
}

impl NominalController {
    pub fn scalar_gain(k: f64) -> Self {
        Self::Linear { gain: vec![k], m: 1, n: 1 }
    }

    pub fn linear(gain: Vec<f64>, m: usize, n: usize) -> Result<Self> {
        if gain.len() != m * n {
            return Err(Error::dim(format!("gain has {} entries, expected {m}x{n}", gain.len())));
        }
        Ok(Self::Linear { gain, m, n })
    }

    pub fn from_fn(label: impl Into<String>, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self::Custom { label: label.into(), f: Arc::new(f) }
    }

    pub fn control(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Linear { gain, m, n } => (0..*m).map(|i| -dot(&gain[i * n..(i + 1) * n], x)).collect(),
            Self::Custom { f, .. } => f(x),
        }
    }
}

impl Policy for NominalController {
    fn evaluate(&self, z: &AugmentedState) -> StepOutcome {
        StepOutcome {
            u: self.control(&z.x),
            condition_satisfied: true,
            fell_back: false,
            slack: f64::INFINITY,
            modified: false,
        }
    }

    fn label(&self) -> String {
        "nominal".into()
    }
}

/// `N(x)`.
pub fn nominal(controller: &NominalController, x: &[f64]) -> Vec<f64> {
    controller.control(x)
}

/// `aᵀ u ≥ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    pub a: Vec<f64>,
    pub b: f64,
}

impl AffineConstraint {
    pub fn slack(&self, u: &[f64]) -> f64 {
        dot(&self.a, u) - self.b
    }

    pub fn holds(&self, u: &[f64]) -> bool {
        self.slack(u) >= -SLACK_TOL
    }
}

/// A state-dependent constraint on the input.
pub trait SafetyCondition: Send + Sync {
    fn constraint(&self, z: &AugmentedState) -> AffineConstraint;

    fn label(&self) -> &'static str;
}

/// `D_F(z, u) ≥ −α(F(z) − (1 − ε))`, i.e. `a = L_g̃F` and
/// `b = −α(F − (1 − ε)) − L_f̃F − ½ tr(σ̃σ̃ᵀ Hess F)`.
#[derive(Clone)]
pub struct ProbabilitySpaceCondition {
    pub field: Arc<SafeProbabilityField>,
    pub dynamics: AugmentedDynamics,
    pub params: SafetyCertParams,
}

impl SafetyCondition for ProbabilitySpaceCondition {
    fn constraint(&self, z: &AugmentedState) -> AffineConstraint {
        let parts = self.field.generator_parts(&self.dynamics, z);
        let b = -self.params.alpha.eval(parts.value - self.params.target()) - parts.drift - parts.half_trace;
        AffineConstraint { a: parts.lg, b }
    }

    fn label(&self) -> &'static str {
        "proposed"
    }
}

/// StoCBF: `L_fφ + L_gφ u + ½ tr(σσᵀ Hess φ) ≥ −η φ`.
#[derive(Clone)]
pub struct StoCbfCondition {
    pub system: Arc<dyn ControlAffineSystem>,
    pub barrier: BarrierSpec,
    pub eta: f64,
}

impl SafetyCondition for StoCbfCondition {
    fn constraint(&self, z: &AugmentedState) -> AffineConstraint {
        let lie = barrier_lie(self.system.as_ref(), &self.barrier, &z.x);
        AffineConstraint { a: lie.lg.clone(), b: -self.eta * lie.phi - lie.f_phi() }
    }

    fn label(&self) -> &'static str {
        "stocbf"
    }
}

/// PrSBC under a one-step Gaussian model: the StoCBF condition tightened by
/// `q_{1−ε} ‖L_σφ‖ / √dt`.
#[derive(Clone)]
pub struct PrSbcCondition {
    pub system: Arc<dyn ControlAffineSystem>,
    pub barrier: BarrierSpec,
    pub eta: f64,
    pub epsilon: f64,
    pub dt: f64,
}

impl SafetyCondition for PrSbcCondition {
    fn constraint(&self, z: &AugmentedState) -> AffineConstraint {
        let lie = barrier_lie(self.system.as_ref(), &self.barrier, &z.x);
        let margin = normal::quantile(1.0 - self.epsilon) * lie.lsigma_norm() / self.dt.sqrt();
        AffineConstraint { a: lie.lg.clone(), b: -self.eta * lie.phi - lie.f_phi() + margin }
    }

    fn label(&self) -> &'static str {
        "prsbc"
    }
}

/// Lower-tail CVaR of `N(mean, std²)` at level β: the mean of the worst
/// `β` fraction of outcomes. `β = 1` gives the mean.
pub fn gaussian_lower_cvar(mean: f64, std: f64, beta: f64) -> f64 {
    mean - std * cvar_tail_factor(beta)
}

/// `pdf(q_β) / β`.
fn cvar_tail_factor(beta: f64) -> f64 {
    if beta >= 1.0 {
        0.0
    } else {
        normal::pdf(normal::quantile(beta)) / beta
    }
}

/// CVaR barrier over one step: with
/// `φ(X_{k+1}) ≈ N(φ + (L_fφ + L_gφ u + ½tr) dt, ‖L_σφ‖² dt)`, require
/// `CVaR_β(φ(X_{k+1})) ≥ γ φ(X_k)`.
#[derive(Clone)]
pub struct CvarCondition {
    pub system: Arc<dyn ControlAffineSystem>,
    pub barrier: BarrierSpec,
    pub gamma: f64,
    pub beta: f64,
    pub dt: f64,
}

impl SafetyCondition for CvarCondition {
    fn constraint(&self, z: &AugmentedState) -> AffineConstraint {
        let lie = barrier_lie(self.system.as_ref(), &self.barrier, &z.x);
        let spread = lie.lsigma_norm() * self.dt.sqrt();
        AffineConstraint {
            a: lie.lg.iter().map(|v| v * self.dt).collect(),
            b: self.gamma * lie.phi - lie.phi - lie.f_phi() * self.dt + spread * cvar_tail_factor(self.beta),
        }
    }

    fn label(&self) -> &'static str {
        "cvar"
    }
}

/// Positive definite weight `H` of `J(N, u) = (u − N)ᵀ H (u − N)`, kept as
/// its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Weight {
    m: usize,
    chol: Vec<f64>,
}

impl Weight {
    pub fn identity(m: usize) -> Self {
        let mut chol = vec![0.0; m * m];
        for i in 0..m {
            chol[i * m + i] = 1.0;
        }
        Self { m, chol }
    }

    /// `h` row-major `m × m`, symmetric positive definite.
    pub fn new(h: &[f64], m: usize) -> Result<Self> {
        if h.len() != m * m {
            return Err(Error::dim(format!("weight has {} entries, expected {m}x{m}", h.len())));
        }
        let mut l = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..=i {
                if (h[i * m + j] - h[j * m + i]).abs() > 1e-12 * h[i * m + j].abs().max(1.0) {
                    return Err(Error::invalid("weight must be symmetric"));
                }
                let s: f64 = h[i * m + j] - (0..j).map(|k| l[i * m + k] * l[j * m + k]).sum::<f64>();
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::invalid("weight must be positive definite"));
                    }
                    l[i * m + i] = s.sqrt();
                } else {
                    l[i * m + j] = s / l[j * m + j];
                }
            }
        }
        Ok(Self { m, chol: l })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    /// `H⁻¹ a`.
    pub fn solve(&self, a: &[f64]) -> Vec<f64> {
        let m = self.m;
        let l = &self.chol;
        let mut y = vec![0.0; m];
        for i in 0..m {
            y[i] = (a[i] - (0..i).map(|k| l[i * m + k] * y[k]).sum::<f64>()) / l[i * m + i];
        }
        let mut x = vec![0.0; m];
        for i in (0..m).rev() {
            x[i] = (y[i] - (i + 1..m).map(|k| l[k * m + i] * x[k]).sum::<f64>()) / l[i * m + i];
        }
        x
    }
}

/// How a [`SafePolicy`] turns the constraint into an input.
/// State-dependent gain of the additive filter.
pub type KappaFn = Arc<dyn Fn(&AugmentedState) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum FilterMode {
    /// `argmin (u − N)ᵀ H (u − N)` s.t. `aᵀu ≥ b`.
    MinimalDeviation,
    /// `aᵀu = b` at every step, reached with the smallest `H`-weighted move.
    Equality,
    /// `u = N + κ(z) a`. Without a custom κ the smallest non-negative gain
    /// that restores the constraint is used.
    Additive { kappa: Option<KappaFn> },
}

impl std::fmt::Debug for FilterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::MinimalDeviation => f.write_str("MinimalDeviation"),
            Self::Equality => f.write_str("Equality"),
            Self::Additive { kappa } => write!(f, "Additive {{ custom_kappa: {} }}", kappa.is_some()),
        }
    }
}

/// Applies `mode` to the constraint `c` around the nominal input `u_n`.
/// `kappa` overrides the additive gain.
pub fn apply_filter(
    c: &AffineConstraint,
    u_n: &[f64],
    mode: &FilterMode,
    weight: &Weight,
    kappa: Option<f64>,
) -> StepOutcome {
    let s_n = c.slack(u_n);
    let hinv_a = weight.solve(&c.a);
    let curvature = dot(&c.a, &hinv_a);
    let degenerate = !(curvature > DEGENERATE);
    let outcome = |u: Vec<f64>, fell_back: bool| {
        let slack = c.slack(&u);
        let modified = u != u_n;
        StepOutcome { u, condition_satisfied: slack >= -SLACK_TOL, fell_back, slack, modified }
    };
    let shifted = |step: f64, dir: &[f64]| -> Vec<f64> { u_n.iter().zip(dir).map(|(u, d)| u + step * d).collect() };
    match mode {
        FilterMode::MinimalDeviation => {
            if s_n >= -SLACK_TOL {
                outcome(u_n.to_vec(), false)
            } else if degenerate {
                outcome(u_n.to_vec(), true)
            } else {
                outcome(shifted(-s_n / curvature, &hinv_a), false)
            }
        }
        FilterMode::Equality => {
            if degenerate {
                outcome(u_n.to_vec(), true)
            } else if s_n == 0.0 {
                outcome(u_n.to_vec(), false)
            } else {
                outcome(shifted(-s_n / curvature, &hinv_a), false)
            }
        }
        FilterMode::Additive { .. } => {
            let norm2 = dot(&c.a, &c.a);
            let k = match kappa {
                Some(k) => k.max(0.0),
                None if norm2 > DEGENERATE => (-s_n).max(0.0) / norm2,
                None => 0.0,
            };
            let fell_back = s_n < -SLACK_TOL && !(norm2 > DEGENERATE);
            if k == 0.0 {
                outcome(u_n.to_vec(), fell_back)
            } else {
                outcome(shifted(k, &c.a), fell_back)
            }
        }
    }
}

/// Nominal controller filtered through a safety condition.
#[derive(Clone)]
pub struct SafePolicy {
    pub nominal: NominalController,
    pub condition: Arc<dyn SafetyCondition>,
    pub mode: FilterMode,
    pub weight: Weight,
}

impl SafePolicy {
    pub fn new(nominal: NominalController, condition: Arc<dyn SafetyCondition>, mode: FilterMode, m: usize) -> Self {
        Self { nominal, condition, mode, weight: Weight::identity(m) }
    }

    pub fn with_weight(mut self, weight: Weight) -> Self {
        self.weight = weight;
        self
    }

    /// Slack of the condition at `u`.
    pub fn check(&self, z: &AugmentedState, u: &[f64]) -> (bool, f64) {
        let s = self.condition.constraint(z).slack(u);
        (s >= -SLACK_TOL, s)
    }

    pub fn switching(self) -> Switching {
        Switching { inner: self }
    }
}

impl Policy for SafePolicy {
    fn evaluate(&self, z: &AugmentedState) -> StepOutcome {
        let u_n = self.nominal.control(&z.x);
        let c = self.condition.constraint(z);
        let kappa = match &self.mode {
            FilterMode::Additive { kappa: Some(k) } => Some(k(z)),
            _ => None,
        };
        apply_filter(&c, &u_n, &self.mode, &self.weight, kappa)
    }

    fn label(&self) -> String {
        let mode = match self.mode {
            FilterMode::MinimalDeviation => "min_deviation",
            FilterMode::Equality => "equality",
            FilterMode::Additive { .. } => "additive",
        };
        format!("{}/{mode}", self.condition.label())
    }
}

/// Uses `N(x)` whenever it satisfies the inner policy's condition and the
/// inner policy's output otherwise.
#[derive(Clone)]
pub struct Switching {
    pub inner: SafePolicy,
}

impl Policy for Switching {
    fn evaluate(&self, z: &AugmentedState) -> StepOutcome {
        let u_n = self.inner.nominal.control(&z.x);
        let c = self.inner.condition.constraint(z);
        let s = c.slack(&u_n);
        if s >= -SLACK_TOL {
            return StepOutcome { u: u_n, condition_satisfied: true, fell_back: false, slack: s, modified: false };
        }
        self.inner.evaluate(z)
    }

    fn label(&self) -> String {
        format!("switching({})", self.inner.label())
    }
}

/// `(D_F(z, u) ≥ −α(F − (1 − ε)), D_F + α(F − (1 − ε)))`.
pub fn check_safety_condition(
    field: &SafeProbabilityField,
    dynamics: &AugmentedDynamics,
    params: &SafetyCertParams,
    z: &AugmentedState,
    u: &[f64],
) -> (bool, f64) {
    let parts = field.generator_parts(dynamics, z);
    let slack = parts.generator(u) + params.alpha.eval(parts.value - params.target());
    (slack >= -SLACK_TOL, slack)
}

fn probability_condition(
    field: &Arc<SafeProbabilityField>,
    dynamics: &AugmentedDynamics,
    params: &SafetyCertParams,
) -> ProbabilitySpaceCondition {
    ProbabilitySpaceCondition { field: field.clone(), dynamics: dynamics.clone(), params: params.clone() }
}

/// `N(x) + κ(z) (L_g̃F)ᵀ`; `kappa = None` selects the minimal restoring gain.
pub fn additive_policy(
    nominal: &NominalController,
    field: &Arc<SafeProbabilityField>,
    dynamics: &AugmentedDynamics,
    params: &SafetyCertParams,
    kappa: Option<f64>,
    z: &AugmentedState,
) -> StepOutcome {
    let c = probability_condition(field, dynamics, params).constraint(z);
    let m = c.a.len();
    apply_filter(&c, &nominal.control(&z.x), &FilterMode::Additive { kappa: None }, &Weight::identity(m), kappa)
}

/// Minimal `H`-weighted deviation from `N(x)` subject to the condition.
pub fn constrained_opt_policy(
    nominal: &NominalController,
    field: &Arc<SafeProbabilityField>,
    dynamics: &AugmentedDynamics,
    params: &SafetyCertParams,
    weight: &Weight,
    z: &AugmentedState,
) -> StepOutcome {
    let c = probability_condition(field, dynamics, params).constraint(z);
    apply_filter(&c, &nominal.control(&z.x), &FilterMode::MinimalDeviation, weight, None)
}

/// Holds `D_F(z, u) = −α(F − (1 − ε))`.
pub fn worst_case_equality_policy(
    nominal: &NominalController,
    field: &Arc<SafeProbabilityField>,
    dynamics: &AugmentedDynamics,
    params: &SafetyCertParams,
    z: &AugmentedState,
) -> StepOutcome {
    let c = probability_condition(field, dynamics, params).constraint(z);
    let m = c.a.len();
    apply_filter(&c, &nominal.control(&z.x), &FilterMode::Equality, &Weight::identity(m), None)
}

fn state_only(x: &[f64]) -> AugmentedState {
    AugmentedState { horizon: 0.0, margin: 0.0, phi: 0.0, x: x.to_vec() }
}

pub fn stocbf_policy(
    system: &Arc<dyn ControlAffineSystem>,
    barrier: &BarrierSpec,
    eta: f64,
    x: &[f64],
    u_n: &[f64],
) -> StepOutcome {
    let c = StoCbfCondition { system: system.clone(), barrier: barrier.clone(), eta }.constraint(&state_only(x));
    apply_filter(&c, u_n, &FilterMode::MinimalDeviation, &Weight::identity(u_n.len()), None)
}

#[allow(clippy::too_many_arguments)]
pub fn prsbc_policy(
    system: &Arc<dyn ControlAffineSystem>,
    barrier: &BarrierSpec,
    eta: f64,
    epsilon: f64,
    dt: f64,
    x: &[f64],
    u_n: &[f64],
) -> StepOutcome {
    let cond = PrSbcCondition { system: system.clone(), barrier: barrier.clone(), eta, epsilon, dt };
    let c = cond.constraint(&state_only(x));
    apply_filter(&c, u_n, &FilterMode::MinimalDeviation, &Weight::identity(u_n.len()), None)
}

#[allow(clippy::too_many_arguments)]
pub fn cvar_policy(
    system: &Arc<dyn ControlAffineSystem>,
    barrier: &BarrierSpec,
    gamma: f64,
    beta: f64,
    dt: f64,
    x: &[f64],
    u_n: &[f64],
) -> StepOutcome {
    let cond = CvarCondition { system: system.clone(), barrier: barrier.clone(), gamma, beta, dt };
    let c = cond.constraint(&state_only(x));
    apply_filter(&c, u_n, &FilterMode::MinimalDeviation, &Weight::identity(u_n.len()), None)
}

pub fn switching_policy(inner: &SafePolicy, z: &AugmentedState) -> StepOutcome {
    Switching { inner: inner.clone() }.evaluate(z)
}
