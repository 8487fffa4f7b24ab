//! Control-affine SDE plants, barrier functions, the augmented state
//! `Z = (T, L, φ(x), x)` and seeded Euler–Maruyama simulation.

use std::ops::ControlFlow;
use std::sync::Arc;

use crate::controllers::{Policy, StepOutcome};
use crate::error::{Error, Result};
use crate::rng::{NoiseStream, PathNoise};

/// `dX = (f(X) + g(X) U) dt + σ(X) dW`.
///
/// Matrices are written row-major into caller-provided buffers so the inner
/// simulation loop never allocates.
pub trait ControlAffineSystem: Send + Sync {
    fn dim_state(&self) -> usize;
    fn dim_input(&self) -> usize;
    fn dim_noise(&self) -> usize;

    fn drift(&self, x: &[f64], out: &mut [f64]);

    /// `n × m`, row-major.
    fn input_matrix(&self, x: &[f64], out: &mut [f64]);

    /// `n × ω`, row-major.
    fn diffusion(&self, x: &[f64], out: &mut [f64]);

    /// True when σ does not depend on the state (then ∇·(σσᵀ) = 0).
    fn has_constant_diffusion(&self) -> bool {
        false
    }
}

/// Linear drift with constant input and noise matrices:
/// `f(x) = A x + c`, `g ≡ B`, `σ ≡ Σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    n: usize,
    m: usize,
    w: usize,
    a: Vec<f64>,
    c: Vec<f64>,
    b: Vec<f64>,
    sigma: Vec<f64>,
}

impl LinearSystem {
    /// `a` is `n × n`, `b` is `n × m`, `sigma` is `n × ω`, all row-major.
    pub fn new(n: usize, a: Vec<f64>, c: Vec<f64>, b: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::dim("state dimension must be positive"));
        }
        if a.len() != n * n || c.len() != n {
            return Err(Error::dim(format!("drift needs A: {n}x{n} and c: {n}")));
        }
        if b.is_empty() || !b.len().is_multiple_of(n) {
            return Err(Error::dim(format!("input matrix length {} is not a multiple of n = {n}", b.len())));
        }
        if sigma.is_empty() || !sigma.len().is_multiple_of(n) {
            return Err(Error::dim(format!("diffusion length {} is not a multiple of n = {n}", sigma.len())));
        }
        let all = a.iter().chain(&c).chain(&b).chain(&sigma);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("system coefficients must be finite"));
        }
        let m = b.len() / n;
        let w = sigma.len() / n;
        Ok(Self { n, m, w, a, c, b, sigma })
    }

    /// Scalar plant `dx = (a x + b u) dt + σ dW`.
    pub fn scalar(a: f64, b: f64, sigma: f64) -> Self {
        Self::new(1, vec![a], vec![0.0], vec![b], vec![sigma]).expect("scalar system is well formed")
    }

    pub fn drift_matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn drift_offset(&self) -> &[f64] {
        &self.c
    }

    pub fn input(&self) -> &[f64] {
        &self.b
    }

    pub fn noise(&self) -> &[f64] {
        &self.sigma
    }
}

impl ControlAffineSystem for LinearSystem {
    fn dim_state(&self) -> usize {
        self.n
    }

    fn dim_input(&self) -> usize {
        self.m
    }

    fn dim_noise(&self) -> usize {
        self.w
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        mat_vec(&self.a, self.n, self.n, x, out);
        for (o, c) in out.iter_mut().zip(&self.c) {
            *o += c;
        }
    }

    fn input_matrix(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b);
    }

    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.sigma);
    }

    fn has_constant_diffusion(&self) -> bool {
        true
    }
}

type FieldFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A plant defined by arbitrary closures.
#[derive(Clone)]
pub struct FnSystem {
    n: usize,
    m: usize,
    w: usize,
    drift: FieldFn,
    input: FieldFn,
    diffusion: FieldFn,
    constant_diffusion: bool,
}

impl FnSystem {
    pub fn new(
        (n, m, w): (usize, usize, usize),
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        input: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if n == 0 || m == 0 || w == 0 {
            return Err(Error::dim("dimensions must be positive"));
        }
        Ok(Self {
            n,
            m,
            w,
            drift: Arc::new(drift),
            input: Arc::new(input),
            diffusion: Arc::new(diffusion),
            constant_diffusion: false,
        })
    }

    /// Declares σ state-independent so the CDE solver can skip ∇·S.
    pub fn with_constant_diffusion(mut self) -> Self {
        self.constant_diffusion = true;
        self
    }
}

impl ControlAffineSystem for FnSystem {
    fn dim_state(&self) -> usize {
        self.n
    }

    fn dim_input(&self) -> usize {
        self.m
    }

    fn dim_noise(&self) -> usize {
        self.w
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    fn input_matrix(&self, x: &[f64], out: &mut [f64]) {
        (self.input)(x, out)
    }

    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    fn has_constant_diffusion(&self) -> bool {
        self.constant_diffusion
    }
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Barrier function φ with analytic gradient and Hessian. The safe set with
/// margin `L` is `C(L) = {x : φ(x) ≥ L}`.
#[derive(Clone)]
pub struct BarrierSpec {
    dim: usize,
    phi: ScalarFn,
    grad: FieldFn,
    hess: FieldFn,
    affine: bool,
}

impl std::fmt::Debug for BarrierSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BarrierSpec").field("dim", &self.dim).field("affine", &self.affine).finish_non_exhaustive()
    }
}

impl BarrierSpec {
    /// `φ(x) = w·x + c`.
    pub fn affine(weights: Vec<f64>, offset: f64) -> Self {
        let dim = weights.len();
        let w = Arc::new(weights);
        let (wp, wg) = (w.clone(), w);
        Self {
            dim,
            phi: Arc::new(move |x| dot(&wp, x) + offset),
            grad: Arc::new(move |_x, out| out.copy_from_slice(&wg)),
            hess: Arc::new(|_x, out| out.fill(0.0)),
            affine: true,
        }
    }

    /// `φ(x) = xᵀ Q x + w·x + c` with `Q` row-major `n × n`.
    pub fn quadratic(q: Vec<f64>, weights: Vec<f64>, offset: f64) -> Result<Self> {
        let n = weights.len();
        if q.len() != n * n {
            return Err(Error::dim(format!("Q must be {n}x{n}")));
        }
        // Hessian Q + Qᵀ.
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = q[i * n + j] + q[j * n + i];
            }
        }
        let q = Arc::new(q);
        let sym = Arc::new(sym);
        let w = Arc::new(weights);
        let (qp, wp) = (q.clone(), w.clone());
        let (sg, wg) = (sym.clone(), w);
        Ok(Self {
            dim: n,
            phi: Arc::new(move |x| {
                let mut acc = dot(&wp, x) + offset;
                for i in 0..n {
                    acc += x[i] * dot(&qp[i * n..(i + 1) * n], x);
                }
                acc
            }),
            grad: Arc::new(move |x, out| {
                mat_vec(&sg, n, n, x, out);
                for (o, wi) in out.iter_mut().zip(wg.iter()) {
                    *o += wi;
                }
            }),
            hess: Arc::new(move |_x, out| out.copy_from_slice(&sym)),
            affine: false,
        })
    }

    /// General barrier; the supplied derivatives are checked against central
    /// differences of `phi` at `samples` before the spec is returned.
    pub fn from_fns(
        dim: usize,
        phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        hess: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        samples: &[Vec<f64>],
    ) -> Result<Self> {
        let spec = Self { dim, phi: Arc::new(phi), grad: Arc::new(grad), hess: Arc::new(hess), affine: false };
        spec.verify(samples, 1e-5)?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_affine(&self) -> bool {
        self.affine
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.phi)(x)
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.grad)(x, out)
    }

    pub fn hessian(&self, x: &[f64], out: &mut [f64]) {
        (self.hess)(x, out)
    }

    /// Compares the analytic gradient and Hessian with central differences.
    /// Errors are measured relative to `max(1, |analytic|)`.
    pub fn verify(&self, samples: &[Vec<f64>], rel_tol: f64) -> Result<()> {
        let n = self.dim;
        let mut g = vec![0.0; n];
        let mut hm = vec![0.0; n * n];
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        for x in samples {
            if x.len() != n {
                return Err(Error::dim(format!("sample of length {} for barrier of dim {n}", x.len())));
            }
            self.gradient(x, &mut g);
            self.hessian(x, &mut hm);
            let mut xp = x.clone();
            for i in 0..n {
                let h = 1e-5 * x[i].abs().max(1.0);
                xp[i] = x[i] + h;
                let fp = self.value(&xp);
                self.gradient(&xp, &mut gp);
                xp[i] = x[i] - h;
                let fm = self.value(&xp);
                self.gradient(&xp, &mut gm);
                xp[i] = x[i];
                let fd = (fp - fm) / (2.0 * h);
                if (fd - g[i]).abs() > rel_tol * g[i].abs().max(1.0) {
                    return Err(Error::BarrierCheck(format!(
                        "d phi / dx{i} at {x:?}: analytic {} vs finite difference {fd}",
                        g[i]
                    )));
                }
                for j in 0..n {
                    let fd = (gp[j] - gm[j]) / (2.0 * h);
                    let an = hm[j * n + i];
                    if (fd - an).abs() > rel_tol * an.abs().max(1.0) {
                        return Err(Error::BarrierCheck(format!(
                            "Hessian ({j},{i}) at {x:?}: analytic {an} vs finite difference {fd}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HorizonMode {
    Fixed,
    Receding,
}

/// Outlook horizon `T_t`: `H` (fixed) or `H − t` (receding).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonSpec {
    pub mode: HorizonMode,
    pub length: f64,
}

impl HorizonSpec {
    pub fn fixed(length: f64) -> Self {
        Self { mode: HorizonMode::Fixed, length }
    }

    pub fn receding(length: f64) -> Self {
        Self { mode: HorizonMode::Receding, length }
    }

    /// `f_T`: 0 for a fixed horizon, −1 for a receding one.
    pub fn rate(&self) -> f64 {
        match self.mode {
            HorizonMode::Fixed => 0.0,
            HorizonMode::Receding => -1.0,
        }
    }

    /// Horizon seen at elapsed time `t` by a path that started with remaining
    /// horizon `start`.
    pub fn remaining_from(&self, start: f64, t: f64) -> f64 {
        match self.mode {
            HorizonMode::Fixed => self.length,
            HorizonMode::Receding => (start - t).max(0.0),
        }
    }

    pub fn remaining(&self, t: f64) -> f64 {
        self.remaining_from(self.length, t)
    }
}

/// Safety margin `dL = f_ℓ(L) dt`, `L_0 = ℓ`.
#[derive(Clone)]
pub struct MarginSpec {
    pub initial: f64,
    rate: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl std::fmt::Debug for MarginSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MarginSpec").field("initial", &self.initial).field("fixed", &self.is_fixed()).finish()
    }
}

impl MarginSpec {
    /// `f_ℓ ≡ 0`.
    pub fn fixed(level: f64) -> Self {
        Self { initial: level, rate: None }
    }

    pub fn varying(initial: f64, rate: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { initial, rate: Some(Arc::new(rate)) }
    }

    pub fn is_fixed(&self) -> bool {
        self.rate.is_none()
    }

    pub fn rate(&self, l: f64) -> f64 {
        self.rate.as_ref().map_or(0.0, |f| f(l))
    }

    pub fn advance(&self, l: f64, dt: f64) -> f64 {
        l + self.rate(l) * dt
    }
}

/// `Z = (T, L, φ(x), x) ∈ R^{n+3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub horizon: f64,
    pub margin: f64,
    pub phi: f64,
    pub x: Vec<f64>,
}

impl AugmentedState {
    pub fn new(barrier: &BarrierSpec, horizon: f64, margin: f64, x: Vec<f64>) -> Self {
        let phi = barrier.value(&x);
        Self { horizon, margin, phi, x }
    }

    pub fn dim(&self) -> usize {
        self.x.len() + 3
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend([self.horizon, self.margin, self.phi]);
        v.extend_from_slice(&self.x);
        v
    }

    pub fn is_safe(&self) -> bool {
        self.phi >= self.margin
    }
}

/// Per-step controller bookkeeping kept alongside a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub condition_satisfied: bool,
    pub fell_back: bool,
    pub modified: bool,
    pub slack: f64,
}

impl From<&StepOutcome> for StepRecord {
    fn from(o: &StepOutcome) -> Self {
        Self {
            condition_satisfied: o.condition_satisfied,
            fell_back: o.fell_back,
            modified: o.modified,
            slack: o.slack,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// `L_t` at each sampled time.
    pub margins: Vec<f64>,
    /// `T_t` at each sampled time.
    pub horizons: Vec<f64>,
    pub records: Vec<StepRecord>,
    pub seed: u64,
    pub path: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn augmented(&self, k: usize, barrier: &BarrierSpec) -> AugmentedState {
        AugmentedState::new(barrier, self.horizons[k], self.margins[k], self.states[k].clone())
    }

    pub fn fallback_count(&self) -> usize {
        self.records.iter().filter(|r| r.fell_back).count()
    }
}

/// Plant, policy and barrier with horizon/margin conventions: everything
/// needed to roll a path forward.
#[derive(Clone)]
pub struct ClosedLoop {
    pub system: Arc<dyn ControlAffineSystem>,
    pub policy: Arc<dyn Policy>,
    pub barrier: BarrierSpec,
    pub horizon: HorizonSpec,
    pub margin: MarginSpec,
}

impl ClosedLoop {
    pub fn new(
        system: Arc<dyn ControlAffineSystem>,
        policy: Arc<dyn Policy>,
        barrier: BarrierSpec,
        horizon: HorizonSpec,
        margin: MarginSpec,
    ) -> Result<Self> {
        if barrier.dim() != system.dim_state() {
            return Err(Error::dim(format!("barrier dim {} != state dim {}", barrier.dim(), system.dim_state())));
        }
        if !(horizon.length > 0.0) {
            return Err(Error::invalid("horizon length must be positive"));
        }
        Ok(Self { system, policy, barrier, horizon, margin })
    }

    pub fn with_policy(&self, policy: Arc<dyn Policy>) -> Self {
        Self { policy, ..self.clone() }
    }

    pub fn augmented_dynamics(&self) -> AugmentedDynamics {
        AugmentedDynamics {
            system: self.system.clone(),
            barrier: self.barrier.clone(),
            horizon: self.horizon,
            margin: self.margin.clone(),
        }
    }

    /// Rolls one path for `steps` steps, calling `visit(k, z_k, outcome_k)` at
    /// every sampled time; `outcome_k` is `None` at the final time. The visitor
    /// may stop the path early.
    pub(crate) fn roll<F>(
        &self,
        start: &PathStart,
        dt: f64,
        steps: usize,
        noise: &mut PathNoise,
        mut visit: F,
    ) -> Result<()>
    where
        F: FnMut(usize, &AugmentedState, Option<&StepOutcome>) -> ControlFlow<()>,
    {
        let sys = self.system.as_ref();
        let mut ws = StepWorkspace::new(sys);
        let mut z = AugmentedState::new(&self.barrier, start.horizon, start.margin, start.x.clone());
        let mut next = vec![0.0; z.x.len()];
        for k in 0..=steps {
            let t = k as f64 * dt;
            z.horizon = self.horizon.remaining_from(start.horizon, t);
            if k == steps {
                let _ = visit(k, &z, None);
                break;
            }
            let outcome = self.policy.evaluate(&z);
            if visit(k, &z, Some(&outcome)).is_break() {
                break;
            }
            noise.increment(k as u64, dt, &mut ws.dw);
            em_step_into(sys, &z.x, &outcome.u, dt, &mut ws, &mut next);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationBlowup { t: t + dt, state: next });
            }
            std::mem::swap(&mut z.x, &mut next);
            z.margin = self.margin.advance(z.margin, dt);
            z.phi = self.barrier.value(&z.x);
        }
        Ok(())
    }
}

/// Initial condition of a rolled path.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PathStart {
    pub x: Vec<f64>,
    pub margin: f64,
    pub horizon: f64,
}

pub(crate) struct StepWorkspace {
    f: Vec<f64>,
    g: Vec<f64>,
    s: Vec<f64>,
    pub dw: Vec<f64>,
}

impl StepWorkspace {
    pub fn new(sys: &dyn ControlAffineSystem) -> Self {
        let (n, m, w) = (sys.dim_state(), sys.dim_input(), sys.dim_noise());
        Self { f: vec![0.0; n], g: vec![0.0; n * m], s: vec![0.0; n * w], dw: vec![0.0; w] }
    }
}

fn em_step_into(sys: &dyn ControlAffineSystem, x: &[f64], u: &[f64], dt: f64, ws: &mut StepWorkspace, out: &mut [f64]) {
    let (n, m, w) = (sys.dim_state(), sys.dim_input(), sys.dim_noise());
    sys.drift(x, &mut ws.f);
    sys.input_matrix(x, &mut ws.g);
    sys.diffusion(x, &mut ws.s);
    for i in 0..n {
        let gu = dot(&ws.g[i * m..(i + 1) * m], u);
        let sdw = dot(&ws.s[i * w..(i + 1) * w], &ws.dw);
        out[i] = x[i] + (ws.f[i] + gu) * dt + sdw;
    }
}

/// One Euler–Maruyama step `x + (f(x) + g(x)u) dt + σ(x) dW`.
pub fn euler_maruyama_step(
    sys: &dyn ControlAffineSystem,
    x: &[f64],
    u: &[f64],
    dt: f64,
    dw: &[f64],
) -> Result<Vec<f64>> {
    let (n, m, w) = (sys.dim_state(), sys.dim_input(), sys.dim_noise());
    if x.len() != n || u.len() != m || dw.len() != w {
        return Err(Error::dim(format!(
            "expected x: {n}, u: {m}, dW: {w}; got {}, {}, {}",
            x.len(),
            u.len(),
            dw.len()
        )));
    }
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be finite and non-negative, got {dt}")));
    }
    let mut ws = StepWorkspace::new(sys);
    ws.dw.copy_from_slice(dw);
    let mut out = vec![0.0; n];
    em_step_into(sys, x, u, dt, &mut ws, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationBlowup { t: dt, state: out });
    }
    Ok(out)
}

/// Number of `dt` steps covering `[0, t_end]`.
pub fn step_count(t_end: f64, dt: f64) -> usize {
    // Guard against 0.3 / 0.1 = 2.9999999999999996.
    let r = t_end / dt;
    let nearest = r.round();
    if (r - nearest).abs() < 1e-9 * nearest.max(1.0) {
        nearest as usize
    } else {
        r.ceil() as usize
    }
}

/// Simulates path 0 of the noise family keyed by `seed`.
pub fn simulate(cl: &ClosedLoop, x0: &[f64], dt: f64, t_end: f64, seed: u64) -> Result<Trajectory> {
    simulate_path(cl, x0, dt, t_end, seed, 0)
}

/// Simulates path `path` of the noise family keyed by `seed`. Equal inputs
/// give bit-identical trajectories regardless of which thread runs them.
pub fn simulate_path(cl: &ClosedLoop, x0: &[f64], dt: f64, t_end: f64, seed: u64, path: u64) -> Result<Trajectory> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if !(t_end >= dt) {
        return Err(Error::invalid(format!("t_end = {t_end} must be at least dt = {dt}")));
    }
    if x0.len() != cl.system.dim_state() {
        return Err(Error::dim(format!("x0 has length {}, state dim {}", x0.len(), cl.system.dim_state())));
    }
    if cl.horizon.mode == HorizonMode::Receding && t_end > cl.horizon.length + 1e-12 {
        return Err(Error::HorizonExceeded { horizon: cl.horizon.length, t_end });
    }
    let steps = step_count(t_end, dt);
    let mut noise = NoiseStream::new(seed, cl.system.dim_noise()).path(path);
    let mut traj = Trajectory {
        dt,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps),
        margins: Vec::with_capacity(steps + 1),
        horizons: Vec::with_capacity(steps + 1),
        records: Vec::with_capacity(steps),
        seed,
        path,
    };
    let start = PathStart { x: x0.to_vec(), margin: cl.margin.initial, horizon: cl.horizon.length };
    cl.roll(&start, dt, steps, &mut noise, |k, z, outcome| {
        traj.times.push(k as f64 * dt);
        traj.states.push(z.x.clone());
        traj.margins.push(z.margin);
        traj.horizons.push(z.horizon);
        if let Some(o) = outcome {
            traj.inputs.push(o.u.clone());
            traj.records.push(StepRecord::from(o));
        }
        ControlFlow::Continue(())
    })?;
    Ok(traj)
}

/// Lie derivatives of φ at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierLie {
    pub phi: f64,
    /// `L_f φ`.
    pub lf: f64,
    /// `L_g φ` (row, length m).
    pub lg: Vec<f64>,
    /// `L_σ φ` (row, length ω).
    pub lsigma: Vec<f64>,
    /// `½ tr(σσᵀ Hess φ)`.
    pub half_trace: f64,
}

impl BarrierLie {
    /// `f_φ = L_f φ + ½ tr(σσᵀ Hess φ)`.
    pub fn f_phi(&self) -> f64 {
        self.lf + self.half_trace
    }

    pub fn lsigma_norm(&self) -> f64 {
        self.lsigma.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn barrier_lie(sys: &dyn ControlAffineSystem, barrier: &BarrierSpec, x: &[f64]) -> BarrierLie {
    let (n, m, w) = (sys.dim_state(), sys.dim_input(), sys.dim_noise());
    let mut grad = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n * m];
    let mut s = vec![0.0; n * w];
    barrier.gradient(x, &mut grad);
    sys.drift(x, &mut f);
    sys.input_matrix(x, &mut g);
    sys.diffusion(x, &mut s);
    let lf = dot(&grad, &f);
    let lg = vec_mat(&grad, &g, n, m);
    let lsigma = vec_mat(&grad, &s, n, w);
    let half_trace = if barrier.is_affine() {
        0.0
    } else {
        let mut hess = vec![0.0; n * n];
        barrier.hessian(x, &mut hess);
        0.5 * trace_sst_h(&s, n, w, &hess)
    };
    BarrierLie { phi: barrier.value(x), lf, lg, lsigma, half_trace }
}

/// `f_φ(x) = L_f φ(x) + ½ tr(σ(x) σ(x)ᵀ Hess φ(x))`.
pub fn f_phi(sys: &dyn ControlAffineSystem, barrier: &BarrierSpec, x: &[f64]) -> f64 {
    barrier_lie(sys, barrier, x).f_phi()
}

/// `(f̃, g̃, σ̃)` of the augmented SDE `dZ = (f̃ + g̃ U) dt + σ̃ dW`.
#[derive(Clone)]
pub struct AugmentedDynamics {
    pub system: Arc<dyn ControlAffineSystem>,
    pub barrier: BarrierSpec,
    pub horizon: HorizonSpec,
    pub margin: MarginSpec,
}

impl AugmentedDynamics {
    pub fn dim(&self) -> usize {
        self.system.dim_state() + 3
    }

    /// `[f_T, f_ℓ(L), f_φ(x), f(x)]`.
    pub fn tilde_f(&self, z: &AugmentedState) -> Vec<f64> {
        let n = self.system.dim_state();
        let mut out = vec![0.0; n + 3];
        out[0] = self.horizon.rate();
        out[1] = self.margin.rate(z.margin);
        out[2] = f_phi(self.system.as_ref(), &self.barrier, &z.x);
        self.system.drift(&z.x, &mut out[3..]);
        out
    }

    /// `[0; 0; L_g φ; g(x)]`, `(n+3) × m` row-major.
    pub fn tilde_g(&self, z: &AugmentedState) -> Vec<f64> {
        let (n, m) = (self.system.dim_state(), self.system.dim_input());
        let lie = barrier_lie(self.system.as_ref(), &self.barrier, &z.x);
        let mut out = vec![0.0; (n + 3) * m];
        out[2 * m..3 * m].copy_from_slice(&lie.lg);
        self.system.input_matrix(&z.x, &mut out[3 * m..]);
        out
    }

    /// `[0; 0; L_σ φ; σ(x)]`, `(n+3) × ω` row-major.
    pub fn tilde_sigma(&self, z: &AugmentedState) -> Vec<f64> {
        let (n, w) = (self.system.dim_state(), self.system.dim_noise());
        let lie = barrier_lie(self.system.as_ref(), &self.barrier, &z.x);
        let mut out = vec![0.0; (n + 3) * w];
        out[2 * w..3 * w].copy_from_slice(&lie.lsigma);
        self.system.diffusion(&z.x, &mut out[3 * w..]);
        out
    }
}

pub fn augmented_dynamics(
    sys: Arc<dyn ControlAffineSystem>,
    barrier: BarrierSpec,
    horizon: HorizonSpec,
    margin: MarginSpec,
) -> AugmentedDynamics {
    AugmentedDynamics { system: sys, barrier, horizon, margin }
}

// Small dense helpers; matrices are row-major.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn mat_vec(a: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        out[i] = dot(&a[i * cols..(i + 1) * cols], v);
    }
}

/// `vᵀ A` for `A` of shape `rows × cols`.
pub(crate) fn vec_mat(v: &[f64], a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j] += v[i] * a[i * cols + j];
        }
    }
    out
}

/// `tr(S Sᵀ H)` for `S: n × w`, `H: n × n`.
pub(crate) fn trace_sst_h(s: &[f64], n: usize, w: usize, h: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let sst = dot(&s[i * w..(i + 1) * w], &s[j * w..(j + 1) * w]);
            acc += sst * h[j * n + i];
        }
    }
    acc
}
