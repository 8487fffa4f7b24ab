//! Closed-form checks behind `probsafe validate-oracles`.

use std::fmt;
use std::sync::Arc;

use probsafe_core::controllers::{gaussian_lower_cvar, PrSbcCondition, StoCbfCondition};
use probsafe_core::dynamics::simulate;
use probsafe_core::safety_prob::{first_exit_time, mc_probability};
use probsafe_core::{
    normal, solve_cde, AugmentedState, Axis, BarrierSpec, CdeOptions, ClosedLoop, GridSpec, HorizonSpec, LinearSystem,
    MarginSpec, NominalController, PolicyTag, ProbabilityType, SafetyCondition,
};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub value: f64,
    pub expected: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        (self.value - self.expected).abs() <= self.tolerance
    }
}

impl fmt::Display for OracleCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: got {:.6}, expected {:.6} (tolerance {})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.expected,
            self.tolerance
        )
    }
}

fn scalar_loop(a: f64, sigma: f64, gain: f64) -> Result<ClosedLoop> {
    Ok(ClosedLoop::new(
        Arc::new(LinearSystem::scalar(a, 1.0, sigma)),
        Arc::new(NominalController::scalar_gain(gain)),
        BarrierSpec::affine(vec![1.0], -1.0),
        HorizonSpec::fixed(10.0),
        MarginSpec::fixed(0.0),
    )?)
}

/// `P(min_{s≤t} x + σW_s ≥ 1)` for `x ≥ 1`.
fn reflection(x: f64, sigma: f64, t: f64) -> f64 {
    2.0 * normal::cdf((x - 1.0) / (sigma * t.sqrt())) - 1.0
}

/// Runs every check. Errors only if a computation itself fails.
pub fn run_oracles(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut checks = Vec::new();

    // Driftless first passage: dX = 2 dW from x = 3 to the level 1 by T = 1.
    let driftless = scalar_loop(0.0, 2.0, 0.0)?;
    let exact = reflection(3.0, 2.0, 1.0);
    let mc = mc_probability(&driftless, ProbabilityType::II, &[3.0], 0.0, 1.0, 1e-3, 20_000, seed)?;
    checks.push(OracleCheck { name: "first passage, Monte Carlo", value: mc.value, expected: exact, tolerance: 0.02 });
    let grid = GridSpec::scalar(Axis::new(-1.0, 15.0, 641)?, 1.0, 11)?;
    let field =
        solve_cde(&driftless, ProbabilityType::II, &grid, PolicyTag::NominalClosedLoop, &CdeOptions::default())?;
    let z = AugmentedState::new(&driftless.barrier, 1.0, 0.0, vec![3.0]);
    checks.push(OracleCheck {
        name: "first passage, convection-diffusion solver",
        value: field.value(&z),
        expected: exact,
        tolerance: 0.01,
    });
    // d/dx of the closed form: 2 pdf((x − 1)/(σ√T)) / (σ√T), on a grid with
    // spacing 0.05.
    let grid = GridSpec::scalar(Axis::new(-1.0, 15.0, 321)?, 1.0, 11)?;
    let field =
        solve_cde(&driftless, ProbabilityType::II, &grid, PolicyTag::NominalClosedLoop, &CdeOptions::default())?;
    let slope = 2.0 * normal::pdf(1.0) / 2.0;
    checks.push(OracleCheck {
        name: "field gradient in x",
        value: field.gradient(&z)[3],
        expected: slope,
        tolerance: 0.02 * slope,
    });

    // Noiseless decay x' = −x/2 from 3 leaves x ≥ 1 at t = 2 ln 3.
    let decay = scalar_loop(-0.5, 0.0, 0.0)?;
    let traj = simulate(&decay, &[3.0], 1e-3, 4.0, seed)?;
    checks.push(OracleCheck {
        name: "deterministic exit time",
        value: first_exit_time(&traj, &decay.barrier, 0.0),
        expected: 2.0 * 3f64.ln(),
        tolerance: 2e-3,
    });

    checks.push(OracleCheck {
        name: "normal quantile at 0.9",
        value: normal::quantile(0.9),
        expected: 1.2816,
        tolerance: 1e-4,
    });

    // Benchmark plant dx = (2x + u) dt + 2 dW, φ = x − 1.
    let bench = Arc::new(LinearSystem::scalar(2.0, 1.0, 2.0));
    let barrier = BarrierSpec::affine(vec![1.0], -1.0);
    let z = AugmentedState::new(&barrier, 10.0, 0.0, vec![1.2]);
    let stocbf = StoCbfCondition { system: bench.clone(), barrier: barrier.clone(), eta: 1.0 };
    let prsbc = PrSbcCondition { system: bench, barrier, eta: 1.0, epsilon: 0.1, dt: 0.1 };
    checks.push(OracleCheck {
        name: "PrSBC tail margin",
        value: prsbc.constraint(&z).b - stocbf.constraint(&z).b,
        expected: 1.2816 * 2.0 / 0.1f64.sqrt(),
        tolerance: 1e-3,
    });
    checks.push(OracleCheck {
        name: "StoCBF boundary input at x = 1.2",
        value: stocbf.constraint(&z).b,
        expected: -2.6,
        tolerance: 1e-12,
    });

    checks.push(OracleCheck {
        name: "Gaussian CVaR at level 0.1",
        value: gaussian_lower_cvar(0.0, 1.0, 0.1),
        expected: -0.175_498_3 / 0.1,
        tolerance: 1e-3,
    });
    Ok(checks)
}
