use std::sync::{Arc, OnceLock};

use probsafe_core::controllers::{
    additive_policy, check_safety_condition, constrained_opt_policy, worst_case_equality_policy, Weight,
};
use probsafe_core::dynamics::AugmentedDynamics;
use probsafe_core::{
    generator_value, solve_cde, AugmentedState, Axis, BarrierSpec, CdeOptions, ClosedLoop, GridSpec, HorizonSpec,
    LinearSystem, MarginSpec, NominalController, PolicyTag, ProbabilityType, SafeProbabilityField, SafetyCertParams,
};
use proptest::prelude::*;

struct Bench {
    nominal: NominalController,
    field: Arc<SafeProbabilityField>,
    dynamics: AugmentedDynamics,
    barrier: BarrierSpec,
}

/// Benchmark loop `dx = (2x + u) dt + 2 dW`, `u = −2.5x`, with a field
/// computed under the zero-input loop so `F` spans the whole unit interval
/// over the probed states.
fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let barrier = BarrierSpec::affine(vec![1.0], -1.0);
        let cl = ClosedLoop::new(
            Arc::new(LinearSystem::scalar(2.0, 1.0, 2.0)),
            Arc::new(NominalController::scalar_gain(0.0)),
            barrier.clone(),
            HorizonSpec::fixed(10.0),
            MarginSpec::fixed(0.0),
        )
        .unwrap();
        let grid = GridSpec::scalar(Axis::new(-1.0, 7.0, 161).unwrap(), 10.0, 51).unwrap();
        let field =
            solve_cde(&cl, ProbabilityType::I, &grid, PolicyTag::NominalClosedLoop, &CdeOptions::default()).unwrap();
        Bench {
            nominal: NominalController::scalar_gain(2.5),
            field: Arc::new(field),
            dynamics: cl.augmented_dynamics(),
            barrier,
        }
    })
}

fn state(x: f64, t: f64) -> AugmentedState {
    AugmentedState::new(&bench().barrier, t, 0.0, vec![x])
}

/// Checks the hypothesis "dy/dt ≥ 0 whenever y ≤ level" on samples and
/// reports whether the conclusion "y ≥ level" held at every sample.
fn invariance_checker(y: &[f64], dy: &[f64], level: f64) -> Option<bool> {
    let hypothesis = y.iter().zip(dy).all(|(&v, &d)| v > level || d >= 0.0);
    hypothesis.then(|| y.iter().all(|&v| v >= level - 1e-12))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn additive_policy_never_lowers_the_generator(x in 1.0f64..6.5, t in 0.2f64..10.0, kappa in 0.0f64..50.0) {
        let b = bench();
        let z = state(x, t);
        let params = SafetyCertParams::default();
        let out = additive_policy(&b.nominal, &b.field, &b.dynamics, &params, Some(kappa), &z);
        let u_n = b.nominal.control(&z.x);
        prop_assert!(generator_value(&b.field, &b.dynamics, &z, &out.u) >= generator_value(&b.field, &b.dynamics, &z, &u_n) - 1e-12);
    }

    #[test]
    fn constrained_opt_keeps_nominal_exactly_when_it_is_safe(x in 1.0f64..6.5, t in 0.2f64..10.0, eps in 0.01f64..0.5) {
        let b = bench();
        let z = state(x, t);
        let params = SafetyCertParams::new(eps, probsafe_core::Alpha::Linear(1.0)).unwrap();
        let u_n = b.nominal.control(&z.x);
        let (holds, _) = check_safety_condition(&b.field, &b.dynamics, &params, &z, &u_n);
        let out = constrained_opt_policy(&b.nominal, &b.field, &b.dynamics, &params, &Weight::identity(1), &z);
        if !out.fell_back {
            prop_assert_eq!(out.u == u_n, holds);
        }
        if out.modified && !out.fell_back {
            let (_, slack) = check_safety_condition(&b.field, &b.dynamics, &params, &z, &out.u);
            prop_assert!(slack.abs() <= 1e-9, "slack {}", slack);
        }
    }

    #[test]
    fn equality_policy_sits_on_the_constraint(x in 1.0f64..6.5, t in 0.2f64..10.0) {
        let b = bench();
        let z = state(x, t);
        let params = SafetyCertParams::default();
        let out = worst_case_equality_policy(&b.nominal, &b.field, &b.dynamics, &params, &z);
        if !out.fell_back {
            let (_, slack) = check_safety_condition(&b.field, &b.dynamics, &params, &z, &out.u);
            prop_assert!(slack.abs() <= 1e-9, "slack {}", slack);
        }
    }

    #[test]
    fn scaling_the_weight_leaves_the_projection_unchanged(x in 1.0f64..6.5, t in 0.2f64..10.0, c in 1e-3f64..1e3) {
        let b = bench();
        let z = state(x, t);
        let params = SafetyCertParams::default();
        let base = constrained_opt_policy(&b.nominal, &b.field, &b.dynamics, &params, &Weight::new(&[1.0], 1).unwrap(), &z);
        let scaled = constrained_opt_policy(&b.nominal, &b.field, &b.dynamics, &params, &Weight::new(&[c], 1).unwrap(), &z);
        prop_assert!((base.u[0] - scaled.u[0]).abs() <= 1e-12 * base.u[0].abs().max(1.0));
    }

    // y = L + c q(t)² with q a trigonometric polynomial, q(0) ≠ 0:
    // y touches L only at minima, where dy/dt = 0.
    #[test]
    fn invariance_lemma_on_sampled_functions(
        level in -1.0f64..1.0,
        lift in 0.01f64..2.0,
        coeffs in proptest::collection::vec(-1.0f64..1.0, 4),
        offset in 0.05f64..1.0,
    ) {
        let n = 400;
        let (mut y, mut dy) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for k in 0..n {
            let t = 5.0 * k as f64 / (n - 1) as f64;
            let (mut q, mut dq) = (offset, 0.0);
            for (j, c) in coeffs.iter().enumerate() {
                let w = (j + 1) as f64;
                q += c * (w * t).sin();
                dq += c * w * (w * t).cos();
            }
            y.push(level + lift * q * q);
            dy.push(lift * 2.0 * q * dq);
        }
        prop_assert!(y[0] > level);
        if let Some(conclusion) = invariance_checker(&y, &dy, level) {
            prop_assert!(conclusion);
        }
    }
}

#[test]
fn invariance_checker_flags_a_crossing() {
    // y = 1 − t crosses 0 with dy/dt < 0, so the hypothesis fails.
    let y: Vec<f64> = (0..20).map(|k| 1.0 - 0.1 * k as f64).collect();
    let dy = vec![-1.0; 20];
    assert_eq!(invariance_checker(&y, &dy, 0.0), None);
    // A function that rises whenever it is at or below the level.
    let y: Vec<f64> = (0..20).map(|k| (0.1 * k as f64 - 1.0).powi(2)).collect();
    let dy: Vec<f64> = (0..20).map(|k| 2.0 * (0.1 * k as f64 - 1.0)).collect();
    assert_eq!(invariance_checker(&y, &dy, 0.0), Some(true));
}
