use std::sync::Arc;

use probsafe_core::safety_prob::{mc_field, mc_probability};
use probsafe_core::{
    smooth_mc_field, solve_cde, AugmentedState, Axis, BarrierSpec, CdeOptions, ClosedLoop, GridSpec, HorizonSpec,
    LinearSystem, MarginSpec, NominalController, PolicyTag, ProbabilityType, SmoothingOptions,
};
use proptest::prelude::*;

fn scalar_loop(a: f64, sigma: f64, gain: f64) -> ClosedLoop {
    ClosedLoop::new(
        Arc::new(LinearSystem::scalar(a, 1.0, sigma)),
        Arc::new(NominalController::scalar_gain(gain)),
        BarrierSpec::affine(vec![1.0], -1.0),
        HorizonSpec::fixed(10.0),
        MarginSpec::fixed(0.0),
    )
    .unwrap()
}

fn at(cl: &ClosedLoop, x: f64, t: f64) -> AugmentedState {
    AugmentedState::new(&cl.barrier, t, 0.0, vec![x])
}

// Standard normal density, written out so the oracle does not share code
// with the solver.
fn pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn solved_fields_stay_in_the_unit_interval(
        a in -3.0f64..3.0,
        sigma in 0.0f64..3.0,
        gain in -1.0f64..4.0,
        p in 0usize..4,
    ) {
        let cl = scalar_loop(a, sigma, gain);
        let grid = GridSpec::scalar(Axis::new(-2.0, 6.0, 81).unwrap(), 3.0, 16).unwrap();
        let f = solve_cde(&cl, ProbabilityType::ALL[p], &grid, PolicyTag::NominalClosedLoop, &CdeOptions::default()).unwrap();
        prop_assert!(f.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn planar_fields_stay_in_the_unit_interval(damping in 0.0f64..1.0, noise in 0.1f64..1.0) {
        let system = LinearSystem::new(2, vec![0.0, 1.0, -1.0, -damping], vec![0.0; 2], vec![0.0, 1.0], vec![0.0, 0.0, 0.0, noise])
            .unwrap();
        let cl = ClosedLoop::new(
            Arc::new(system),
            Arc::new(NominalController::linear(vec![0.0, -0.5], 1, 2).unwrap()),
            BarrierSpec::quadratic(vec![-1.0, 0.0, 0.0, -0.25], vec![0.0, 0.0], 1.0).unwrap(),
            HorizonSpec::fixed(2.0),
            MarginSpec::fixed(0.0),
        )
        .unwrap();
        let axis = Axis::new(-2.5, 2.5, 21).unwrap();
        let grid = GridSpec::new(vec![axis, axis], None, Axis::new(0.0, 1.0, 6).unwrap()).unwrap();
        let f = solve_cde(&cl, ProbabilityType::I, &grid, PolicyTag::NominalClosedLoop, &CdeOptions::default()).unwrap();
        prop_assert!(f.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn gradient_matches_first_passage_derivative() {
    let cl = scalar_loop(0.0, 2.0, 0.0);
    let grid = GridSpec::scalar(Axis::new(-1.0, 15.0, 321).unwrap(), 2.0, 21).unwrap();
    let f = solve_cde(&cl, ProbabilityType::II, &grid, PolicyTag::NominalClosedLoop, &CdeOptions::default()).unwrap();
    for (x, t) in [(2.0, 1.0), (3.0, 1.0), (3.0, 2.0), (4.0, 0.5f64)] {
        let s = 2.0 * t.sqrt();
        let exact = 2.0 * pdf((x - 1.0) / s) / s;
        let got = f.gradient(&at(&cl, x, t))[3];
        assert!((got - exact).abs() <= 0.02 * exact, "x = {x}, T = {t}: {got} vs {exact}");
    }
}

#[test]
fn refinement_converges_at_first_order() {
    // Benchmark nominal loop; the substep is fixed so only the spacing varies.
    let cl = scalar_loop(2.0, 2.0, 2.5);
    let opts = CdeOptions { max_substep: 0.005, ..CdeOptions::default() };
    let probe = |nodes| {
        let grid = GridSpec::scalar(Axis::new(-1.0, 7.0, nodes).unwrap(), 1.0, 11).unwrap();
        let f = solve_cde(&cl, ProbabilityType::I, &grid, PolicyTag::NominalClosedLoop, &opts).unwrap();
        [1.5, 2.0, 3.0].map(|x| f.value(&at(&cl, x, 1.0)))
    };
    let (coarse, mid, fine) = (probe(81), probe(161), probe(321));
    for i in 0..3 {
        let d1 = (coarse[i] - mid[i]).abs();
        let d2 = (mid[i] - fine[i]).abs();
        let order = (d1 / d2).log2();
        assert!(order >= 0.9, "probe {i}: differences {d1:.2e}, {d2:.2e}, order {order:.2}");
    }
}

#[test]
fn cde_agrees_with_monte_carlo_on_the_benchmark_loop() {
    let cl = scalar_loop(2.0, 2.0, 2.5);
    let grid = GridSpec::scalar(Axis::new(-1.0, 7.0, 321).unwrap(), 10.0, 101).unwrap();
    let f = solve_cde(&cl, ProbabilityType::I, &grid, PolicyTag::NominalClosedLoop, &CdeOptions::default()).unwrap();
    for (i, (x, t)) in [(1.2, 0.2), (2.0, 0.5), (3.0, 1.0), (4.0, 3.0), (3.0, 10.0)].into_iter().enumerate() {
        let mc = mc_probability(&cl, ProbabilityType::I, &[x], 0.0, t, 1e-3, 3000, 40 + i as u64).unwrap();
        let cde = f.value(&at(&cl, x, t));
        assert!((cde - mc.value).abs() <= 3.0 * mc.stderr + 0.02, "x = {x}, T = {t}: {cde} vs {}", mc.value);
    }
}

#[test]
fn smoothing_brings_a_monte_carlo_field_closer_to_the_solution() {
    let cl = scalar_loop(2.0, 2.0, 2.5);
    let grid = GridSpec::scalar(Axis::new(-1.0, 7.0, 41).unwrap(), 2.0, 11).unwrap();
    let exact =
        solve_cde(&cl, ProbabilityType::I, &grid, PolicyTag::NominalClosedLoop, &CdeOptions::default()).unwrap();
    let raw = mc_field(&cl, ProbabilityType::I, &grid, PolicyTag::NominalClosedLoop, 0.01, 200, 9).unwrap().field;
    let smoothed = smooth_mc_field(&raw, &cl, &CdeOptions::default(), &SmoothingOptions::default()).unwrap();
    let rms =
        |v: &[f64]| (v.iter().zip(&exact.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    assert!(rms(&smoothed.values) < rms(&raw.values), "{} vs {}", rms(&smoothed.values), rms(&raw.values));
}
