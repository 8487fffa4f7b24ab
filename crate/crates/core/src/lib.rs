//! Long-term safe probabilities for control-affine SDEs and myopic safety
//! filters that keep them above a tolerance.
//!
//! * [`dynamics`]: plants, barriers, augmented state and simulation.
//! * [`safety_prob`]: path statistics and Monte Carlo probability estimates.
//! * [`cde_field`]: convection–diffusion solver and gridded probability fields.
//! * [`controllers`]: the probability-space condition, its policies and the
//!   StoCBF / PrSBC / CVaR baselines.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cde_field;
pub mod controllers;
pub mod dynamics;
pub mod error;
pub mod normal;
pub mod rng;
pub mod safety_prob;

pub use cde_field::{
    field_gradient, field_hessian, field_value, generator_value, smooth_mc_field, solve_cde, Axis, CdeOptions,
    FieldQuery, GridSpec, PolicyTag, Provenance, SafeProbabilityField, Scheme, SmoothingOptions,
};
pub use controllers::{
    AffineConstraint, Alpha, FilterMode, NominalController, Policy, SafePolicy, SafetyCertParams, SafetyCondition,
    StepOutcome,
};
pub use dynamics::{
    AugmentedState, BarrierSpec, ClosedLoop, ControlAffineSystem, FnSystem, HorizonMode, HorizonSpec, LinearSystem,
    MarginSpec, Trajectory,
};
pub use error::{Error, Result};
pub use safety_prob::{MCEstimate, ProbabilityType};
