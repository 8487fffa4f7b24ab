//! Gridded safe-probability fields: the convection–diffusion solver, Monte
//! Carlo smoothing, interpolated queries and the field file format.

mod field;
mod grid;
mod io;
mod solver;

pub use field::{
    field_gradient, field_hessian, field_value, generator_value, FieldQuery, GeneratorParts, PolicyTag, Provenance,
    SafeProbabilityField,
};
pub use grid::{Axis, GridSpec};
pub use io::{read_field, write_field, write_field_csv};
pub use solver::{smooth_mc_field, solve_cde, CdeOptions, Scheme, SmoothingOptions};
