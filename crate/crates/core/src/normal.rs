//! Standard normal helpers.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn standard() -> Normal {
    Normal::standard()
}

pub fn cdf(x: f64) -> f64 {
    standard().cdf(x)
}

pub fn pdf(x: f64) -> f64 {
    standard().pdf(x)
}

/// Quantile `q_p`, with `q_0 = −∞` and `q_1 = +∞`.
pub fn quantile(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        standard().inverse_cdf(p)
    }
}
