use std::fmt;
use std::str::FromStr;

use super::grid::{Axis, GridSpec};
use crate::dynamics::{dot, trace_sst_h, AugmentedDynamics, AugmentedState};
use crate::error::{Error, Result};
use crate::safety_prob::ProbabilityType;

/// Which closed loop the field was computed under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyTag {
    /// `ρ = f̃ + g̃ N`.
    NominalClosedLoop,
    /// `ρ = f̃ + g̃ K_N`.
    OverallClosedLoop,
}

impl PolicyTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NominalClosedLoop => "nominal_closed_loop",
            Self::OverallClosedLoop => "overall_closed_loop",
        }
    }
}

impl fmt::Display for PolicyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "nominal_closed_loop" | "nominal" => Ok(Self::NominalClosedLoop),
            "overall_closed_loop" | "overall" => Ok(Self::OverallClosedLoop),
            other => Err(Error::invalid(format!("unknown policy tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Cde,
    Mc,
    McSmoothed,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cde => "cde",
            Self::Mc => "mc",
            Self::McSmoothed => "mc_smoothed",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cde" => Ok(Self::Cde),
            "mc" => Ok(Self::Mc),
            "mc_smoothed" => Ok(Self::McSmoothed),
            other => Err(Error::invalid(format!("unknown provenance {other:?}"))),
        }
    }
}

/// `F` of one probability type sampled on a [`GridSpec`].
///
/// Queries take an augmented state `z = (T, L, φ, x)`. The stored field is a
/// function of `(T, L, x)` only, so the φ entries of the gradient and Hessian
/// are zero and every x-dependence (including the one through φ) sits in the
/// x entries. Without a margin axis the L entries are zero as well.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeProbabilityField {
    pub ptype: ProbabilityType,
    pub grid: GridSpec,
    /// Margin the field was computed for when the grid has no margin axis.
    pub fixed_margin: Option<f64>,
    pub values: Vec<f64>,
    pub policy_tag: PolicyTag,
    pub provenance: Provenance,
    axes: Vec<Axis>,
    strides: Vec<usize>,
    /// z index of each stored axis.
    z_index: Vec<usize>,
}

/// Value, gradient and Hessian at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldQuery {
    pub value: f64,
    /// Length `n + 3`, ordered like `z`.
    pub gradient: Vec<f64>,
    /// `(n + 3) × (n + 3)`, row-major.
    pub hessian: Vec<f64>,
    /// The query was clamped into the grid.
    pub out_of_domain: bool,
}

impl SafeProbabilityField {
    pub fn new(
        ptype: ProbabilityType,
        grid: GridSpec,
        fixed_margin: Option<f64>,
        values: Vec<f64>,
        policy_tag: PolicyTag,
        provenance: Provenance,
    ) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::dim(format!("{} values for a grid of {} nodes", values.len(), grid.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("field values must be finite"));
        }
        if grid.margin.is_none() && fixed_margin.is_none() {
            return Err(Error::invalid("a field without a margin axis needs its fixed margin"));
        }
        let axes = grid.axes();
        let mut strides = vec![1; axes.len()];
        for k in (0..axes.len() - 1).rev() {
            strides[k] = strides[k + 1] * axes[k + 1].nodes;
        }
        let mut z_index = vec![0];
        if grid.margin.is_some() {
            z_index.push(1);
        }
        z_index.extend((0..grid.x.len()).map(|i| 3 + i));
        Ok(Self { ptype, grid, fixed_margin, values, policy_tag, provenance, axes, strides, z_index })
    }

    pub fn dim_state(&self) -> usize {
        self.grid.x.len()
    }

    /// Values of horizon level `j`.
    pub fn slice(&self, j: usize) -> &[f64] {
        let s = self.strides[0];
        &self.values[j * s..(j + 1) * s]
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn with_values(&self, values: Vec<f64>, provenance: Provenance) -> Result<Self> {
        Self::new(self.ptype, self.grid.clone(), self.fixed_margin, values, self.policy_tag, provenance)
    }

    fn coords_of(&self, z: &AugmentedState) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.axes.len());
        c.push(z.horizon);
        if self.grid.margin.is_some() {
            c.push(z.margin);
        }
        c.extend_from_slice(&z.x);
        c
    }

    /// Whether `z` lies inside the grid (and matches the fixed margin when
    /// there is no margin axis).
    pub fn contains(&self, z: &AugmentedState) -> bool {
        if z.x.len() != self.dim_state() {
            return false;
        }
        let inside = self.coords_of(z).iter().zip(&self.axes).all(|(c, a)| a.contains(*c));
        let margin_ok = match self.fixed_margin {
            Some(m) if self.grid.margin.is_none() => (z.margin - m).abs() <= 1e-9 * m.abs().max(1.0),
            _ => true,
        };
        inside && margin_ok
    }

    #[inline]
    fn at(&self, idx: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, s) in idx.iter().zip(&self.strides) {
            flat += i * s;
        }
        self.values[flat]
    }

    /// Central-difference derivatives at a node; stencils at the edges are
    /// shifted one node inward.
    fn nodal_derivatives(&self, node: &[usize], scratch: &mut [usize], grad: &mut [f64], hess: &mut [f64]) {
        let d = self.axes.len();
        let center = |a: usize| node[a].clamp(1, self.axes[a].nodes - 2);
        for a in 0..d {
            let h = self.axes[a].spacing();
            let c = center(a);
            scratch.copy_from_slice(node);
            scratch[a] = c + 1;
            let fp = self.at(scratch);
            scratch[a] = c - 1;
            let fm = self.at(scratch);
            scratch[a] = c;
            let f0 = self.at(scratch);
            grad[a] = (fp - fm) / (2.0 * h);
            hess[a * d + a] = (fp - 2.0 * f0 + fm) / (h * h);
            for b in a + 1..d {
                let hb = self.axes[b].spacing();
                let cb = center(b);
                scratch.copy_from_slice(node);
                let mut corner = |da: isize, db: isize| {
                    scratch[a] = (c as isize + da) as usize;
                    scratch[b] = (cb as isize + db) as usize;
                    self.at(scratch)
                };
                let mixed = (corner(1, 1) - corner(1, -1) - corner(-1, 1) + corner(-1, -1)) / (4.0 * h * hb);
                hess[a * d + b] = mixed;
                hess[b * d + a] = mixed;
            }
        }
    }

    /// Multilinear interpolation of the node values and of the nodal
    /// central differences.
    pub fn query(&self, z: &AugmentedState) -> FieldQuery {
        let d = self.axes.len();
        let n = self.dim_state();
        let out_of_domain = !self.contains(z);
        let coords = self.coords_of(z);
        let cells: Vec<(usize, f64)> = self.axes.iter().zip(&coords).map(|(a, c)| a.locate(*c)).collect();

        let mut value = 0.0;
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        let mut node = vec![0; d];
        let mut scratch = vec![0; d];
        let mut ng = vec![0.0; d];
        let mut nh = vec![0.0; d * d];
        for mask in 0..(1usize << d) {
            let mut w = 1.0;
            for (k, (i, t)) in cells.iter().enumerate() {
                if mask >> k & 1 == 1 {
                    node[k] = i + 1;
                    w *= t;
                } else {
                    node[k] = *i;
                    w *= 1.0 - t;
                }
            }
            if w == 0.0 {
                continue;
            }
            value += w * self.at(&node);
            self.nodal_derivatives(&node, &mut scratch, &mut ng, &mut nh);
            for k in 0..d {
                g[k] += w * ng[k];
            }
            for k in 0..d * d {
                h[k] += w * nh[k];
            }
        }

        let nz = n + 3;
        let mut gradient = vec![0.0; nz];
        let mut hessian = vec![0.0; nz * nz];
        for a in 0..d {
            let za = self.z_index[a];
            gradient[za] = g[a];
            for b in 0..d {
                hessian[za * nz + self.z_index[b]] = h[a * d + b];
            }
        }
        FieldQuery { value, gradient, hessian, out_of_domain }
    }

    pub fn value(&self, z: &AugmentedState) -> f64 {
        let coords = self.coords_of(z);
        let d = self.axes.len();
        let cells: Vec<(usize, f64)> = self.axes.iter().zip(&coords).map(|(a, c)| a.locate(*c)).collect();
        let mut node = vec![0; d];
        let mut value = 0.0;
        for mask in 0..(1usize << d) {
            let mut w = 1.0;
            for (k, (i, t)) in cells.iter().enumerate() {
                if mask >> k & 1 == 1 {
                    node[k] = i + 1;
                    w *= t;
                } else {
                    node[k] = *i;
                    w *= 1.0 - t;
                }
            }
            if w != 0.0 {
                value += w * self.at(&node);
            }
        }
        value
    }

    pub fn gradient(&self, z: &AugmentedState) -> Vec<f64> {
        self.query(z).gradient
    }

    pub fn hessian(&self, z: &AugmentedState) -> Vec<f64> {
        self.query(z).hessian
    }

    /// Terms of `D_F(z, u) = L_f̃F + (L_g̃F) u + ½ tr(σ̃σ̃ᵀ Hess F)`.
    pub fn generator_parts(&self, dynamics: &AugmentedDynamics, z: &AugmentedState) -> GeneratorParts {
        let q = self.query(z);
        let nz = z.dim();
        let m = dynamics.system.dim_input();
        let w = dynamics.system.dim_noise();
        let tf = dynamics.tilde_f(z);
        let tg = dynamics.tilde_g(z);
        let ts = dynamics.tilde_sigma(z);
        let drift = dot(&q.gradient, &tf);
        let mut lg = vec![0.0; m];
        for (r, gr) in q.gradient.iter().enumerate() {
            for (j, out) in lg.iter_mut().enumerate() {
                *out += gr * tg[r * m + j];
            }
        }
        let half_trace = 0.5 * trace_sst_h(&ts, nz, w, &q.hessian);
        GeneratorParts { value: q.value, drift, lg, half_trace, out_of_domain: q.out_of_domain }
    }
}

/// Pieces of the generator of the augmented process applied to `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParts {
    /// `F(z)`.
    pub value: f64,
    /// `L_f̃ F`.
    pub drift: f64,
    /// `L_g̃ F`, length m.
    pub lg: Vec<f64>,
    /// `½ tr(σ̃σ̃ᵀ Hess F)`.
    pub half_trace: f64,
    pub out_of_domain: bool,
}

impl GeneratorParts {
    pub fn generator(&self, u: &[f64]) -> f64 {
        self.drift + dot(&self.lg, u) + self.half_trace
    }
}

/// `F(z)` and whether `z` had to be clamped.
pub fn field_value(field: &SafeProbabilityField, z: &AugmentedState) -> (f64, bool) {
    (field.value(z), !field.contains(z))
}

/// `∂F/∂z` and whether `z` had to be clamped.
pub fn field_gradient(field: &SafeProbabilityField, z: &AugmentedState) -> (Vec<f64>, bool) {
    let q = field.query(z);
    (q.gradient, q.out_of_domain)
}

/// `Hess F` and whether `z` had to be clamped.
pub fn field_hessian(field: &SafeProbabilityField, z: &AugmentedState) -> (Vec<f64>, bool) {
    let q = field.query(z);
    (q.hessian, q.out_of_domain)
}

/// `D_F(z, u)`.
pub fn generator_value(
    field: &SafeProbabilityField,
    dynamics: &AugmentedDynamics,
    z: &AugmentedState,
    u: &[f64],
) -> f64 {
    field.generator_parts(dynamics, z).generator(u)
}
