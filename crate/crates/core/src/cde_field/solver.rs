//! Finite-difference solver for the backward equation of `F`,
//!
//! ```text
//! ∂F/∂T = ½ ∇·(S ∇F) + (ρ − ½ ∇·S)·∇F,   S = σσᵀ,
//! ```
//!
//! marched in `T` from the indicator of the safe set. Only the `(L?, x)`
//! coordinates are discretized: φ is a function of x, so its row of the
//! augmented system carries no extra information.
//!
//! Diffusion uses face-averaged coefficients `½ ∂_a(S_aa ∂_a F)` plus
//! centred cross terms, convection is first-order upwind. Far-field edges
//! have a zero normal derivative; the unsafe side (types I/II) or the safe
//! side (types III/IV) is held at its known value. Links that cross the
//! boundary are shortened to where `φ − L` interpolates to zero, so the
//! boundary need not lie on a grid node.

use super::field::{PolicyTag, Provenance, SafeProbabilityField};
use super::grid::GridSpec;
use crate::dynamics::{AugmentedState, ClosedLoop, HorizonMode};
use crate::error::{Error, Result};
use crate::safety_prob::ProbabilityType;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Explicit unless its stability bound would force substeps below a
    /// tenth of the horizon spacing.
    Auto,
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdeOptions {
    pub scheme: Scheme,
    /// Largest substep in `T` (accuracy, not stability).
    pub max_substep: f64,
    /// Gauss–Seidel stopping tolerance (multi-dimensional implicit steps).
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for CdeOptions {
    fn default() -> Self {
        Self { scheme: Scheme::Auto, max_substep: 0.01, tolerance: 1e-12, max_iterations: 20_000 }
    }
}

/// Relaxation of a Monte Carlo field toward the transport operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingOptions {
    pub sweeps: usize,
    /// Weight of the propagated slice in each relaxation update.
    pub omega: f64,
    /// Largest allowed change of any node relative to the raw value.
    pub max_deviation: f64,
}

impl Default for SmoothingOptions {
    fn default() -> Self {
        Self { sweeps: 3, omega: 0.5, max_deviation: 0.25 }
    }
}

/// Floor on the cut-link fraction, so a free node lying on the boundary
/// keeps a finite coupling.
const MIN_LINK_FRACTION: f64 = 0.05;

/// Spatial difference operator at one policy horizon.
struct Operator {
    d: usize,
    sizes: Vec<usize>,
    strides: Vec<usize>,
    h: Vec<f64>,
    /// Coefficient toward `p + e_a` / `p − e_a`, indexed `p * d + a`.
    up: Vec<f64>,
    lo: Vec<f64>,
    pairs: Vec<(usize, usize)>,
    /// `S_ab` for each pair, indexed `p * pairs.len() + k`.
    cross: Vec<f64>,
    /// Explicit stability bound on the substep.
    bound: f64,
}

impl Operator {
    fn neighbor(&self, p: usize, a: usize, delta: isize) -> Option<usize> {
        let i = (p / self.strides[a]) % self.sizes[a];
        let j = i as isize + delta;
        if j < 0 || j as usize >= self.sizes[a] {
            None
        } else {
            Some((p as isize + delta * self.strides[a] as isize) as usize)
        }
    }

    fn cross_term(&self, f: &[f64], p: usize) -> f64 {
        let np = self.pairs.len();
        let mut acc = 0.0;
        for (k, &(a, b)) in self.pairs.iter().enumerate() {
            let c = self.cross[p * np + k];
            if c == 0.0 {
                continue;
            }
            let (Some(ap), Some(am)) = (self.neighbor(p, a, 1), self.neighbor(p, a, -1)) else {
                continue;
            };
            let (Some(_), Some(_)) = (self.neighbor(p, b, 1), self.neighbor(p, b, -1)) else {
                continue;
            };
            let sb = self.strides[b];
            let mixed = f[ap + sb] - f[ap - sb] - f[am + sb] + f[am - sb];
            acc += c * mixed / (4.0 * self.h[a] * self.h[b]);
        }
        acc
    }

    /// `(A F)_p` for a free node.
    fn apply(&self, f: &[f64], p: usize) -> f64 {
        let mut acc = 0.0;
        for a in 0..self.d {
            if let Some(q) = self.neighbor(p, a, 1) {
                acc += self.up[p * self.d + a] * (f[q] - f[p]);
            }
            if let Some(q) = self.neighbor(p, a, -1) {
                acc += self.lo[p * self.d + a] * (f[q] - f[p]);
            }
        }
        acc + self.cross_term(f, p)
    }
}

struct Node {
    margin: f64,
    x: Vec<f64>,
    gap: f64,
}

/// Marches slices of one field forward in `T`.
struct Marcher<'a> {
    cl: &'a ClosedLoop,
    grid: GridSpec,
    nodes: Vec<Node>,
    /// Held value per spatial node, `None` for free nodes.
    pinned: Vec<Option<f64>>,
    opts: CdeOptions,
    op: Option<(f64, Operator)>,
}

impl<'a> Marcher<'a> {
    fn new(cl: &'a ClosedLoop, ptype: ProbabilityType, grid: &GridSpec, fixed_margin: f64, opts: CdeOptions) -> Self {
        let nodes: Vec<Node> = (0..grid.spatial_len())
            .map(|s| {
                let (margin, x) = grid.spatial_point(s, fixed_margin);
                let gap = cl.barrier.value(&x) - margin;
                Node { margin, x, gap }
            })
            .collect();
        let pinned = nodes
            .iter()
            .map(|n| match (ptype.is_invariance(), n.gap >= 0.0) {
                (true, false) => Some(0.0),
                (false, true) => Some(1.0),
                _ => None,
            })
            .collect();
        Self { cl, grid: grid.clone(), nodes, pinned, opts, op: None }
    }

    fn initial_slice(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| if n.gap >= 0.0 { 1.0 } else { 0.0 }).collect()
    }

    /// Horizon the policy sees while the field is advanced to level `t`.
    fn policy_horizon(&self, t: f64) -> f64 {
        match self.cl.horizon.mode {
            HorizonMode::Fixed => self.cl.horizon.length,
            HorizonMode::Receding => t,
        }
    }

    fn build_operator(&self, horizon: f64) -> Operator {
        let sys = self.cl.system.as_ref();
        let (n, m, w) = (sys.dim_state(), sys.dim_input(), sys.dim_noise());
        let axes = self.grid.spatial_axes();
        let d = axes.len();
        let off = usize::from(self.grid.margin.is_some());
        let sizes: Vec<usize> = axes.iter().map(|a| a.nodes).collect();
        let mut strides = vec![1; d];
        for k in (0..d.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * sizes[k + 1];
        }
        let h: Vec<f64> = axes.iter().map(|a| a.spacing()).collect();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (off + a, off + b))).collect();
        let np = pairs.len();
        let total = self.nodes.len();

        let mut s_buf = vec![0.0; n * w];
        let sst = |x: &[f64], s_buf: &mut [f64], i: usize, j: usize| -> f64 {
            sys.diffusion(x, s_buf);
            (0..w).map(|k| s_buf[i * w + k] * s_buf[j * w + k]).sum()
        };

        // Diagonal of S at every node, for face averages.
        let mut diag_s = vec![0.0; total * n];
        for (p, node) in self.nodes.iter().enumerate() {
            sys.diffusion(&node.x, &mut s_buf);
            for i in 0..n {
                diag_s[p * n + i] = (0..w).map(|k| s_buf[i * w + k] * s_buf[i * w + k]).sum();
            }
        }

        let mut op = Operator {
            d,
            sizes,
            strides,
            h,
            up: vec![0.0; total * d],
            lo: vec![0.0; total * d],
            pairs,
            cross: vec![0.0; total * np],
            bound: f64::INFINITY,
        };

        let mut f = vec![0.0; n];
        let mut g = vec![0.0; n * m];
        let mut xs = vec![0.0; n];
        let mut max_diag: f64 = 0.0;
        for (p, node) in self.nodes.iter().enumerate() {
            if self.pinned[p].is_some() {
                continue;
            }
            let z = AugmentedState::new(&self.cl.barrier, horizon, node.margin, node.x.clone());
            let u = self.cl.policy.evaluate(&z).u;
            sys.drift(&node.x, &mut f);
            sys.input_matrix(&node.x, &mut g);

            let mut drift = vec![0.0; d];
            if off == 1 {
                drift[0] = self.cl.margin.rate(node.margin);
            }
            for i in 0..n {
                let gu: f64 = (0..m).map(|j| g[i * m + j] * u[j]).sum();
                let ds = if sys.has_constant_diffusion() {
                    0.0
                } else {
                    let hx = op.h[off + i];
                    xs.copy_from_slice(&node.x);
                    xs[i] = node.x[i] + hx;
                    let sp = sst(&xs, &mut s_buf, i, i);
                    xs[i] = node.x[i] - hx;
                    let sm = sst(&xs, &mut s_buf, i, i);
                    (sp - sm) / (2.0 * hx)
                };
                drift[off + i] = f[i] + gu - 0.5 * ds;
            }

            let mut diag = 0.0;
            for (a, &v) in drift.iter().enumerate() {
                let ha = op.h[a];
                let q_up = op.neighbor(p, a, 1);
                let q_lo = op.neighbor(p, a, -1);
                let th_up = q_up.map_or(1.0, |q| self.link_fraction(p, q));
                let th_lo = q_lo.map_or(1.0, |q| self.link_fraction(p, q));
                let (mut up, mut lo) = (0.0, 0.0);
                if a >= off {
                    let i = a - off;
                    // Face value of S_aa; on a cut link only the node's own value is known.
                    let face = |q: usize, th: f64| {
                        if th < 1.0 {
                            0.5 * diag_s[p * n + i]
                        } else {
                            0.25 * (diag_s[p * n + i] + diag_s[q * n + i])
                        }
                    };
                    let span = th_up + th_lo;
                    if let Some(q) = q_up {
                        up += face(q, th_up) * 2.0 / (th_up * span) / (ha * ha);
                    }
                    if let Some(q) = q_lo {
                        lo += face(q, th_lo) * 2.0 / (th_lo * span) / (ha * ha);
                    }
                }
                if v > 0.0 && q_up.is_some() {
                    up += v / (ha * th_up);
                } else if v < 0.0 && q_lo.is_some() {
                    lo -= v / (ha * th_lo);
                }
                op.up[p * d + a] = up;
                op.lo[p * d + a] = lo;
                diag += up + lo;
            }
            if np > 0 {
                for (k, &(a, b)) in op.pairs.iter().enumerate() {
                    let c = sst(&node.x, &mut s_buf, a - off, b - off);
                    op.cross[p * np + k] = c;
                    diag += c.abs() / (op.h[a] * op.h[b]);
                }
            }
            max_diag = max_diag.max(diag);
        }
        op.bound = if max_diag > 0.0 { 1.0 / max_diag } else { f64::INFINITY };
        op
    }

    /// Share of the link from free node `p` to `q` on the free side of the
    /// boundary `φ = L`, from linear interpolation of `φ − L`. Links to
    /// other free nodes count in full.
    fn link_fraction(&self, p: usize, q: usize) -> f64 {
        if self.pinned[q].is_none() {
            return 1.0;
        }
        let (gp, gq) = (self.nodes[p].gap.abs(), self.nodes[q].gap.abs());
        (gp / (gp + gq)).max(MIN_LINK_FRACTION)
    }

    fn ensure_operator(&mut self, horizon: f64) {
        let stale = match &self.op {
            Some((h, _)) => *h != horizon,
            None => true,
        };
        if stale {
            let op = self.build_operator(horizon);
            self.op = Some((horizon, op));
        }
    }

    /// Advances `slice` from level `t0` to level `t1`.
    fn advance(&mut self, slice: &mut Vec<f64>, t0: f64, t1: f64) -> Result<()> {
        let horizon = self.policy_horizon(t1);
        self.ensure_operator(horizon);
        let (_, op) = self.op.as_ref().expect("operator built");
        let span = t1 - t0;
        let target = span.min(self.opts.max_substep);
        let implicit = match self.opts.scheme {
            Scheme::Implicit => true,
            Scheme::Explicit => {
                if target > op.bound {
                    return Err(Error::Cfl { dt: target, bound: op.bound });
                }
                false
            }
            Scheme::Auto => op.bound < span / 10.0,
        };
        let step = if implicit { target } else { target.min(op.bound) };
        let k = (span / step).ceil().max(1.0) as usize;
        let delta = span / k as f64;
        let mut next = slice.clone();
        for _ in 0..k {
            if implicit {
                self.implicit_step(op, slice, &mut next, delta)?;
            } else {
                self.explicit_step(op, slice, &mut next, delta);
            }
            std::mem::swap(slice, &mut next);
        }
        Ok(())
    }

    fn explicit_step(&self, op: &Operator, f: &[f64], out: &mut [f64], delta: f64) {
        for p in 0..f.len() {
            out[p] = match self.pinned[p] {
                Some(v) => v,
                None => f[p] + delta * op.apply(f, p),
            };
        }
    }

    fn implicit_step(&self, op: &Operator, f: &[f64], out: &mut [f64], delta: f64) -> Result<()> {
        if op.d == 1 {
            self.thomas(op, f, out, delta);
            return Ok(());
        }
        // Gauss–Seidel on (I − δA) F⁺ = F + δ C(F), cross terms C lagged.
        let total = f.len();
        let rhs: Vec<f64> = (0..total)
            .map(|p| match self.pinned[p] {
                Some(v) => v,
                None => f[p] + delta * op.cross_term(f, p),
            })
            .collect();
        out.copy_from_slice(f);
        for (p, v) in self.pinned.iter().enumerate() {
            if let Some(v) = v {
                out[p] = *v;
            }
        }
        let mut worst = (0, 0.0);
        for _ in 0..self.opts.max_iterations {
            let mut change: f64 = 0.0;
            for p in 0..total {
                if self.pinned[p].is_some() {
                    continue;
                }
                let mut num = rhs[p];
                let mut den = 1.0;
                for a in 0..op.d {
                    let (cu, cl) = (op.up[p * op.d + a], op.lo[p * op.d + a]);
                    if let Some(q) = op.neighbor(p, a, 1) {
                        num += delta * cu * out[q];
                        den += delta * cu;
                    }
                    if let Some(q) = op.neighbor(p, a, -1) {
                        num += delta * cl * out[q];
                        den += delta * cl;
                    }
                }
                let v = num / den;
                let dv = (v - out[p]).abs();
                if dv > change {
                    change = dv;
                    worst = (p, v);
                }
                out[p] = v;
            }
            if change <= self.opts.tolerance {
                return Ok(());
            }
        }
        // Did not converge: report the node that was still moving most.
        Err(Error::SchemeFailure { node: worst.0, horizon: f64::NAN, value: worst.1 })
    }

    fn thomas(&self, op: &Operator, f: &[f64], out: &mut [f64], delta: f64) {
        let n = f.len();
        let mut c_star = vec![0.0; n];
        let mut d_star = vec![0.0; n];
        for p in 0..n {
            let (a, b, c, rhs) = match self.pinned[p] {
                Some(v) => (0.0, 1.0, 0.0, v),
                None => {
                    let up = op.up[p];
                    let lo = op.lo[p];
                    (-delta * lo, 1.0 + delta * (up + lo), -delta * up, f[p])
                }
            };
            if p == 0 {
                c_star[0] = c / b;
                d_star[0] = rhs / b;
            } else {
                let den = b - a * c_star[p - 1];
                c_star[p] = c / den;
                d_star[p] = (rhs - a * d_star[p - 1]) / den;
            }
        }
        out[n - 1] = d_star[n - 1];
        for p in (0..n - 1).rev() {
            out[p] = d_star[p] - c_star[p] * out[p + 1];
        }
    }

    fn repin(&self, slice: &mut [f64]) {
        for (v, pin) in slice.iter_mut().zip(&self.pinned) {
            if let Some(p) = pin {
                *v = *p;
            }
        }
    }
}

fn check_and_clip(slice: &mut [f64], horizon: f64) -> Result<()> {
    for (node, v) in slice.iter_mut().enumerate() {
        if !v.is_finite() || *v < -1e-9 || *v > 1.0 + 1e-9 {
            return Err(Error::SchemeFailure { node, horizon, value: *v });
        }
        *v = v.clamp(0.0, 1.0);
    }
    Ok(())
}

fn check_setup(cl: &ClosedLoop, grid: &GridSpec) -> Result<()> {
    grid.validate()?;
    let n = cl.system.dim_state();
    if grid.x.len() != n {
        return Err(Error::dim(format!("grid has {} x axes, state dim {n}", grid.x.len())));
    }
    if n > 3 {
        return Err(Error::invalid("the PDE path supports at most three state dimensions; use Monte Carlo"));
    }
    if !cl.margin.is_fixed() && grid.margin.is_none() {
        return Err(Error::invalid("a varying margin needs a margin axis in the grid"));
    }
    Ok(())
}

/// Solves for `F` of type `ptype` under the closed loop `cl` on `grid`.
/// `tag` records whether `cl.policy` is the nominal or the overall policy.
pub fn solve_cde(
    cl: &ClosedLoop,
    ptype: ProbabilityType,
    grid: &GridSpec,
    tag: PolicyTag,
    opts: &CdeOptions,
) -> Result<SafeProbabilityField> {
    check_setup(cl, grid)?;
    let fixed_margin = cl.margin.initial;
    let mut marcher = Marcher::new(cl, ptype, grid, fixed_margin, *opts);
    let levels = grid.horizon.coords();
    let mut slice = marcher.initial_slice();
    let mut values = Vec::with_capacity(grid.len());
    values.extend_from_slice(&slice);
    for j in 1..levels.len() {
        marcher.advance(&mut slice, levels[j - 1], levels[j])?;
        check_and_clip(&mut slice, levels[j])?;
        values.extend_from_slice(&slice);
    }
    let margin = grid.margin.is_none().then_some(fixed_margin);
    SafeProbabilityField::new(ptype, grid.clone(), margin, values, tag, Provenance::Cde)
}

/// Pulls a noisy field toward consistency with the transport operator.
///
/// Each sweep visits the horizon levels in order and replaces slice `j` by
/// `(1 − ω) F_j + ω P(F_{j−1})`, where `P` advances a slice by one level with
/// the solver above. Changes are capped at `max_deviation` from the raw
/// values, clipped to `[0, 1]`, and the initial slice and held nodes are
/// re-imposed after every update. A field that already solves the discrete
/// equation is a fixed point.
pub fn smooth_mc_field(
    raw: &SafeProbabilityField,
    cl: &ClosedLoop,
    cde: &CdeOptions,
    smoothing: &SmoothingOptions,
) -> Result<SafeProbabilityField> {
    check_setup(cl, &raw.grid)?;
    if !(0.0..=1.0).contains(&smoothing.omega) {
        return Err(Error::invalid(format!("omega must be in [0, 1], got {}", smoothing.omega)));
    }
    if !(smoothing.max_deviation >= 0.0) {
        return Err(Error::invalid("max_deviation must be non-negative"));
    }
    let fixed_margin = raw.fixed_margin.unwrap_or(cl.margin.initial);
    let mut marcher = Marcher::new(cl, raw.ptype, &raw.grid, fixed_margin, *cde);
    let levels = raw.grid.horizon.coords();
    let clipped: Vec<f64> = raw.values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let width = raw.grid.spatial_len();
    let mut out = clipped.clone();
    out[..width].copy_from_slice(&marcher.initial_slice());
    for j in 1..levels.len() {
        marcher.repin(&mut out[j * width..(j + 1) * width]);
    }
    for _ in 0..smoothing.sweeps {
        for j in 1..levels.len() {
            let mut prop = out[(j - 1) * width..j * width].to_vec();
            marcher.advance(&mut prop, levels[j - 1], levels[j])?;
            for (s, p) in prop.iter().enumerate() {
                let idx = j * width + s;
                let blended = (1.0 - smoothing.omega) * out[idx] + smoothing.omega * p;
                let lo = clipped[idx] - smoothing.max_deviation;
                let hi = clipped[idx] + smoothing.max_deviation;
                out[idx] = blended.clamp(lo, hi).clamp(0.0, 1.0);
            }
            marcher.repin(&mut out[j * width..(j + 1) * width]);
        }
    }
    raw.with_values(out, Provenance::McSmoothed)
}
