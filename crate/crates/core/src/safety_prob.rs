//! Path statistics Φ (worst margin), Γ (first exit), Θ (best margin),
//! Ψ (first entry) and Monte Carlo estimates of the four probability types.
//!
//! Events are detected at sampled times only. A sample with `φ = L` counts as
//! safe, and "never" is `f64::INFINITY`.

use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;

use rayon::prelude::*;

use crate::cde_field::{GridSpec, PolicyTag, Provenance, SafeProbabilityField};
use crate::dynamics::{step_count, BarrierSpec, ClosedLoop, HorizonMode, PathStart, Trajectory};
use crate::error::{Error, Result};
use crate::rng::NoiseStream;

/// * I: `P(Φ_x(T) ≥ L)`, stay safe throughout `[0, T]`.
/// * II: `P(Γ_x(L) > T)`, first exit after `T`.
/// * III: `P(Θ_x(T) ≥ L)`, be safe at some time in `[0, T]`.
/// * IV: `P(Ψ_x(L) ≤ T)`, first entry no later than `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProbabilityType {
    I,
    II,
    III,
    IV,
}

impl ProbabilityType {
    pub const ALL: [ProbabilityType; 4] = [Self::I, Self::II, Self::III, Self::IV];

    /// Types I and II (forward invariance) as opposed to III and IV
    /// (forward convergence).
    pub fn is_invariance(self) -> bool {
        matches!(self, Self::I | Self::II)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
        }
    }
}

impl fmt::Display for ProbabilityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbabilityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "1" => Ok(Self::I),
            "II" | "2" => Ok(Self::II),
            "III" | "3" => Ok(Self::III),
            "IV" | "4" => Ok(Self::IV),
            other => Err(Error::invalid(format!("unknown probability type {other:?}"))),
        }
    }
}

/// Bernoulli Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MCEstimate {
    pub value: f64,
    /// `√(p̂(1−p̂)/n)`.
    pub stderr: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl MCEstimate {
    pub fn from_hits(hits: usize, n_samples: usize, seed: u64) -> Self {
        let n = n_samples.max(1) as f64;
        let p = hits as f64 / n;
        Self { value: p, stderr: (p * (1.0 - p) / n).sqrt(), n_samples, seed }
    }
}

/// `Φ`: minimum of φ over the sampled states.
pub fn worst_margin(traj: &Trajectory, barrier: &BarrierSpec) -> f64 {
    traj.states.iter().map(|x| barrier.value(x)).fold(f64::INFINITY, f64::min)
}

/// `Θ`: maximum of φ over the sampled states.
pub fn best_margin(traj: &Trajectory, barrier: &BarrierSpec) -> f64 {
    traj.states.iter().map(|x| barrier.value(x)).fold(f64::NEG_INFINITY, f64::max)
}

/// `Γ`: first sampled time with `φ < L`, or `+∞`.
pub fn first_exit_time(traj: &Trajectory, barrier: &BarrierSpec, l: f64) -> f64 {
    traj.states.iter().position(|x| barrier.value(x) < l).map_or(f64::INFINITY, |k| traj.times[k])
}

/// `Ψ`: first sampled time with `φ ≥ L`, or `+∞`.
pub fn first_entry_time(traj: &Trajectory, barrier: &BarrierSpec, l: f64) -> f64 {
    traj.states.iter().position(|x| barrier.value(x) >= l).map_or(f64::INFINITY, |k| traj.times[k])
}

/// Statistics of one sampled path in terms of the gap `φ(X_k) − L_k`, with
/// exit and entry kept as step indices so the probability identities hold
/// exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathStatistics {
    pub worst_gap: f64,
    pub best_gap: f64,
    pub exit_step: Option<usize>,
    pub entry_step: Option<usize>,
    pub steps: usize,
}

impl Default for PathStatistics {
    fn default() -> Self {
        Self { worst_gap: f64::INFINITY, best_gap: f64::NEG_INFINITY, exit_step: None, entry_step: None, steps: 0 }
    }
}

impl PathStatistics {
    pub fn push(&mut self, k: usize, gap: f64) {
        self.worst_gap = self.worst_gap.min(gap);
        self.best_gap = self.best_gap.max(gap);
        if gap < 0.0 && self.exit_step.is_none() {
            self.exit_step = Some(k);
        }
        if gap >= 0.0 && self.entry_step.is_none() {
            self.entry_step = Some(k);
        }
        self.steps = k;
    }

    /// Uses the margin recorded along the trajectory.
    pub fn from_trajectory(traj: &Trajectory, barrier: &BarrierSpec) -> Self {
        let mut s = Self::default();
        for (k, (x, l)) in traj.states.iter().zip(&traj.margins).enumerate() {
            s.push(k, barrier.value(x) - l);
        }
        s
    }

    /// Event of `ptype` over the whole path. Types I and III read the
    /// extreme gaps, types II and IV read the passage indices.
    pub fn event(&self, ptype: ProbabilityType) -> bool {
        match ptype {
            ProbabilityType::I => self.worst_gap >= 0.0,
            ProbabilityType::II => self.exit_step.is_none(),
            ProbabilityType::III => self.best_gap >= 0.0,
            ProbabilityType::IV => self.entry_step.is_some(),
        }
    }

    /// `1{Γ > t_k}`.
    pub fn safe_through(&self, k: usize) -> bool {
        self.exit_step.is_none_or(|e| e > k)
    }

    pub fn exit_time(&self, dt: f64) -> f64 {
        self.exit_step.map_or(f64::INFINITY, |k| k as f64 * dt)
    }

    pub fn entry_time(&self, dt: f64) -> f64 {
        self.entry_step.map_or(f64::INFINITY, |k| k as f64 * dt)
    }
}

/// Fraction of paths for which the `ptype` event holds.
pub fn estimate(stats: &[PathStatistics], ptype: ProbabilityType, seed: u64) -> MCEstimate {
    let hits = stats.iter().filter(|s| s.event(ptype)).count();
    MCEstimate::from_hits(hits, stats.len(), seed)
}

fn check_point_args(cl: &ClosedLoop, x: &[f64], horizon: f64, dt: f64, n_samples: usize) -> Result<()> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if x.len() != cl.system.dim_state() {
        return Err(Error::dim(format!("x has length {}, state dim {}", x.len(), cl.system.dim_state())));
    }
    Ok(())
}

/// Runs `n_samples` full paths from `(x, L, T)` and returns their statistics.
/// Path `i` uses noise stream `i` of `seed`.
pub fn mc_path_statistics(
    cl: &ClosedLoop,
    x: &[f64],
    l: f64,
    horizon: f64,
    dt: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<PathStatistics>> {
    check_point_args(cl, x, horizon, dt, n_samples)?;
    let steps = step_count(horizon, dt);
    let stream = NoiseStream::new(seed, cl.system.dim_noise());
    let start = PathStart { x: x.to_vec(), margin: l, horizon };
    (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut noise = stream.path(i);
            let mut stats = PathStatistics::default();
            cl.roll(&start, dt, steps, &mut noise, |k, z, _| {
                stats.push(k, z.phi - z.margin);
                ControlFlow::Continue(())
            })?;
            Ok(stats)
        })
        .collect()
}

/// Monte Carlo estimate of `F` of type `ptype` at `(x, L, T)`.
#[allow(clippy::too_many_arguments)]
pub fn mc_probability(
    cl: &ClosedLoop,
    ptype: ProbabilityType,
    x: &[f64],
    l: f64,
    horizon: f64,
    dt: f64,
    n_samples: usize,
    seed: u64,
) -> Result<MCEstimate> {
    check_point_args(cl, x, horizon, dt, n_samples)?;
    let steps = step_count(horizon, dt);
    let stream = NoiseStream::new(seed, cl.system.dim_noise());
    let start = PathStart { x: x.to_vec(), margin: l, horizon };
    let hits: Result<usize> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut noise = stream.path(i);
            let mut stats = PathStatistics::default();
            cl.roll(&start, dt, steps, &mut noise, |k, z, _| {
                stats.push(k, z.phi - z.margin);
                // The event is settled once the path has exited (I, II) or
                // entered (III, IV).
                let settled =
                    if ptype.is_invariance() { stats.exit_step.is_some() } else { stats.entry_step.is_some() };
                if settled {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })?;
            Ok(usize::from(stats.event(ptype)))
        })
        .sum();
    Ok(MCEstimate::from_hits(hits?, n_samples, seed))
}

/// Raw Monte Carlo field with per-node standard errors.
#[derive(Debug, Clone)]
pub struct McField {
    pub field: SafeProbabilityField,
    pub stderr: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

/// Monte Carlo estimate of `F` at every grid node. Sample `i` at every node
/// uses the same noise path `i` (common random numbers), so differences
/// between neighbouring nodes are far less noisy than the values.
///
/// With a fixed horizon the policy does not see `T`, so one run per spatial
/// node to the largest `T` yields every `T` slice.
pub fn mc_field(
    cl: &ClosedLoop,
    ptype: ProbabilityType,
    grid: &GridSpec,
    tag: PolicyTag,
    dt: f64,
    n_samples: usize,
    seed: u64,
) -> Result<McField> {
    grid.validate()?;
    if grid.x.len() != cl.system.dim_state() {
        return Err(Error::dim(format!("grid has {} x axes, state dim {}", grid.x.len(), cl.system.dim_state())));
    }
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let levels = grid.horizon.coords();
    let level_steps: Vec<usize> = levels.iter().map(|&t| if t <= 0.0 { 0 } else { step_count(t, dt) }).collect();
    let spatial = grid.spatial_len();
    let fixed_margin = cl.margin.initial;
    let stream = NoiseStream::new(seed, cl.system.dim_noise());
    let receding = cl.horizon.mode == HorizonMode::Receding;

    // hits[node][level]
    let per_node: Result<Vec<Vec<usize>>> = (0..spatial)
        .into_par_iter()
        .map(|s| {
            let (l, x) = grid.spatial_point(s, fixed_margin);
            let mut hits = vec![0usize; levels.len()];
            let runs: Vec<(usize, usize, f64)> = if receding {
                (0..levels.len()).map(|j| (j, level_steps[j], levels[j])).collect()
            } else {
                let max = *level_steps.iter().max().unwrap_or(&0);
                vec![(usize::MAX, max, cl.horizon.length)]
            };
            for (only, steps, start_h) in runs {
                let start = PathStart { x: x.clone(), margin: l, horizon: start_h };
                for i in 0..n_samples as u64 {
                    let mut noise = stream.path(i);
                    let mut stats = PathStatistics::default();
                    cl.roll(&start, dt, steps, &mut noise, |k, z, _| {
                        stats.push(k, z.phi - z.margin);
                        let settled =
                            if ptype.is_invariance() { stats.exit_step.is_some() } else { stats.entry_step.is_some() };
                        if settled {
                            ControlFlow::Break(())
                        } else {
                            ControlFlow::Continue(())
                        }
                    })?;
                    for (j, &sj) in level_steps.iter().enumerate() {
                        if only != usize::MAX && only != j {
                            continue;
                        }
                        let event = if ptype.is_invariance() {
                            stats.exit_step.is_none_or(|e| e > sj)
                        } else {
                            stats.entry_step.is_some_and(|e| e <= sj)
                        };
                        hits[j] += usize::from(event);
                    }
                }
            }
            Ok(hits)
        })
        .collect();
    let per_node = per_node?;

    let mut values = vec![0.0; grid.len()];
    let mut stderr = vec![0.0; grid.len()];
    for (s, hits) in per_node.iter().enumerate() {
        for (j, &h) in hits.iter().enumerate() {
            let est = MCEstimate::from_hits(h, n_samples, seed);
            let idx = j * spatial + s;
            values[idx] = est.value;
            stderr[idx] = est.stderr;
        }
    }
    let margin = if grid.margin.is_some() { None } else { Some(fixed_margin) };
    let field = SafeProbabilityField::new(ptype, grid.clone(), margin, values, tag, Provenance::Mc)?;
    Ok(McField { field, stderr, n_samples, seed })
}
