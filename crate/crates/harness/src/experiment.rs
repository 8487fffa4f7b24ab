//! Ensemble runs and the metrics reported per time step.

use std::path::Path;
use std::sync::Arc;

use probsafe_core::cde_field::read_field;
use probsafe_core::controllers::{CvarCondition, PrSbcCondition, ProbabilitySpaceCondition, StoCbfCondition, Weight};
use probsafe_core::dynamics::{simulate_path, step_count};
use probsafe_core::safety_prob::{mc_field, PathStatistics};
use probsafe_core::{
    smooth_mc_field, solve_cde, Alpha, Axis, BarrierSpec, CdeOptions, ClosedLoop, ControlAffineSystem, FilterMode,
    GridSpec, HorizonSpec, LinearSystem, MarginSpec, NominalController, Policy, PolicyTag, ProbabilityType, SafePolicy,
    SafeProbabilityField, SafetyCertParams, SafetyCondition, Scheme, SmoothingOptions, Trajectory,
};
use rayon::prelude::*;

use crate::config::{
    BarrierKind, ControllerKind, EvaluationLoop, ExperimentConfig, FieldSource, HorizonModeConfig, SchemeConfig,
    Setting,
};
use crate::error::{HarnessError, Result};

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// Plant, barrier, controllers and fields assembled from a config.
#[derive(Clone)]
pub struct Setup {
    pub system: Arc<dyn ControlAffineSystem>,
    pub barrier: BarrierSpec,
    pub horizon: HorizonSpec,
    pub margin: MarginSpec,
    pub nominal: NominalController,
    /// Controller whose closed loop defines the safe-probability field.
    pub reference: NominalController,
    pub ptype: ProbabilityType,
    /// Field used by the proposed controller (and for evaluation in the
    /// nominal mode).
    pub field: Arc<SafeProbabilityField>,
    pub policy: Arc<dyn Policy>,
    /// Field along which `E[F(Z_t)]` is evaluated.
    pub eval_field: Arc<SafeProbabilityField>,
}

/// Plant, barrier and the two feedback laws, without any field.
#[derive(Clone)]
pub struct Plant {
    pub system: Arc<dyn ControlAffineSystem>,
    pub barrier: BarrierSpec,
    pub horizon: HorizonSpec,
    pub margin: MarginSpec,
    pub nominal: NominalController,
    pub reference: NominalController,
    pub ptype: ProbabilityType,
}

impl Plant {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.system.a.len();
        let sys = LinearSystem::new(
            n,
            flatten(&cfg.system.a),
            cfg.system.c.clone().unwrap_or_else(|| vec![0.0; n]),
            flatten(&cfg.system.b),
            flatten(&cfg.system.sigma),
        )?;
        let m = sys.dim_input();
        let barrier = match cfg.barrier.kind {
            BarrierKind::Affine => BarrierSpec::affine(cfg.barrier.weights.clone(), cfg.barrier.offset),
            BarrierKind::Quadratic => BarrierSpec::quadratic(
                flatten(cfg.barrier.q.as_deref().unwrap_or_default()),
                cfg.barrier.weights.clone(),
                cfg.barrier.offset,
            )?,
        };
        let horizon = match cfg.horizon.mode {
            HorizonModeConfig::Fixed => HorizonSpec::fixed(cfg.horizon.length),
            HorizonModeConfig::Receding => HorizonSpec::receding(cfg.horizon.length),
        };
        let margin = if cfg.margin.rate == 0.0 {
            MarginSpec::fixed(cfg.margin.initial)
        } else {
            let rate = cfg.margin.rate;
            MarginSpec::varying(cfg.margin.initial, move |_| rate)
        };
        let nominal = NominalController::linear(flatten(&cfg.nominal.gain), m, n)?;
        let reference = match &cfg.field.reference_gain {
            Some(g) => NominalController::linear(flatten(g), m, n)?,
            None => nominal.clone(),
        };
        Ok(Self {
            system: Arc::new(sys),
            barrier,
            horizon,
            margin,
            nominal,
            reference,
            ptype: cfg.field.ptype.parse()?,
        })
    }

    /// Closed loop whose safe probability the field describes.
    pub fn reference_loop(&self) -> Result<ClosedLoop> {
        Ok(ClosedLoop::new(
            self.system.clone(),
            Arc::new(self.reference.clone()),
            self.barrier.clone(),
            self.horizon,
            self.margin.clone(),
        )?)
    }
}

/// The field a config's proposed controller would use.
pub fn reference_field(cfg: &ExperimentConfig) -> Result<SafeProbabilityField> {
    let plant = Plant::build(cfg)?;
    build_field(cfg, &plant.reference_loop()?, plant.ptype)
}

impl Setup {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let Plant { system, barrier, horizon, margin, nominal, reference, ptype } = Plant::build(cfg)?;
        let m = system.dim_input();
        let reference_loop =
            ClosedLoop::new(system.clone(), Arc::new(reference.clone()), barrier.clone(), horizon, margin.clone())?;
        let field = Arc::new(build_field(cfg, &reference_loop, ptype)?);
        let policy = build_policy(cfg, &reference_loop, &nominal, &field, m)?;

        let eval_field = match cfg.evaluation.closed_loop {
            EvaluationLoop::Nominal => field.clone(),
            EvaluationLoop::Overall => {
                let overall = reference_loop.with_policy(policy.clone());
                Arc::new(solve_cde(&overall, ptype, &grid_of(cfg)?, PolicyTag::OverallClosedLoop, &cde_options(cfg))?)
            }
        };
        Ok(Self { system, barrier, horizon, margin, nominal, reference, ptype, field, policy, eval_field })
    }

    pub fn closed_loop(&self) -> Result<ClosedLoop> {
        Ok(ClosedLoop::new(
            self.system.clone(),
            self.policy.clone(),
            self.barrier.clone(),
            self.horizon,
            self.margin.clone(),
        )?)
    }
}

pub fn grid_of(cfg: &ExperimentConfig) -> Result<GridSpec> {
    let axis = |a: &crate::config::AxisConfig| Axis::new(a.min, a.max, a.nodes);
    let x = cfg.field.x_axes.iter().map(axis).collect::<probsafe_core::Result<Vec<_>>>()?;
    let margin = cfg.field.margin_axis.as_ref().map(axis).transpose()?;
    let t_max = cfg.field.t_max.unwrap_or(cfg.horizon.length);
    Ok(GridSpec::new(x, margin, Axis::new(0.0, t_max, cfg.field.t_nodes)?)?)
}

pub fn cde_options(cfg: &ExperimentConfig) -> CdeOptions {
    CdeOptions {
        scheme: match cfg.field.scheme {
            SchemeConfig::Auto => Scheme::Auto,
            SchemeConfig::Explicit => Scheme::Explicit,
            SchemeConfig::Implicit => Scheme::Implicit,
        },
        max_substep: cfg.field.max_substep,
        ..CdeOptions::default()
    }
}

/// Safe-probability field of the reference closed loop from the configured
/// source.
pub fn build_field(
    cfg: &ExperimentConfig,
    reference: &ClosedLoop,
    ptype: ProbabilityType,
) -> Result<SafeProbabilityField> {
    let tag = PolicyTag::NominalClosedLoop;
    let mc_dt = cfg.field.mc_dt.unwrap_or(cfg.simulation.dt);
    let field = match cfg.field.source {
        FieldSource::Cde => solve_cde(reference, ptype, &grid_of(cfg)?, tag, &cde_options(cfg))?,
        FieldSource::Mc => {
            mc_field(reference, ptype, &grid_of(cfg)?, tag, mc_dt, cfg.field.mc_samples, cfg.seed)?.field
        }
        FieldSource::McSmoothed => {
            let raw = mc_field(reference, ptype, &grid_of(cfg)?, tag, mc_dt, cfg.field.mc_samples, cfg.seed)?;
            let s = &cfg.field.smoothing;
            let opts = SmoothingOptions { sweeps: s.sweeps, omega: s.omega, max_deviation: s.max_deviation };
            smooth_mc_field(&raw.field, reference, &cde_options(cfg), &opts)?
        }
        FieldSource::File => {
            let path = cfg.field.path.as_deref().unwrap_or_default();
            let field = read_field(Path::new(path)).map_err(|e| match e {
                probsafe_core::Error::Io { context, source } => {
                    HarnessError::Io { context: format!("{context} (run `probsafe field` first to create it)"), source }
                }
                other => other.into(),
            })?;
            if field.ptype != ptype || field.dim_state() != reference.system.dim_state() {
                return Err(HarnessError::Config(format!(
                    "field file {path} holds a type-{} field over {} states, config wants type {ptype} over {}",
                    field.ptype,
                    field.dim_state(),
                    reference.system.dim_state()
                )));
            }
            field
        }
    };
    Ok(field)
}

fn build_policy(
    cfg: &ExperimentConfig,
    reference: &ClosedLoop,
    nominal: &NominalController,
    field: &Arc<SafeProbabilityField>,
    m: usize,
) -> Result<Arc<dyn Policy>> {
    let c = &cfg.controller;
    let condition: Arc<dyn SafetyCondition> = match c.kind {
        ControllerKind::Nominal => return Ok(Arc::new(nominal.clone())),
        ControllerKind::Proposed => Arc::new(ProbabilitySpaceCondition {
            field: field.clone(),
            dynamics: reference.augmented_dynamics(),
            params: SafetyCertParams::new(c.epsilon, Alpha::Linear(c.alpha))?,
        }),
        ControllerKind::Stocbf => Arc::new(StoCbfCondition {
            system: reference.system.clone(),
            barrier: reference.barrier.clone(),
            eta: c.eta,
        }),
        ControllerKind::Prsbc => Arc::new(PrSbcCondition {
            system: reference.system.clone(),
            barrier: reference.barrier.clone(),
            eta: c.eta,
            epsilon: c.epsilon,
            dt: cfg.simulation.dt,
        }),
        ControllerKind::Cvar => Arc::new(CvarCondition {
            system: reference.system.clone(),
            barrier: reference.barrier.clone(),
            gamma: c.gamma,
            beta: c.beta,
            dt: cfg.simulation.dt,
        }),
    };
    let weight = match &c.weight {
        Some(h) => Weight::new(&flatten(h), m)?,
        None => Weight::identity(m),
    };
    let policy = |mode| SafePolicy::new(nominal.clone(), condition.clone(), mode, m).with_weight(weight.clone());
    Ok(match c.setting {
        Setting::WorstCase => Arc::new(policy(FilterMode::Equality)),
        Setting::Switching => Arc::new(policy(FilterMode::Equality).switching()),
        Setting::ConstrainedOpt => Arc::new(policy(FilterMode::MinimalDeviation)),
        Setting::Additive => Arc::new(policy(FilterMode::Additive { kappa: None })),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportMetadata {
    pub label: String,
    pub controller: String,
    pub setting: String,
    pub config_hash: String,
    pub seed: u64,
    pub field_provenance: String,
    pub field_policy_tag: String,
    pub evaluation_policy_tag: String,
    /// Field queries that fell outside the grid and were clamped.
    pub out_of_domain_queries: usize,
    pub notes: Vec<String>,
}

/// Per-time-step ensemble metrics of one controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub metadata: ReportMetadata,
    pub times: Vec<f64>,
    /// Ensemble mean / standard deviation of the first state component.
    pub mean_state: Vec<f64>,
    pub std_state: Vec<f64>,
    /// `E[F(Z_t)]` over the ensemble.
    pub expected_safe_prob: Vec<f64>,
    /// Ensemble standard deviation of `F(Z_t)`.
    pub std_safe_prob: Vec<f64>,
    /// Fraction of trajectories with no exit up to `t`.
    pub empirical_safe_prob: Vec<f64>,
    /// Trajectories whose step at `t` fell back to the nominal input.
    pub fallback_count: Vec<usize>,
    /// `F(Z_t)` per trajectory, `[trajectory][step]`.
    pub safe_prob_paths: Vec<Vec<f64>>,
    pub path_stats: Vec<PathStatistics>,
    pub trajectories: Vec<Trajectory>,
}

impl ExperimentReport {
    pub fn n_steps(&self) -> usize {
        self.times.len()
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    /// Fraction of all controller steps that fell back.
    pub fn fallback_rate(&self) -> f64 {
        let steps: usize = self.trajectories.iter().map(Trajectory::steps).sum();
        if steps == 0 {
            return 0.0;
        }
        self.fallback_count.iter().sum::<usize>() as f64 / steps as f64
    }

    /// Mean over trajectories of the time-averaged `F`, with its standard
    /// error.
    pub fn time_averaged_safe_prob(&self) -> (f64, f64) {
        let per_path: Vec<f64> = self.safe_prob_paths.iter().map(|p| p.iter().sum::<f64>() / p.len() as f64).collect();
        let (mean, std) = mean_std(&per_path);
        (mean, std / (per_path.len() as f64).sqrt())
    }

    pub fn terminal_empirical_safe_prob(&self) -> f64 {
        *self.empirical_safe_prob.last().unwrap_or(&1.0)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let setup = Setup::build(cfg)?;
    run_with_setup(cfg, &setup)
}

/// Simulates `n_trajectories` paths (path `i` uses noise stream `i` of the
/// seed) and aggregates them in path order, so the report does not depend on
/// the thread count.
pub fn run_with_setup(cfg: &ExperimentConfig, setup: &Setup) -> Result<ExperimentReport> {
    let cl = setup.closed_loop()?;
    let sim = &cfg.simulation;
    let trajectories: Vec<Trajectory> = (0..sim.n_trajectories as u64)
        .into_par_iter()
        .map(|i| simulate_path(&cl, &sim.x0, sim.dt, sim.t_end, cfg.seed, i))
        .collect::<probsafe_core::Result<_>>()?;

    let steps = step_count(sim.t_end, sim.dt);
    let len = steps + 1;
    let mut out_of_domain = 0;
    let mut safe_prob_paths = Vec::with_capacity(trajectories.len());
    for traj in &trajectories {
        let mut fs = Vec::with_capacity(len);
        for k in 0..traj.len() {
            let z = traj.augmented(k, &setup.barrier);
            if !setup.eval_field.contains(&z) {
                out_of_domain += 1;
            }
            fs.push(setup.eval_field.value(&z));
        }
        safe_prob_paths.push(fs);
    }
    let path_stats: Vec<PathStatistics> =
        trajectories.iter().map(|t| PathStatistics::from_trajectory(t, &setup.barrier)).collect();

    let n = trajectories.len() as f64;
    let mut report = ExperimentReport {
        metadata: ReportMetadata {
            label: cfg.label(),
            controller: cfg.controller.kind.as_str().into(),
            setting: cfg.controller.setting.as_str().into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            field_provenance: setup.field.provenance.to_string(),
            field_policy_tag: setup.field.policy_tag.to_string(),
            evaluation_policy_tag: setup.eval_field.policy_tag.to_string(),
            out_of_domain_queries: out_of_domain,
            notes: notes_for(cfg),
        },
        times: trajectories[0].times.clone(),
        mean_state: Vec::with_capacity(len),
        std_state: Vec::with_capacity(len),
        expected_safe_prob: Vec::with_capacity(len),
        std_safe_prob: Vec::with_capacity(len),
        empirical_safe_prob: Vec::with_capacity(len),
        fallback_count: Vec::with_capacity(len),
        safe_prob_paths,
        path_stats,
        trajectories,
    };
    let mut column = Vec::with_capacity(report.trajectories.len());
    for k in 0..len {
        column.clear();
        column.extend(report.trajectories.iter().map(|t| t.states[k][0]));
        let (m, s) = mean_std(&column);
        report.mean_state.push(m);
        report.std_state.push(s);
        column.clear();
        column.extend(report.safe_prob_paths.iter().map(|p| p[k]));
        let (m, s) = mean_std(&column);
        report.expected_safe_prob.push(m);
        report.std_safe_prob.push(s);
        let safe = report.path_stats.iter().filter(|p| p.safe_through(k)).count();
        report.empirical_safe_prob.push(safe as f64 / n);
        let fb = report.trajectories.iter().filter(|t| t.records.get(k).is_some_and(|r| r.fell_back)).count();
        report.fallback_count.push(fb);
    }
    Ok(report)
}

fn notes_for(cfg: &ExperimentConfig) -> Vec<String> {
    let mut notes = Vec::new();
    match cfg.controller.kind {
        ControllerKind::Prsbc => {
            notes.push("prsbc: one-step Gaussian surrogate, margin q_(1-eps)*|L_sigma phi|/sqrt(dt)".into())
        }
        ControllerKind::Cvar => notes.push("cvar: one-step Gaussian surrogate of the next-step barrier".into()),
        _ => {}
    }
    if cfg.field.reference_gain.is_some() {
        notes.push("field computed under field.reference_gain instead of the nominal gain".into());
    }
    notes
}

/// Aggregate figures of one controller in a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSummary {
    pub label: String,
    pub time_avg_expected: f64,
    pub time_avg_expected_stderr: f64,
    pub min_expected: f64,
    pub terminal_empirical: f64,
    pub fallback_total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reports: Vec<ExperimentReport>,
    pub summaries: Vec<ControllerSummary>,
}

impl Comparison {
    pub fn summary(&self, label: &str) -> Option<&ControllerSummary> {
        self.summaries.iter().find(|s| s.label == label)
    }

    /// Labels sorted by time-averaged `E[F]`, highest first.
    pub fn ranking_by_expected(&self) -> Vec<String> {
        let mut s: Vec<&ControllerSummary> = self.summaries.iter().collect();
        s.sort_by(|a, b| b.time_avg_expected.total_cmp(&a.time_avg_expected));
        s.into_iter().map(|s| s.label.clone()).collect()
    }

    /// `a` exceeds `b` in time-averaged `E[F]` by more than three combined
    /// standard errors.
    pub fn separated(&self, a: &str, b: &str) -> Option<bool> {
        let (sa, sb) = (self.summary(a)?, self.summary(b)?);
        let se = sa.time_avg_expected_stderr.hypot(sb.time_avg_expected_stderr);
        Some(sa.time_avg_expected - sb.time_avg_expected > 3.0 * se)
    }
}

pub fn summarize(report: &ExperimentReport) -> ControllerSummary {
    let (avg, se) = report.time_averaged_safe_prob();
    ControllerSummary {
        label: report.metadata.label.clone(),
        time_avg_expected: avg,
        time_avg_expected_stderr: se,
        min_expected: report.expected_safe_prob.iter().copied().fold(f64::INFINITY, f64::min),
        terminal_empirical: report.terminal_empirical_safe_prob(),
        fallback_total: report.fallback_count.iter().sum(),
    }
}

/// Runs every config and lines the results up. All configs must share the
/// time grid, initial state, ensemble size and seed.
pub fn compare_controllers(configs: &[ExperimentConfig]) -> Result<Comparison> {
    let Some(first) = configs.first() else {
        return Err(HarnessError::Config("compare needs at least one config".into()));
    };
    for c in &configs[1..] {
        let (a, b) = (&first.simulation, &c.simulation);
        if a.dt != b.dt || a.t_end != b.t_end {
            return Err(HarnessError::Config(format!(
                "{} uses dt = {}, t_end = {} but {} uses dt = {}, t_end = {}",
                first.label(),
                a.dt,
                a.t_end,
                c.label(),
                b.dt,
                b.t_end
            )));
        }
        if a.x0 != b.x0 || a.n_trajectories != b.n_trajectories || first.seed != c.seed {
            return Err(HarnessError::Config(format!(
                "{} and {} must share x0, n_trajectories and seed",
                first.label(),
                c.label()
            )));
        }
    }
    let reports = configs.iter().map(run_experiment).collect::<Result<Vec<_>>>()?;
    let summaries = reports.iter().map(summarize).collect();
    Ok(Comparison { reports, summaries })
}
