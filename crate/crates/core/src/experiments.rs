//! Experiment harnesses: the identify-synthesize-evaluate pipeline for one
//! trial, seed-swept grids over the sample count with quartile summaries and
//! log-log slopes, and a front-end that pairs bound right-hand sides with
//! measured counterparts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    analysis_constants, constant_set, riccati_perturbation_bounds, suboptimality_bounds,
    AnalysisConstants, BoundReport, BoundsError, ConstantSet,
};
use crate::controllers::{run_closed_loop, ControllerKind, LoopContext};
use crate::lti::{spectral_norm, SystemModel};
use crate::riccati::{
    optimal_cost, synthesize_gains, tilde_p_and_cost, GainSet, Provenance, RiccatiError,
    DEFAULT_TOL,
};
use crate::sysid::{collect, default_lambda, estimate, estimation_error};
use crate::topology::{
    agent_view, build_information_graph, compute_delay_matrix, AgentView, DelayMatrix,
    DirectedDelayGraph, InfoGraph,
};

/// A fully prepared system: topology products, true gains and the
/// closed-form optimal cost, shared across trials.
pub struct Instance {
    pub graph: DirectedDelayGraph,
    pub delay: DelayMatrix,
    pub ig: InfoGraph,
    pub views: Vec<AgentView>,
    pub model: SystemModel,
    pub true_gains: GainSet,
    pub j_star: f64,
}

impl Instance {
    pub fn prepare(graph: DirectedDelayGraph, model: SystemModel) -> Result<Self, RiccatiError> {
        let delay = compute_delay_matrix(&graph);
        let ig = build_information_graph(&delay);
        let views = (0..model.partition.p())
            .map(|i| agent_view(&ig, &delay, i))
            .collect();
        let true_gains = synthesize_gains(
            &model.a,
            &model.b,
            &model.q,
            &model.r,
            &ig,
            &model.partition,
            DEFAULT_TOL,
            Provenance::TrueModel,
        )?;
        let j_star = optimal_cost(&true_gains, &ig, &model.partition, model.sigma_w);
        Ok(Self {
            graph,
            delay,
            ig,
            views,
            model,
            true_gains,
            j_star,
        })
    }

    pub fn loop_context(&self) -> LoopContext<'_> {
        LoopContext {
            model: &self.model,
            delay: &self.delay,
            ig: &self.ig,
            views: &self.views,
            true_gains: Some(&self.true_gains),
            a_hat: Some(&self.model.a),
            b_hat: Some(&self.model.b),
            gains_hat: Some(&self.true_gains),
        }
    }

    pub fn constants(&self) -> Result<(ConstantSet, AnalysisConstants), BoundsError> {
        let c = constant_set(&self.model, &self.delay, &self.ig, &self.true_gains)?;
        let a = analysis_constants(&c);
        Ok((c, a))
    }
}

/// Sweep configuration; trial seeds derive as `base_seed + trial`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub t_eval: usize,
    pub sigma_u: f64,
    /// `None` picks the smallest admissible regularizer.
    pub lambda: Option<f64>,
    pub delta: f64,
    pub base_seed: u64,
    /// Bypass the estimates with the true model (consistency checks).
    pub use_true_model: bool,
    /// Resample the plant dynamics per trial instead of holding one fixed
    /// draw across all trials (the default matches the fixed-draw study).
    pub per_trial_systems: bool,
    /// Spectral-radius target for per-trial resampling.
    pub rho_target: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_grid: (20..=280).step_by(20).collect(),
            trials: 100,
            t_eval: 2000,
            sigma_u: 1.0,
            lambda: None,
            delta: 0.05,
            base_seed: 0,
            use_true_model: false,
            per_trial_systems: false,
            rho_target: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialStatus {
    Ok,
    SynthesisFailed,
    UnstableMixedLoop,
    NonFiniteCost,
}

impl std::fmt::Display for TrialStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TrialStatus::Ok => "ok",
            TrialStatus::SynthesisFailed => "synthesis-failed",
            TrialStatus::UnstableMixedLoop => "unstable-mixed-loop",
            TrialStatus::NonFiniteCost => "nonfinite-cost",
        };
        write!(f, "{s}")
    }
}

/// One (N, trial) outcome.  `subopt` is recorded as measured, never clamped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub n_samples: usize,
    pub trial: usize,
    pub seed: u64,
    pub status: TrialStatus,
    pub est_error: f64,
    pub j_hat: Option<f64>,
    pub j_star: f64,
    pub j_tilde: Option<f64>,
    pub subopt: Option<f64>,
}

/// Identify from `n_samples` steps, synthesize from the estimates, run the
/// per-agent policy for `t_eval` steps and record the outcome.
///
/// Within one seed the identification and evaluation noise come from
/// distinct streams, so evaluation noise is shared across different `N`
/// for the same trial.
pub fn run_pipeline(
    inst: &Instance,
    n_samples: usize,
    sigma_u: f64,
    lambda: Option<f64>,
    t_eval: usize,
    seed: u64,
    use_true_model: bool,
) -> ExperimentRecord {
    let lambda = lambda.unwrap_or_else(|| default_lambda(inst.model.sigma_w, sigma_u));
    let data = collect(&inst.model, &inst.graph, n_samples, sigma_u, seed)
        .expect("open-loop collection cannot fail");
    let est = estimate(&data, lambda);
    let est_error = estimation_error(&est, &inst.model.a, &inst.model.b);

    let (a_hat, b_hat) = if use_true_model {
        (inst.model.a.clone(), inst.model.b.clone())
    } else {
        (est.a_hat(), est.b_hat())
    };

    let mut record = ExperimentRecord {
        n_samples,
        trial: 0,
        seed,
        status: TrialStatus::Ok,
        est_error,
        j_hat: None,
        j_star: inst.j_star,
        j_tilde: None,
        subopt: None,
    };

    let gains_hat = match synthesize_gains(
        &a_hat,
        &b_hat,
        &inst.model.q,
        &inst.model.r,
        &inst.ig,
        &inst.model.partition,
        DEFAULT_TOL,
        Provenance::Estimate,
    ) {
        Ok(g) => g,
        Err(_) => {
            record.status = TrialStatus::SynthesisFailed;
            return record;
        }
    };

    match tilde_p_and_cost(
        &gains_hat,
        &inst.model.a,
        &inst.model.b,
        &inst.model.q,
        &inst.model.r,
        &inst.ig,
        &inst.model.partition,
        inst.model.sigma_w,
        DEFAULT_TOL,
    ) {
        Ok((_, j_tilde)) => record.j_tilde = Some(j_tilde),
        Err(RiccatiError::UnstableMixedLoop { .. }) => {
            record.status = TrialStatus::UnstableMixedLoop;
            return record;
        }
        Err(_) => {
            record.status = TrialStatus::SynthesisFailed;
            return record;
        }
    }

    let ctx = LoopContext {
        model: &inst.model,
        delay: &inst.delay,
        ig: &inst.ig,
        views: &inst.views,
        true_gains: Some(&inst.true_gains),
        a_hat: Some(&a_hat),
        b_hat: Some(&b_hat),
        gains_hat: Some(&gains_hat),
    };
    match run_closed_loop(&ctx, ControllerKind::CeDecentralized, t_eval, seed) {
        Ok(run) if run.cost.is_finite() => {
            record.j_hat = Some(run.cost);
            record.subopt = Some(run.cost - inst.j_star);
        }
        Ok(_) => record.status = TrialStatus::NonFiniteCost,
        Err(_) => record.status = TrialStatus::NonFiniteCost,
    }
    record
}

/// Quartiles (25/50/75%) by linear interpolation on the sorted sample.
pub fn quartiles(values: &[f64]) -> Option<[f64; 3]> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let at = |p: f64| -> f64 {
        let h = (v.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        if lo + 1 < v.len() {
            v[lo] + (v[lo + 1] - v[lo]) * frac
        } else {
            v[lo]
        }
    };
    Some([at(0.25), at(0.5), at(0.75)])
}

/// Least-squares slope of `ln y` against `ln x` over points with positive,
/// finite `y`.  Returns the slope and the number of points used.
pub fn log_log_slope(points: &[(f64, f64)]) -> (Option<f64>, usize) {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if usable.len() < 2 {
        return (None, usable.len());
    }
    let n = usable.len() as f64;
    let sx: f64 = usable.iter().map(|(x, _)| x).sum();
    let sy: f64 = usable.iter().map(|(_, y)| y).sum();
    let sxx: f64 = usable.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = usable.iter().map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return (None, usable.len());
    }
    (Some((n * sxy - sx * sy) / denom), usable.len())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSummary {
    pub n_samples: usize,
    pub ok: usize,
    pub failed: usize,
    pub est_error_quartiles: Option<[f64; 3]>,
    pub subopt_quartiles: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub per_n: Vec<GridSummary>,
    pub est_error_slope: Option<f64>,
    pub est_error_slope_points: usize,
    pub subopt_slope: Option<f64>,
    pub subopt_slope_points: usize,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub records: Vec<ExperimentRecord>,
    pub summary: SweepSummary,
}

/// Resampled-dynamics variant of an instance, sharing the topology, cost
/// matrices and noise level.
fn per_trial_instance(base: &Instance, rho_target: f64, seed: u64) -> Option<Instance> {
    let (a, b) = crate::lti::random_dynamics(&base.graph, &base.model.partition, rho_target, seed);
    let model = SystemModel::new(
        base.model.partition.clone(),
        a,
        b,
        base.model.q.clone(),
        base.model.r.clone(),
        base.model.sigma_w,
    )
    .ok()?;
    Instance::prepare(base.graph.clone(), model).ok()
}

/// Runs the full grid.  Trials execute in parallel with independent seeds;
/// records come back in deterministic `(N, trial)` order.  In per-trial
/// mode each trial's dynamics are redrawn from its seed before the
/// pipeline runs.
pub fn run_sweep(inst: &Instance, config: &ExperimentConfig) -> SweepResult {
    let trial_instances: Vec<Option<Instance>> = if config.per_trial_systems {
        (0..config.trials)
            .into_par_iter()
            .map(|trial| {
                per_trial_instance(inst, config.rho_target, config.base_seed + trial as u64)
            })
            .collect()
    } else {
        Vec::new()
    };
    let jobs: Vec<(usize, usize)> = config
        .n_grid
        .iter()
        .flat_map(|&n| (0..config.trials).map(move |trial| (n, trial)))
        .collect();
    let records: Vec<ExperimentRecord> = jobs
        .par_iter()
        .map(|&(n, trial)| {
            let seed = config.base_seed + trial as u64;
            let target = if config.per_trial_systems {
                trial_instances[trial].as_ref()
            } else {
                Some(inst)
            };
            let mut r = match target {
                Some(target) => run_pipeline(
                    target,
                    n,
                    config.sigma_u,
                    config.lambda,
                    config.t_eval,
                    seed,
                    config.use_true_model,
                ),
                // the trial's own true system failed to synthesize
                None => ExperimentRecord {
                    n_samples: n,
                    trial,
                    seed,
                    status: TrialStatus::SynthesisFailed,
                    est_error: f64::NAN,
                    j_hat: None,
                    j_star: f64::NAN,
                    j_tilde: None,
                    subopt: None,
                },
            };
            r.trial = trial;
            r
        })
        .collect();
    let summary = summarize(&config.n_grid, &records);
    SweepResult { records, summary }
}

/// Per-N quartiles over successful trials plus log-log slopes of medians.
pub fn summarize(n_grid: &[usize], records: &[ExperimentRecord]) -> SweepSummary {
    let mut per_n = Vec::new();
    let mut est_pts = Vec::new();
    let mut sub_pts = Vec::new();
    for &n in n_grid {
        let ok: Vec<&ExperimentRecord> = records
            .iter()
            .filter(|r| r.n_samples == n && r.status == TrialStatus::Ok)
            .collect();
        let failed = records
            .iter()
            .filter(|r| r.n_samples == n && r.status != TrialStatus::Ok)
            .count();
        let est: Vec<f64> = ok.iter().map(|r| r.est_error).collect();
        let sub: Vec<f64> = ok.iter().filter_map(|r| r.subopt).collect();
        let est_q = quartiles(&est);
        let sub_q = quartiles(&sub);
        if let Some(q) = est_q {
            est_pts.push((n as f64, q[1]));
        }
        if let Some(q) = sub_q {
            sub_pts.push((n as f64, q[1]));
        }
        per_n.push(GridSummary {
            n_samples: n,
            ok: ok.len(),
            failed,
            est_error_quartiles: est_q,
            subopt_quartiles: sub_q,
        });
    }
    let (est_error_slope, est_error_slope_points) = log_log_slope(&est_pts);
    let (subopt_slope, subopt_slope_points) = log_log_slope(&sub_pts);
    SweepSummary {
        per_n,
        est_error_slope,
        est_error_slope_points,
        subopt_slope,
        subopt_slope_points,
    }
}

const RECORDS_SCHEMA: &str = "# dlqr-sweep-records v1";

/// Records as CSV with a versioned schema comment line.
pub fn records_to_csv(records: &[ExperimentRecord]) -> String {
    let mut out = String::new();
    out.push_str(RECORDS_SCHEMA);
    out.push('\n');
    out.push_str("n,trial,seed,status,est_error,j_hat,j_star,j_tilde,subopt\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.n_samples,
            r.trial,
            r.seed,
            r.status,
            r.est_error,
            opt(r.j_hat),
            r.j_star,
            opt(r.j_tilde),
            opt(r.subopt),
        ));
    }
    out
}

/// Evaluates every bound right-hand side at one injected error level and
/// attaches the cheap direction-only measurements: the per-node gain and
/// cost-to-go perturbations under `A + eps U`, `B + eps V` with unit-norm
/// directions, and the closed-form cost gap of the perturbed gains.
pub fn bounds_report_at_eps(inst: &Instance, eps: f64, phi: f64) -> Result<BoundReport, BoundsError> {
    let (c, analysis) = inst.constants()?;
    let n = inst.model.n();
    let m = inst.model.m();
    // fixed unit-norm perturbation directions
    let mut u = nalgebra::DMatrix::from_fn(n, n, |i, j| ((1 + i * n + j) as f64).sin());
    u /= spectral_norm(&u);
    let mut v = nalgebra::DMatrix::from_fn(n, m, |i, j| ((2 + i * m + j) as f64).cos());
    v /= spectral_norm(&v);
    let a_hat = &inst.model.a + eps * u;
    let b_hat = &inst.model.b + eps * v;

    let mut report = BoundReport::default();
    report.push_info("zeta-b", analysis.zeta_b);
    report.push_info("eps-bar", analysis.eps_bar);

    let gains_hat = synthesize_gains(
        &a_hat,
        &b_hat,
        &inst.model.q,
        &inst.model.r,
        &inst.ig,
        &inst.model.partition,
        DEFAULT_TOL,
        Provenance::Estimate,
    );

    if let Ok(gains_hat) = &gains_hat {
        for node in 0..inst.ig.len() {
            let depth = inst.ig.depth(node);
            let mut node_report = riccati_perturbation_bounds(&c, eps, depth);
            let dp = spectral_norm(&(&gains_hat.p[node] - &inst.true_gains.p[node]));
            let dk = spectral_norm(&(&gains_hat.k[node] - &inst.true_gains.k[node]));
            let (pn, kn) = if depth == 0 {
                ("root-p-perturbation", "root-k-perturbation")
            } else {
                ("chain-p-perturbation", "chain-k-perturbation")
            };
            node_report.attach(pn, dp, None);
            node_report.attach(kn, dk, None);
            for mut e in node_report.entries {
                e.name = format!("{}:{}", e.name, inst.ig.set(node));
                report.entries.push(e);
            }
        }
    }

    let mut sub = suboptimality_bounds(&c, &analysis, eps, phi);
    if let Ok(gains_hat) = &gains_hat {
        if let Ok((_, j_tilde)) = tilde_p_and_cost(
            gains_hat,
            &inst.model.a,
            &inst.model.b,
            &inst.model.q,
            &inst.model.r,
            &inst.ig,
            &inst.model.partition,
            inst.model.sigma_w,
            DEFAULT_TOL,
        ) {
            sub.attach("jtilde-minus-jstar", j_tilde - inst.j_star, None);
        }
    }
    report.merge(sub);
    Ok(report)
}
