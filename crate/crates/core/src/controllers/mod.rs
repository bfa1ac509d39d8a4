//! Controller runtimes.
//!
//! Four policies share one internal-state machine over the information
//! graph: the optimal policy (true gains on the true model), the
//! certainty-equivalent policy in both a centralized reference form and the
//! faithful per-agent form, and the analysis policy that runs estimated
//! gains on true internal states.

mod decentralized;

pub use decentralized::{AgentMemory, DecentralizedAgent, VisibleStates};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lti::{empirical_cost, rng_stream, streams, submatrix, SystemModel, Trajectory};
use crate::riccati::GainSet;
use crate::topology::{AgentView, DelayMatrix, InfoGraph, NodeIdx};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("state x_{agent}({time}) is outside the visible window")]
    MissingState { agent: usize, time: i64 },
    #[error("internal state for node {node} at time {time} is not derivable from memory")]
    InternalStateUnavailable { node: String, time: i64 },
    #[error("vector has dimension {got}, expected {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("controller kind {0} requires gains that were not supplied")]
    MissingGains(&'static str),
    #[error(transparent)]
    Lti(#[from] crate::lti::LtiError),
}

/// Per-node internal states, indexed like the information graph's nodes.
pub type InternalStateMap = Vec<DVector<f64>>;

/// Precomputed machinery for the internal-state recursion
/// `zeta_s(t+1) = sum_{r -> s} (A_sr + B_sr K_r) zeta_r(t) + I_{s,{j}} w_j(t)`
/// and the policy `u_i(t) = sum_{r ∋ i} I_{{i},r} K_r zeta_r(t)`.
///
/// The same kernel drives every policy; what changes is which model supplies
/// the mixing matrices and which gain set is plugged in.
#[derive(Debug, Clone)]
pub struct PolicyKernel {
    /// Per node `s`: predecessors `(r, A_sr + B_sr K_r)`, the self loop
    /// included for roots.
    mixing: Vec<Vec<(NodeIdx, DMatrix<f64>)>>,
    /// Per leaf: `(global state offset of the generating agent, offset of
    /// its block inside the leaf, block length)`.
    injection: Vec<Option<(usize, usize, usize)>>,
    /// Per agent `i`: `(node r containing i, rows of K_r for i's inputs)`.
    policy: Vec<Vec<(NodeIdx, DMatrix<f64>)>>,
    /// Per node: `(global state offset, offset within node, len)` per member.
    embedding: Vec<Vec<(usize, usize, usize)>>,
    node_state_dims: Vec<usize>,
    input_dims: Vec<usize>,
    n: usize,
    m: usize,
}

impl PolicyKernel {
    /// Builds the kernel from the recursion's system matrices (true or
    /// estimated) and a gain set over the same information graph.
    pub fn new(
        ig: &InfoGraph,
        partition: &crate::lti::Partition,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        gains: &GainSet,
    ) -> Self {
        let nd = partition.state_dims();
        let md = partition.input_dims();
        let mut mixing = Vec::with_capacity(ig.len());
        let mut injection = Vec::with_capacity(ig.len());
        let mut embedding = Vec::with_capacity(ig.len());
        for s in 0..ig.len() {
            let s_set = ig.set(s);
            let mut preds: Vec<NodeIdx> = ig.children(s).to_vec();
            if ig.is_root(s) {
                preds.push(s);
            }
            preds.sort_unstable();
            let edges = preds
                .into_iter()
                .map(|r| {
                    let r_set = ig.set(r);
                    let a_sr = submatrix(a, s_set, r_set, nd, nd).unwrap();
                    let b_sr = submatrix(b, s_set, r_set, nd, md).unwrap();
                    (r, a_sr + b_sr * &gains.k[r])
                })
                .collect();
            mixing.push(edges);
            injection.push(ig.generator(s).map(|j| {
                let off = partition.state_offset_within(s_set, j).unwrap();
                (partition.state_range(j).start, off, nd[j])
            }));
            embedding.push(
                s_set
                    .members()
                    .iter()
                    .map(|&aid| {
                        (
                            partition.state_range(aid).start,
                            partition.state_offset_within(s_set, aid).unwrap(),
                            nd[aid],
                        )
                    })
                    .collect(),
            );
        }
        let mut policy = Vec::with_capacity(partition.p());
        for (i, &mi) in md.iter().enumerate() {
            let mut rows = Vec::new();
            for r in ig.nodes_containing(i) {
                let off = partition.input_offset_within(ig.set(r), i).unwrap();
                rows.push((r, gains.k[r].rows(off, mi).into_owned()));
            }
            policy.push(rows);
        }
        let node_state_dims = (0..ig.len())
            .map(|v| partition.state_dim_of(ig.set(v)))
            .collect();
        Self {
            mixing,
            injection,
            policy,
            embedding,
            node_state_dims,
            input_dims: md.to_vec(),
            n: partition.n(),
            m: partition.m(),
        }
    }

    pub fn zero_state(&self) -> InternalStateMap {
        self.node_state_dims
            .iter()
            .map(|&d| DVector::zeros(d))
            .collect()
    }

    /// Advances every internal state one step, injecting the block of `w`
    /// belonging to each leaf's generating agent.
    pub fn advance(&self, zeta: &InternalStateMap, w: &DVector<f64>) -> InternalStateMap {
        let mut next = self.zero_state();
        for (s, edges) in self.mixing.iter().enumerate() {
            for (r, m) in edges {
                next[s] += m * &zeta[*r];
            }
            if let Some((src_off, off, len)) = self.injection[s] {
                for k in 0..len {
                    next[s][off + k] += w[src_off + k];
                }
            }
        }
        next
    }

    /// Assembles the stacked control `u(t)` from the internal states.
    pub fn control(&self, zeta: &InternalStateMap) -> DVector<f64> {
        let mut u = DVector::zeros(self.m);
        let mut off = 0;
        for (i, rows) in self.policy.iter().enumerate() {
            for (r, pi) in rows {
                let contrib = pi * &zeta[*r];
                for k in 0..self.input_dims[i] {
                    u[off + k] += contrib[k];
                }
            }
            off += self.input_dims[i];
        }
        u
    }

    /// Policy blocks `(r, I_{{i},r} K_r)` for one agent.
    pub fn policy_rows(&self, agent: usize) -> &[(NodeIdx, DMatrix<f64>)] {
        &self.policy[agent]
    }

    /// Mixing edges `(r, A_sr + B_sr K_r)` into node `s`.
    pub fn mixing_edges(&self, s: NodeIdx) -> &[(NodeIdx, DMatrix<f64>)] {
        &self.mixing[s]
    }

    /// Injection slot of a leaf: `(agent, offset within node, len)`.
    pub fn injection_slot(&self, s: NodeIdx) -> Option<(usize, usize, usize)> {
        self.injection[s]
    }

    pub fn input_dim(&self, agent: usize) -> usize {
        self.input_dims[agent]
    }

    pub fn total_inputs(&self) -> usize {
        self.m
    }

    /// Reconstructs the global state as `sum_s I_{V,s} zeta_s`.
    pub fn state_decomposition(&self, zeta: &InternalStateMap) -> DVector<f64> {
        let mut x = DVector::zeros(self.n);
        for (s, blocks) in self.embedding.iter().enumerate() {
            for &(gl, loc, len) in blocks {
                for k in 0..len {
                    x[gl + k] += zeta[s][loc + k];
                }
            }
        }
        x
    }
}

/// Internal-state controller fed the true disturbances: the optimal policy
/// when built from true gains, the analysis policy when built from
/// estimated gains on the true model.
#[derive(Debug, Clone)]
pub struct InternalStateController {
    kernel: PolicyKernel,
    zeta: InternalStateMap,
}

impl InternalStateController {
    /// Optimal policy: true model matrices and true gains.
    pub fn optimal(
        ig: &InfoGraph,
        model: &SystemModel,
        gains: &GainSet,
    ) -> Result<Self, ControllerError> {
        if gains.provenance != crate::riccati::Provenance::TrueModel {
            return Err(ControllerError::MissingGains("optimal"));
        }
        let kernel = PolicyKernel::new(ig, &model.partition, &model.a, &model.b, gains);
        let zeta = kernel.zero_state();
        Ok(Self { kernel, zeta })
    }

    /// Analysis policy: estimated gains mixed with the true model and driven
    /// by the true disturbances.
    pub fn tilde(
        ig: &InfoGraph,
        model: &SystemModel,
        gains_hat: &GainSet,
    ) -> Result<Self, ControllerError> {
        let kernel = PolicyKernel::new(ig, &model.partition, &model.a, &model.b, gains_hat);
        let zeta = kernel.zero_state();
        Ok(Self { kernel, zeta })
    }

    pub fn kernel(&self) -> &PolicyKernel {
        &self.kernel
    }

    pub fn zeta(&self) -> &InternalStateMap {
        &self.zeta
    }

    /// Emits `u(t)` from the current internal states, then advances them
    /// with the disturbance injected between `t` and `t+1`.
    pub fn step(&mut self, w: &DVector<f64>) -> DVector<f64> {
        let u = self.kernel.control(&self.zeta);
        self.zeta = self.kernel.advance(&self.zeta, w);
        u
    }
}

/// Zeroes every block (i, j) of a state-indexed matrix whose delay exceeds
/// one step, leaving exactly the blocks the plant equation may read.
pub fn mask_to_neighborhoods(
    m: &DMatrix<f64>,
    d: &DelayMatrix,
    partition: &crate::lti::Partition,
    input_cols: bool,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..partition.p() {
        for j in 0..partition.p() {
            if !matches!(d.get(i, j), Some(delay) if delay <= 1) {
                continue;
            }
            let rows = partition.state_range(i);
            let cols = if input_cols {
                partition.input_range(j)
            } else {
                partition.state_range(j)
            };
            for r in rows.clone() {
                for c in cols.clone() {
                    out[(r, c)] = m[(r, c)];
                }
            }
        }
    }
    out
}

/// Centralized reference implementation of the certainty-equivalent policy:
/// one machine that sees the full state, estimates disturbances through the
/// neighborhood-restricted model rows, and advances every internal state.
#[derive(Debug, Clone)]
pub struct CeCentralizedController {
    kernel: PolicyKernel,
    a_masked: DMatrix<f64>,
    b_masked: DMatrix<f64>,
    zeta: InternalStateMap,
    prev_x: Option<DVector<f64>>,
    prev_u: Option<DVector<f64>>,
    last_w_hat: Option<DVector<f64>>,
}

impl CeCentralizedController {
    pub fn new(
        ig: &InfoGraph,
        d: &DelayMatrix,
        model: &SystemModel,
        a_hat: &DMatrix<f64>,
        b_hat: &DMatrix<f64>,
        gains_hat: &GainSet,
    ) -> Self {
        let kernel = PolicyKernel::new(ig, &model.partition, a_hat, b_hat, gains_hat);
        let zeta = kernel.zero_state();
        Self {
            kernel,
            a_masked: mask_to_neighborhoods(a_hat, d, &model.partition, false),
            b_masked: mask_to_neighborhoods(b_hat, d, &model.partition, true),
            zeta,
            prev_x: None,
            prev_u: None,
            last_w_hat: None,
        }
    }

    pub fn kernel(&self) -> &PolicyKernel {
        &self.kernel
    }

    /// Internal states at the time of the last processed step.
    pub fn zeta(&self) -> &InternalStateMap {
        &self.zeta
    }

    /// Disturbance estimate formed on the previous call, for tests.
    pub fn last_w_hat(&self) -> Option<&DVector<f64>> {
        self.last_w_hat.as_ref()
    }

    /// Consumes the newly observed state `x(t)` and emits `u(t)`.
    ///
    /// On the first call the internal states stay at their zero
    /// initialization (the pre-start disturbance estimates are zero); on
    /// later calls the previous step's disturbance estimate
    /// `w^(t-1) = x(t) - A^ x(t-1) - B^ u(t-1)` advances them first.
    pub fn step(&mut self, x_now: &DVector<f64>) -> Result<DVector<f64>, ControllerError> {
        if x_now.len() != self.a_masked.nrows() {
            return Err(ControllerError::ShapeMismatch {
                got: x_now.len(),
                want: self.a_masked.nrows(),
            });
        }
        if let (Some(xp), Some(up)) = (&self.prev_x, &self.prev_u) {
            let w_hat = x_now - &self.a_masked * xp - &self.b_masked * up;
            self.zeta = self.kernel.advance(&self.zeta, &w_hat);
            self.last_w_hat = Some(w_hat);
        }
        let u = self.kernel.control(&self.zeta);
        self.prev_x = Some(x_now.clone());
        self.prev_u = Some(u.clone());
        Ok(u)
    }
}

/// Which controller drives a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Optimal,
    CeCentralized,
    CeDecentralized,
    Tilde,
    /// Open loop: i.i.d. Gaussian inputs with the given std, as played
    /// during identification experiments.
    ExternalInputs { sigma_u: f64 },
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Optimal => write!(f, "optimal"),
            Self::CeCentralized => write!(f, "ce-centralized"),
            Self::CeDecentralized => write!(f, "ce-decentralized"),
            Self::Tilde => write!(f, "tilde"),
            Self::ExternalInputs { .. } => write!(f, "external-inputs"),
        }
    }
}

/// Outcome of a closed-loop run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub trajectory: Trajectory,
    pub cost: f64,
    /// Peak per-agent memory cardinality, decentralized runs only.
    pub memory_peak: Option<usize>,
}

/// Everything a run needs besides the controller choice.
pub struct LoopContext<'a> {
    pub model: &'a SystemModel,
    pub delay: &'a DelayMatrix,
    pub ig: &'a InfoGraph,
    pub views: &'a [AgentView],
    pub true_gains: Option<&'a GainSet>,
    pub a_hat: Option<&'a DMatrix<f64>>,
    pub b_hat: Option<&'a DMatrix<f64>>,
    pub gains_hat: Option<&'a GainSet>,
}

/// Steps the plant and the chosen controller jointly for `horizon` steps.
///
/// The disturbance sequence is drawn from a fixed stream of the seed, so
/// runs with different controllers but the same seed see identical noise
/// and can be compared pathwise.  Decentralized agents receive exactly
/// their visible window each step.
pub fn run_closed_loop(
    ctx: &LoopContext<'_>,
    kind: ControllerKind,
    horizon: usize,
    seed: u64,
) -> Result<RunResult, ControllerError> {
    let model = ctx.model;
    let (n, _m) = (model.n(), model.m());
    let noise_stream = match kind {
        ControllerKind::ExternalInputs { .. } => streams::COLLECT_NOISE,
        _ => streams::EVAL_NOISE,
    };
    let mut w_rng = rng_stream(seed, noise_stream);
    let mut u_rng = rng_stream(seed, streams::COLLECT_INPUT);
    let std_normal = StandardNormal;

    enum Driver {
        Internal(InternalStateController),
        Ce(CeCentralizedController),
        Agents(Vec<DecentralizedAgent>),
        External(f64),
    }

    let mut driver = match kind {
        ControllerKind::Optimal => Driver::Internal(InternalStateController::optimal(
            ctx.ig,
            model,
            ctx.true_gains.ok_or(ControllerError::MissingGains("optimal"))?,
        )?),
        ControllerKind::Tilde => Driver::Internal(InternalStateController::tilde(
            ctx.ig,
            model,
            ctx.gains_hat.ok_or(ControllerError::MissingGains("tilde"))?,
        )?),
        ControllerKind::CeCentralized => Driver::Ce(CeCentralizedController::new(
            ctx.ig,
            ctx.delay,
            model,
            ctx.a_hat.ok_or(ControllerError::MissingGains("ce-centralized"))?,
            ctx.b_hat.ok_or(ControllerError::MissingGains("ce-centralized"))?,
            ctx.gains_hat.ok_or(ControllerError::MissingGains("ce-centralized"))?,
        )),
        ControllerKind::CeDecentralized => {
            let a_hat = ctx.a_hat.ok_or(ControllerError::MissingGains("ce-decentralized"))?;
            let b_hat = ctx.b_hat.ok_or(ControllerError::MissingGains("ce-decentralized"))?;
            let gains = ctx.gains_hat.ok_or(ControllerError::MissingGains("ce-decentralized"))?;
            let agents = ctx
                .views
                .iter()
                .map(|view| {
                    DecentralizedAgent::new(ctx.ig, ctx.delay, &model.partition, view, a_hat, b_hat, gains)
                })
                .collect();
            Driver::Agents(agents)
        }
        ControllerKind::ExternalInputs { sigma_u } => Driver::External(sigma_u),
    };

    let mut x = vec![DVector::zeros(n)];
    let mut us = Vec::with_capacity(horizon);
    let mut ws = Vec::with_capacity(horizon);
    let mut memory_peak = None;
    for t in 0..horizon {
        let u = match &mut driver {
            Driver::Internal(_) => DVector::zeros(0), // filled after w is drawn
            Driver::Ce(c) => c.step(&x[t])?,
            Driver::Agents(agents) => {
                let mut stacked = DVector::zeros(model.m());
                for agent in agents.iter_mut() {
                    let window =
                        VisibleStates::window(&model.partition, ctx.delay, agent.agent_id(), t as i64, &x);
                    let ui = agent.step(t as i64, &window)?;
                    let range = model.partition.input_range(agent.agent_id());
                    stacked.rows_mut(range.start, range.len()).copy_from(&ui);
                }
                stacked
            }
            Driver::External(sigma_u) => {
                let s = *sigma_u;
                DVector::from_fn(model.m(), |_, _| {
                    let g: f64 = std_normal.sample(&mut u_rng);
                    s * g
                })
            }
        };
        let w = DVector::from_fn(n, |_, _| {
            let g: f64 = std_normal.sample(&mut w_rng);
            model.sigma_w * g
        });
        let u = match &mut driver {
            Driver::Internal(c) => c.step(&w),
            _ => u,
        };
        let next = &model.a * &x[t] + &model.b * &u + &w;
        x.push(next);
        us.push(u);
        ws.push(w);
    }
    if let Driver::Agents(agents) = &driver {
        memory_peak = agents.iter().map(|a| a.memory_peak()).max();
    }
    let trajectory = Trajectory { x, u: us, w: ws };
    let cost = empirical_cost(&trajectory, &model.q, &model.r);
    Ok(RunResult {
        trajectory,
        cost,
        memory_peak,
    })
}

/// Run manifest: enough to re-execute a closed-loop run bit-identically
/// against the same system description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub controller: ControllerKind,
    pub horizon: usize,
    pub seed: u64,
    pub cost: f64,
}

/// Draws one plant disturbance sequence the way `run_closed_loop` does, for
/// oracle tests that unroll the recursions by hand.
pub fn noise_sequence(model: &SystemModel, horizon: usize, seed: u64, stream: u64) -> Vec<DVector<f64>> {
    let mut rng = rng_stream(seed, stream);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..horizon)
        .map(|_| DVector::from_fn(model.n(), |_, _| model.sigma_w * normal.sample(&mut rng)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{generate_random_system, Partition};
    use crate::riccati::{synthesize_gains, Provenance, DEFAULT_TOL};
    use crate::topology::{
        agent_view, build_information_graph, compute_delay_matrix, DirectedDelayGraph, Edge,
    };
    use approx::assert_relative_eq;

    fn example_graph() -> DirectedDelayGraph {
        DirectedDelayGraph::new(
            3,
            vec![
                Edge { from: 1, to: 0, delay: 0 },
                Edge { from: 1, to: 2, delay: 1 },
                Edge { from: 2, to: 1, delay: 1 },
            ],
        )
        .unwrap()
    }

    struct Setup {
        model: SystemModel,
        delay: crate::topology::DelayMatrix,
        ig: InfoGraph,
        views: Vec<AgentView>,
        gains: GainSet,
    }

    fn example_setup(seed: u64) -> Setup {
        let g = example_graph();
        let delay = compute_delay_matrix(&g);
        let ig = build_information_graph(&delay);
        let model =
            generate_random_system(&g, Partition::scalar(3), 0.8, 2.0, 5.0, 1.0, seed).unwrap();
        let views = (0..3).map(|i| agent_view(&ig, &delay, i)).collect();
        let gains = synthesize_gains(
            &model.a, &model.b, &model.q, &model.r, &ig, &model.partition, DEFAULT_TOL,
            Provenance::TrueModel,
        )
        .unwrap();
        Setup {
            model,
            delay,
            ig,
            views,
            gains,
        }
    }

    fn ctx<'a>(s: &'a Setup, est: Option<&'a GainSet>) -> LoopContext<'a> {
        LoopContext {
            model: &s.model,
            delay: &s.delay,
            ig: &s.ig,
            views: &s.views,
            true_gains: Some(&s.gains),
            a_hat: Some(&s.model.a),
            b_hat: Some(&s.model.b),
            gains_hat: est.or(Some(&s.gains)),
        }
    }

    #[test]
    fn zero_state_zero_disturbance_gives_zero_control() {
        let s = example_setup(1);
        let mut c = InternalStateController::optimal(&s.ig, &s.model, &s.gains).unwrap();
        let u = c.step(&DVector::zeros(3));
        assert_eq!(u, DVector::zeros(3));
        assert!(c.zeta().iter().all(|z| z.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_node_reduces_to_centralized_lqr() {
        let g = DirectedDelayGraph::new(1, vec![]).unwrap();
        let delay = compute_delay_matrix(&g);
        let ig = build_information_graph(&delay);
        let part = Partition::scalar(1);
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::identity(1, 1);
        let r = DMatrix::identity(1, 1);
        let model = SystemModel::new(part.clone(), a, b, q, r, 1.0).unwrap();
        let gains = synthesize_gains(
            &model.a, &model.b, &model.q, &model.r, &ig, &part, DEFAULT_TOL,
            Provenance::TrueModel,
        )
        .unwrap();
        let k = gains.k[0][(0, 0)];
        let mut c = InternalStateController::optimal(&ig, &model, &gains).unwrap();
        // step the plant by hand; zeta must track x exactly and u = K x
        let ws = noise_sequence(&model, 20, 5, 0);
        let mut x = DVector::zeros(1);
        for w in &ws {
            let zeta_before = c.zeta()[0].clone();
            assert_relative_eq!(zeta_before[0], x[0], epsilon = 1e-12);
            let u = c.step(w);
            assert_relative_eq!(u[0], k * x[0], epsilon = 1e-12);
            x = &model.a * x + &model.b * u + w;
        }
    }

    #[test]
    fn policy_blocks_match_structure() {
        let s = example_setup(2);
        let kernel = PolicyKernel::new(&s.ig, &s.model.partition, &s.model.a, &s.model.b, &s.gains);
        // agent 2 (index 1) draws from nodes {1,2} and {1,2,3}
        let idx = |members: &[usize]| {
            s.ig.nodes()
                .iter()
                .position(|t| t.members() == members)
                .unwrap()
        };
        let nodes: Vec<NodeIdx> = kernel.policy_rows(1).iter().map(|(r, _)| *r).collect();
        assert_eq!(nodes, vec![idx(&[0, 1]), idx(&[0, 1, 2])]);
        // the blocks are the matching rows of K_r
        for (r, pi) in kernel.policy_rows(1) {
            let off = s
                .model
                .partition
                .input_offset_within(s.ig.set(*r), 1)
                .unwrap();
            assert_eq!(pi, &s.gains.k[*r].rows(off, 1).into_owned());
        }
    }

    #[test]
    fn optimal_state_decomposition_tracks_plant() {
        let s = example_setup(3);
        let mut c = InternalStateController::optimal(&s.ig, &s.model, &s.gains).unwrap();
        let ws = noise_sequence(&s.model, 10_000, 11, 0);
        let mut x = DVector::zeros(3);
        let mut drift: f64 = 0.0;
        for w in &ws {
            let rebuilt = c.kernel().state_decomposition(c.zeta());
            drift = drift.max((rebuilt - &x).norm());
            let u = c.step(w);
            x = &s.model.a * x + &s.model.b * u + w;
        }
        assert!(drift <= 1e-10, "decomposition drift {drift}");
    }

    #[test]
    fn tilde_equals_optimal_for_true_gains() {
        let s = example_setup(4);
        let c = ctx(&s, None);
        let opt = run_closed_loop(&c, ControllerKind::Optimal, 100, 9).unwrap();
        let tilde = run_closed_loop(&c, ControllerKind::Tilde, 100, 9).unwrap();
        for t in 0..100 {
            assert!((&opt.trajectory.u[t] - &tilde.trajectory.u[t]).norm() <= 1e-12);
        }
        assert_relative_eq!(opt.cost, tilde.cost, epsilon = 1e-12);
    }

    #[test]
    fn ce_with_exact_model_recovers_disturbances_and_optimal_inputs() {
        let s = example_setup(5);
        let c = ctx(&s, None);
        let opt = run_closed_loop(&c, ControllerKind::Optimal, 150, 21).unwrap();
        let ce = run_closed_loop(&c, ControllerKind::CeCentralized, 150, 21).unwrap();
        for t in 0..150 {
            assert!(
                (&opt.trajectory.u[t] - &ce.trajectory.u[t]).norm() <= 1e-9,
                "inputs diverge at t={t}"
            );
        }
        // disturbance estimates are exact when the model is exact
        let mut ctrl = CeCentralizedController::new(
            &s.ig, &s.delay, &s.model, &s.model.a, &s.model.b, &s.gains,
        );
        let mut x = DVector::zeros(3);
        let ws = noise_sequence(&s.model, 30, 2, 0);
        for w in &ws {
            let u = ctrl.step(&x).unwrap();
            x = &s.model.a * &x + &s.model.b * &u + w;
        }
        let _ = ctrl.step(&x).unwrap();
        let w_hat = ctrl.last_w_hat().unwrap();
        assert!((w_hat - &ws[29]).norm() <= 1e-12);
    }

    #[test]
    fn first_ce_step_is_zero_and_w_hat_equals_state() {
        // x(1) = w(0) when u(0) = 0 and x(0) = 0, so the first disturbance
        // estimate under an exact model equals x(1) itself.
        let s = example_setup(6);
        let mut ctrl = CeCentralizedController::new(
            &s.ig, &s.delay, &s.model, &s.model.a, &s.model.b, &s.gains,
        );
        let u0 = ctrl.step(&DVector::zeros(3)).unwrap();
        assert_eq!(u0, DVector::zeros(3));
        let w0 = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        let x1 = w0.clone();
        let _ = ctrl.step(&x1).unwrap();
        assert!((ctrl.last_w_hat().unwrap() - &w0).norm() <= 1e-12);
    }

    #[test]
    fn seed_replay_is_bit_identical() {
        let s = example_setup(7);
        let c = ctx(&s, None);
        let a = run_closed_loop(&c, ControllerKind::Optimal, 50, 13).unwrap();
        let b = run_closed_loop(&c, ControllerKind::Optimal, 50, 13).unwrap();
        for t in 0..=50 {
            assert_eq!(a.trajectory.x[t], b.trajectory.x[t]);
        }
        assert_eq!(a.cost, b.cost);
    }

    #[test]
    fn noise_free_run_costs_zero() {
        let mut s = example_setup(8);
        s.model.sigma_w = 0.0;
        let c = ctx(&s, None);
        let run = run_closed_loop(&c, ControllerKind::Optimal, 100, 1).unwrap();
        assert_relative_eq!(run.cost, 0.0);
    }

    #[test]
    fn external_inputs_drive_the_plant() {
        let s = example_setup(9);
        let c = ctx(&s, None);
        let run = run_closed_loop(
            &c,
            ControllerKind::ExternalInputs { sigma_u: 1.0 },
            50,
            3,
        )
        .unwrap();
        assert!(run.trajectory.u.iter().any(|u| u.norm() > 0.0));
        assert_relative_eq!(run.trajectory.recursion_residual(&s.model), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn masking_keeps_only_neighborhood_blocks() {
        let s = example_setup(10);
        let dense = DMatrix::from_fn(3, 3, |i, j| (1 + i * 3 + j) as f64);
        let masked = mask_to_neighborhoods(&dense, &s.delay, &s.model.partition, false);
        // delays: D_21 and D_31 are infinite, so blocks (2,1),(3,1) vanish
        assert_eq!(masked[(1, 0)], 0.0);
        assert_eq!(masked[(2, 0)], 0.0);
        assert_eq!(masked[(0, 0)], dense[(0, 0)]);
        assert_eq!(masked[(0, 2)], dense[(0, 2)]);
        assert_eq!(masked[(2, 1)], dense[(2, 1)]);
    }
}
