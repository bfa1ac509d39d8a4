//! Faithful per-agent runtime of the certainty-equivalent policy.
//!
//! Each agent sees only a sliding window of delayed neighbor states, keeps a
//! bounded memory of past internal states, reconstructs the disturbance
//! estimates it needs from the window and locally re-derived inputs, and
//! emits exactly the same input sequence as the centralized reference.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};

use super::{ControllerError, PolicyKernel};
use crate::lti::Partition;
use crate::riccati::GainSet;
use crate::topology::{AgentView, DelayMatrix, InfoGraph, NodeIdx};

/// The state window `{x_j(k) : j visible, t - D_max - 1 <= k <= t - D_ij}`
/// an agent may read at step `t`.  Reads outside the window fail, and every
/// request is logged so tests can audit information-structure compliance.
#[derive(Debug)]
pub struct VisibleStates {
    agent: usize,
    entries: HashMap<(usize, i64), DVector<f64>>,
    log: RefCell<BTreeSet<(usize, i64)>>,
}

impl VisibleStates {
    /// Builds the window for agent `i` at step `t` from the state history
    /// `history[k] = x(k)`; times before the start are zero states.
    pub fn window(
        partition: &Partition,
        delay: &DelayMatrix,
        agent: usize,
        t: i64,
        history: &[DVector<f64>],
    ) -> Self {
        let d_max = delay.max_finite_delay() as i64;
        let mut entries = HashMap::new();
        for j in delay.visible_from(agent) {
            let d_ij = delay.get(agent, j).unwrap() as i64;
            let nj = partition.state_dims()[j];
            for k in (t - d_max - 1)..=(t - d_ij) {
                let xjk = if k < 0 {
                    DVector::zeros(nj)
                } else {
                    let range = partition.state_range(j);
                    history[k as usize].rows(range.start, range.len()).into_owned()
                };
                entries.insert((j, k), xjk);
            }
        }
        Self {
            agent,
            entries,
            log: RefCell::new(BTreeSet::new()),
        }
    }

    /// Window with explicit entries, for harnesses that deliberately
    /// withhold states.
    pub fn from_entries(agent: usize, entries: HashMap<(usize, i64), DVector<f64>>) -> Self {
        Self {
            agent,
            entries,
            log: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn agent(&self) -> usize {
        self.agent
    }

    /// Reads `x_j(k)`, recording the access.
    pub fn get(&self, j: usize, k: i64) -> Result<&DVector<f64>, ControllerError> {
        self.log.borrow_mut().insert((j, k));
        self.entries
            .get(&(j, k))
            .ok_or(ControllerError::MissingState { agent: j, time: k })
    }

    /// Every `(agent, time)` pair requested so far.
    pub fn accessed(&self) -> Vec<(usize, i64)> {
        self.log.borrow().iter().copied().collect()
    }

    pub fn contains(&self, j: usize, k: i64) -> bool {
        self.entries.contains_key(&(j, k))
    }

    pub fn remove(&mut self, j: usize, k: i64) -> Option<DVector<f64>> {
        self.entries.remove(&(j, k))
    }
}

/// Bounded rolling store of past internal states `zeta_s(k)`.
#[derive(Debug, Clone, Default)]
pub struct AgentMemory {
    entries: HashMap<(NodeIdx, i64), DVector<f64>>,
    peak: usize,
}

impl AgentMemory {
    pub fn get(&self, node: NodeIdx, k: i64) -> Option<&DVector<f64>> {
        self.entries.get(&(node, k))
    }

    pub fn insert(&mut self, node: NodeIdx, k: i64, value: DVector<f64>) {
        self.entries.insert((node, k), value);
        self.peak = self.peak.max(self.entries.len());
    }

    pub fn remove(&mut self, node: NodeIdx, k: i64) {
        self.entries.remove(&(node, k));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest cardinality ever held, including mid-step growth.
    pub fn peak(&self) -> usize {
        self.peak
    }

    /// Retained timestamps for one node, ascending.
    pub fn timestamps(&self, node: NodeIdx) -> Vec<i64> {
        let mut ks: Vec<i64> = self
            .entries
            .keys()
            .filter(|(s, _)| *s == node)
            .map(|(_, k)| *k)
            .collect();
        ks.sort_unstable();
        ks
    }

    /// Full contents keyed by `(node, time)`, for oracle comparisons.
    pub fn snapshot(&self) -> BTreeMap<(NodeIdx, i64), DVector<f64>> {
        self.entries.iter().map(|(k, v)| (*k, v.clone())).collect()
    }
}

/// The estimate's rows used to reconstruct one agent's disturbance:
/// `w^_j = x_j - A^_{j,N_j} x_{N_j} - B^_{j,N_j} u_{N_j}`.
#[derive(Debug, Clone)]
struct DisturbanceRows {
    neighbors: Vec<usize>,
    a_row: DMatrix<f64>,
    b_row: DMatrix<f64>,
}

/// One agent's controller: processes its leaves in decreasing-delay order,
/// reconstructs delayed disturbance estimates, advances its roots, emits
/// its input block and prunes expired memory.
#[derive(Debug)]
pub struct DecentralizedAgent {
    agent: usize,
    view: AgentView,
    kernel: PolicyKernel,
    w_hat_rows: HashMap<usize, DisturbanceRows>,
    is_leaf: Vec<bool>,
    node_dims: Vec<usize>,
    node_names: Vec<String>,
    state_dims: Vec<usize>,
    memory: AgentMemory,
    t: i64,
    d_max: i64,
}

impl DecentralizedAgent {
    pub fn new(
        ig: &InfoGraph,
        delay: &DelayMatrix,
        partition: &Partition,
        view: &AgentView,
        a_hat: &DMatrix<f64>,
        b_hat: &DMatrix<f64>,
        gains_hat: &GainSet,
    ) -> Self {
        let kernel = PolicyKernel::new(ig, partition, a_hat, b_hat, gains_hat);
        let mut w_hat_rows = HashMap::new();
        for &(_, j, _) in &view.ordered_leaves {
            let neigh = delay.neighborhood(j);
            let nj = partition.state_dims()[j];
            let row = partition.state_range(j);
            let n_cols: usize = neigh.iter().map(|&j1| partition.state_dims()[j1]).sum();
            let m_cols: usize = neigh.iter().map(|&j1| partition.input_dims()[j1]).sum();
            let mut a_row = DMatrix::zeros(nj, n_cols);
            let mut b_row = DMatrix::zeros(nj, m_cols);
            let mut nc = 0;
            let mut mc = 0;
            for &j1 in &neigh {
                let sc = partition.state_range(j1);
                a_row
                    .view_mut((0, nc), (nj, sc.len()))
                    .copy_from(&a_hat.view((row.start, sc.start), (nj, sc.len())));
                nc += sc.len();
                let ic = partition.input_range(j1);
                b_row
                    .view_mut((0, mc), (nj, ic.len()))
                    .copy_from(&b_hat.view((row.start, ic.start), (nj, ic.len())));
                mc += ic.len();
            }
            w_hat_rows.insert(
                j,
                DisturbanceRows {
                    neighbors: neigh,
                    a_row,
                    b_row,
                },
            );
        }

        let is_leaf = (0..ig.len()).map(|v| ig.is_leaf(v)).collect();
        let node_dims = (0..ig.len()).map(|v| partition.state_dim_of(ig.set(v))).collect();
        let node_names = ig.nodes().iter().map(|s| s.to_string()).collect();

        let d_max = view.d_max as i64;
        let mut memory = AgentMemory::default();
        for &(s, _, d_ij) in &view.ordered_leaves {
            for k in (-2 * d_max - 1)..=(-(d_ij as i64) - 1) {
                memory.insert(s, k, DVector::zeros(partition.state_dim_of(ig.set(s))));
            }
        }
        for &s in &view.roots {
            memory.insert(s, -d_max - 1, DVector::zeros(partition.state_dim_of(ig.set(s))));
        }

        Self {
            agent: view.agent,
            view: view.clone(),
            kernel,
            w_hat_rows,
            is_leaf,
            node_dims,
            node_names,
            state_dims: partition.state_dims().to_vec(),
            memory,
            t: 0,
            d_max,
        }
    }

    pub fn agent_id(&self) -> usize {
        self.agent
    }

    pub fn memory(&self) -> &AgentMemory {
        &self.memory
    }

    pub fn memory_len(&self) -> usize {
        self.memory.len()
    }

    pub fn memory_peak(&self) -> usize {
        self.memory.peak()
    }

    /// Resolves `zeta_node(k)` from memory or by unrolling the recursion
    /// through the node's predecessors.  Leaf states are never synthesized:
    /// they carry disturbance injections and must come from memory.
    fn zeta_at(
        &self,
        node: NodeIdx,
        k: i64,
        cache: &mut HashMap<(NodeIdx, i64), DVector<f64>>,
    ) -> Result<DVector<f64>, ControllerError> {
        if let Some(v) = self.memory.get(node, k) {
            return Ok(v.clone());
        }
        if let Some(v) = cache.get(&(node, k)) {
            return Ok(v.clone());
        }
        if self.is_leaf[node] || k < self.t - 2 * self.d_max - 1 {
            return Err(ControllerError::InternalStateUnavailable {
                node: self.node_names[node].clone(),
                time: k,
            });
        }
        let mut acc = DVector::zeros(self.node_dims[node]);
        for (r, m) in self.kernel.mixing_edges(node) {
            acc += m * self.zeta_at(*r, k - 1, cache)?;
        }
        cache.insert((node, k), acc.clone());
        Ok(acc)
    }

    /// Re-derives the input `u_{j1}(k)` another agent played, from the
    /// internal states this agent can already determine.
    fn derive_input(
        &self,
        j1: usize,
        k: i64,
        cache: &mut HashMap<(NodeIdx, i64), DVector<f64>>,
    ) -> Result<DVector<f64>, ControllerError> {
        let mut u = DVector::zeros(self.kernel.input_dim(j1));
        for (r, pi) in self.kernel.policy_rows(j1) {
            u += pi * self.zeta_at(*r, k, cache)?;
        }
        Ok(u)
    }

    /// Runs one step at time `t`, reading only the supplied window, and
    /// returns this agent's input block `u_i(t)`.
    pub fn step(
        &mut self,
        t: i64,
        visible: &VisibleStates,
    ) -> Result<DVector<f64>, ControllerError> {
        assert_eq!(t, self.t, "agent stepped out of order");
        let d_max = self.d_max;
        let mut cache: HashMap<(NodeIdx, i64), DVector<f64>> = HashMap::new();

        // Leaves in decreasing-delay order: reconstruct the delayed
        // disturbance estimate, then advance the leaf state one step.
        for idx in 0..self.view.ordered_leaves.len() {
            let (s, j, d_ij) = self.view.ordered_leaves[idx];
            let d_ij = d_ij as i64;
            let k_w = t - d_ij - 1;
            let nj = self.state_dims[j];
            let w_j = if k_w < -1 {
                DVector::zeros(nj)
            } else if k_w == -1 {
                visible.get(j, 0)?.clone()
            } else {
                let x_next = visible.get(j, k_w + 1)?.clone();
                let rows = &self.w_hat_rows[&j];
                let mut xs = DVector::zeros(rows.a_row.ncols());
                let mut off = 0;
                for &j1 in &rows.neighbors {
                    let xj1 = visible.get(j1, k_w)?;
                    xs.rows_mut(off, xj1.len()).copy_from(xj1);
                    off += xj1.len();
                }
                let mut us = DVector::zeros(rows.b_row.ncols());
                let mut off = 0;
                for &j1 in &rows.neighbors {
                    let uj1 = self.derive_input(j1, k_w, &mut cache)?;
                    us.rows_mut(off, uj1.len()).copy_from(&uj1);
                    off += uj1.len();
                }
                x_next - &rows.a_row * xs - &rows.b_row * us
            };

            let mut z = DVector::zeros(self.node_dims[s]);
            for (r, m) in self.kernel.mixing_edges(s) {
                z += m * self.zeta_at(*r, k_w, &mut cache)?;
            }
            let (_, goff, glen) = self
                .kernel
                .injection_slot(s)
                .expect("leaf carries an injection slot");
            for idx2 in 0..glen {
                z[goff + idx2] += w_j[idx2];
            }
            self.memory.insert(s, t - d_ij, z);
        }

        // Roots advance one step, to time t - D_max.
        for idx in 0..self.view.roots.len() {
            let s = self.view.roots[idx];
            let mut z = DVector::zeros(self.node_dims[s]);
            for (r, m) in self.kernel.mixing_edges(s) {
                z += m * self.zeta_at(*r, t - d_max - 1, &mut cache)?;
            }
            self.memory.insert(s, t - d_max, z);
        }

        // Emit u_i(t) by rolling the needed node states forward to t.
        let mut u = DVector::zeros(self.kernel.input_dim(self.agent));
        for (r, pi) in self.kernel.policy_rows(self.agent) {
            u += pi * self.zeta_at(*r, t, &mut cache)?;
        }

        // Prune entries that can no longer be needed.
        for idx in 0..self.view.ordered_leaves.len() {
            let (s, _, _) = self.view.ordered_leaves[idx];
            self.memory.remove(s, t - 2 * d_max - 1);
        }
        for idx in 0..self.view.roots.len() {
            let s = self.view.roots[idx];
            self.memory.remove(s, t - d_max - 1);
        }

        self.t += 1;
        Ok(u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::{run_closed_loop, ControllerKind, LoopContext};
    use crate::lti::{generate_random_system, SystemModel};
    use crate::riccati::{synthesize_gains, Provenance, DEFAULT_TOL};
    use crate::topology::{
        agent_view, build_information_graph, compute_delay_matrix, DirectedDelayGraph, Edge,
    };

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
        delay: DelayMatrix,
        ig: InfoGraph,
        views: Vec<AgentView>,
        gains: GainSet,
    }

    fn example_setup(seed: u64) -> Setup {
        let g = example_graph();
        let delay = compute_delay_matrix(&g);
        let ig = build_information_graph(&delay);
        let model = generate_random_system(&g, Partition::scalar(3), 0.8, 2.0, 5.0, 1.0, seed)
            .unwrap();
        let views = (0..3).map(|i| agent_view(&ig, &delay, i)).collect();
        let gains = synthesize_gains(
            &model.a, &model.b, &model.q, &model.r, &ig, &model.partition, DEFAULT_TOL,
            Provenance::TrueModel,
        )
        .unwrap();
        Setup { model, delay, ig, views, gains }
    }

    #[test]
    fn initial_memory_layout_example_agent_2() {
        let s = example_setup(1);
        let agent = DecentralizedAgent::new(
            &s.ig, &s.delay, &s.model.partition, &s.views[1], &s.model.a, &s.model.b, &s.gains,
        );
        let idx = |members: &[usize]| {
            s.ig.nodes().iter().position(|t| t.members() == members).unwrap()
        };
        // D_max = 1: leaf {1,2} (delay 0) holds -3..-1, leaf {3} (delay 1)
        // holds -3..-2, root {1,2,3} holds -2.
        assert_eq!(agent.memory().timestamps(idx(&[0, 1])), vec![-3, -2, -1]);
        assert_eq!(agent.memory().timestamps(idx(&[2])), vec![-3, -2]);
        assert_eq!(agent.memory().timestamps(idx(&[0, 1, 2])), vec![-2]);
        assert_eq!(agent.memory_len(), 6);
        assert!(agent.memory_len() <= (2 * 1 + 2) * 3 + 2 * 3);
        // all zero vectors
        for (_, v) in agent.memory().snapshot() {
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn initial_memory_single_agent() {
        let g = DirectedDelayGraph::new(1, vec![]).unwrap();
        let delay = compute_delay_matrix(&g);
        let ig = build_information_graph(&delay);
        let part = Partition::scalar(1);
        let a = nalgebra::DMatrix::from_element(1, 1, 0.5);
        let b = nalgebra::DMatrix::from_element(1, 1, 1.0);
        let q = nalgebra::DMatrix::identity(1, 1);
        let r = nalgebra::DMatrix::identity(1, 1);
        let gains = synthesize_gains(&a, &b, &q, &r, &ig, &part, DEFAULT_TOL, Provenance::Estimate)
            .unwrap();
        let view = agent_view(&ig, &delay, 0);
        let agent = DecentralizedAgent::new(&ig, &delay, &part, &view, &a, &b, &gains);
        // D_max = 0 and the only node is an isolated leaf: one entry at -1.
        assert_eq!(agent.memory().timestamps(0), vec![-1]);
        assert!(view.roots.is_empty());
    }

    #[test]
    fn noise_free_exact_model_stays_at_zero() {
        let mut s = example_setup(2);
        s.model.sigma_w = 0.0;
        let c = LoopContext {
            model: &s.model,
            delay: &s.delay,
            ig: &s.ig,
            views: &s.views,
            true_gains: Some(&s.gains),
            a_hat: Some(&s.model.a),
            b_hat: Some(&s.model.b),
            gains_hat: Some(&s.gains),
        };
        let run = run_closed_loop(&c, ControllerKind::CeDecentralized, 30, 0).unwrap();
        for u in &run.trajectory.u {
            assert_eq!(u.norm(), 0.0);
        }
    }

    #[test]
    fn visible_window_matches_information_set() {
        let s = example_setup(3);
        // agent 2 at any t sees x2(t-2..t) and x3(t-2..t-1)
        let t = 10;
        let history: Vec<DVector<f64>> = (0..=t)
            .map(|k| DVector::from_fn(3, |i, _| (k * 10 + i) as f64))
            .collect();
        let w = VisibleStates::window(&s.model.partition, &s.delay, 1, t as i64, &history);
        for k in (t as i64 - 2)..=(t as i64) {
            assert!(w.contains(1, k));
        }
        for k in (t as i64 - 2)..=(t as i64 - 1) {
            assert!(w.contains(2, k));
        }
        assert!(!w.contains(2, t as i64));
        assert!(!w.contains(0, t as i64 - 1));
        assert!(w.get(1, t as i64).is_ok());
        assert!(matches!(
            w.get(1, t as i64 + 1),
            Err(ControllerError::MissingState { agent: 1, time }) if time == t as i64 + 1
        ));
        assert_eq!(w.accessed(), vec![(1, t as i64), (1, t as i64 + 1)]);
    }

    #[test]
    fn decentralized_matches_centralized_reference() {
        let s = example_setup(4);
        // perturbed estimates so the disturbance reconstruction is nontrivial
        let a_hat = &s.model.a + nalgebra::DMatrix::from_fn(3, 3, |i, j| 0.01 * ((i + j) as f64));
        let b_hat = &s.model.b + nalgebra::DMatrix::from_fn(3, 3, |i, j| 0.02 * ((i * j) as f64 + 1.0));
        let gains_hat = synthesize_gains(
            &a_hat, &b_hat, &s.model.q, &s.model.r, &s.ig, &s.model.partition, DEFAULT_TOL,
            Provenance::Estimate,
        )
        .unwrap();
        let c = LoopContext {
            model: &s.model,
            delay: &s.delay,
            ig: &s.ig,
            views: &s.views,
            true_gains: Some(&s.gains),
            a_hat: Some(&a_hat),
            b_hat: Some(&b_hat),
            gains_hat: Some(&gains_hat),
        };
        let cen = run_closed_loop(&c, ControllerKind::CeCentralized, 120, 77).unwrap();
        let dec = run_closed_loop(&c, ControllerKind::CeDecentralized, 120, 77).unwrap();
        for t in 0..120 {
            let diff = (&cen.trajectory.u[t] - &dec.trajectory.u[t]).norm();
            assert!(diff <= 1e-9, "step {t}: |u_cen - u_dec| = {diff}");
        }
        assert!((cen.cost - dec.cost).abs() <= 1e-9 * cen.cost.max(1.0));
        // memory stays within the stated bound at all times
        let bound = (2 * 1 + 2) * 3 + 2 * 3;
        assert!(dec.memory_peak.unwrap() <= bound);
    }

    #[test]
    fn withholding_required_state_fails_loudly() {
        let s = example_setup(5);
        let a_hat = s.model.a.clone();
        let b_hat = s.model.b.clone();
        let mut agent = DecentralizedAgent::new(
            &s.ig, &s.delay, &s.model.partition, &s.views[1], &a_hat, &b_hat, &s.gains,
        );
        let horizon = 6i64;
        let history: Vec<DVector<f64>> = (0..=horizon)
            .map(|k| DVector::from_fn(3, |i, _| ((k + 1) * (i as i64 + 1)) as f64 * 0.01))
            .collect();
        for t in 0..4 {
            let w = VisibleStates::window(&s.model.partition, &s.delay, 1, t, &history);
            agent.step(t, &w).unwrap();
        }
        // at t = 4 withhold x_2(4), the newest state of agent 2's own leaf
        let mut w = VisibleStates::window(&s.model.partition, &s.delay, 1, 4, &history);
        w.remove(1, 4);
        match agent.step(4, &w) {
            Err(ControllerError::MissingState { agent: 1, time: 4 }) => {}
            other => panic!("expected MissingState, got {other:?}"),
        }
    }

    #[test]
    fn accesses_stay_inside_window() {
        let s = example_setup(6);
        let mut agent = DecentralizedAgent::new(
            &s.ig, &s.delay, &s.model.partition, &s.views[1], &s.model.a, &s.model.b, &s.gains,
        );
        let horizon = 30i64;
        let mut history = vec![DVector::zeros(3)];
        let noise = crate::controllers::noise_sequence(&s.model, horizon as usize, 8, 2);
        let mut x = DVector::zeros(3);
        for t in 0..horizon {
            let w = VisibleStates::window(&s.model.partition, &s.delay, 1, t, &history);
            agent.step(t, &w).unwrap();
            let d_max = s.delay.max_finite_delay() as i64;
            for (j, k) in w.accessed() {
                let d_ij = s.delay.get(1, j).unwrap() as i64;
                assert!(k >= t - d_max - 1 && k <= t - d_ij, "read x_{j}({k}) at t={t}");
            }
            // plant advances with an arbitrary exogenous input for the others
            x = &s.model.a * &x + &noise[t as usize];
            history.push(x.clone());
        }
    }
}
