//! Interconnection topology: the delay-labelled directed graph between
//! subsystems, the all-pairs minimum-delay matrix, and the information graph
//! whose nodes are delay-reachable subsets of subsystems.
//!
//! Node ids are `0..p` internally; the JSON interfaces use 1-based ids.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("graph must have at least one node")]
    EmptyGraph,
    #[error("node id {0} out of range for p = {1}")]
    NodeOutOfRange(usize, usize),
    #[error("self loop on node {0} is not allowed")]
    SelfLoop(usize),
    #[error("duplicate edge {from} -> {to}")]
    DuplicateEdge { from: usize, to: usize },
    #[error("delay {0} out of range, edge delays must be 0 or 1")]
    DelayOutOfRange(u32),
    #[error("zero-delay cycle through nodes {0:?} (1-based)")]
    ZeroDelayCycle(Vec<usize>),
}

/// A directed edge `from -> to` along which information propagates with the
/// given delay (0 or 1 time steps).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub delay: u32,
}

/// Directed interconnection graph over `p` subsystems with 0/1 edge delays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedDelayGraph {
    p: usize,
    edges: Vec<Edge>,
}

/// JSON form of a graph; node ids are 1-based in the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSpec {
    pub p: usize,
    pub edges: Vec<Edge>,
}

impl DirectedDelayGraph {
    /// Builds a graph from 0-based edges, validating the structural
    /// invariants (no self loops, ids in range, no duplicate edges).
    pub fn new(p: usize, edges: Vec<Edge>) -> Result<Self, TopologyError> {
        if p == 0 {
            return Err(TopologyError::EmptyGraph);
        }
        let mut seen = HashMap::new();
        for e in &edges {
            if e.from >= p {
                return Err(TopologyError::NodeOutOfRange(e.from, p));
            }
            if e.to >= p {
                return Err(TopologyError::NodeOutOfRange(e.to, p));
            }
            if e.from == e.to {
                return Err(TopologyError::SelfLoop(e.from));
            }
            if e.delay > 1 {
                return Err(TopologyError::DelayOutOfRange(e.delay));
            }
            if seen.insert((e.from, e.to), ()).is_some() {
                return Err(TopologyError::DuplicateEdge {
                    from: e.from,
                    to: e.to,
                });
            }
        }
        Ok(Self { p, edges })
    }

    pub fn from_spec(spec: &GraphSpec) -> Result<Self, TopologyError> {
        let edges = spec
            .edges
            .iter()
            .map(|e| {
                if e.from == 0 || e.to == 0 {
                    Err(TopologyError::NodeOutOfRange(0, spec.p))
                } else {
                    Ok(Edge {
                        from: e.from - 1,
                        to: e.to - 1,
                        delay: e.delay,
                    })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(spec.p, edges)
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            p: self.p,
            edges: self
                .edges
                .iter()
                .map(|e| Edge {
                    from: e.from + 1,
                    to: e.to + 1,
                    delay: e.delay,
                })
                .collect(),
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Accepts iff the subgraph of zero-delay edges is acyclic.  Cycles with
    /// zero accumulated delay are rejected with the offending strongly
    /// connected component rather than collapsed.
    pub fn reject_zero_delay_cycles(&self) -> Result<(), TopologyError> {
        // Kahn's algorithm on the zero-delay subgraph; any remainder after
        // peeling is a union of cycles.
        let mut adj = vec![Vec::new(); self.p];
        let mut indeg = vec![0usize; self.p];
        for e in &self.edges {
            if e.delay == 0 {
                adj[e.from].push(e.to);
                indeg[e.to] += 1;
            }
        }
        let mut queue: VecDeque<usize> = (0..self.p).filter(|&v| indeg[v] == 0).collect();
        let mut peeled = 0usize;
        while let Some(v) = queue.pop_front() {
            peeled += 1;
            for &w in &adj[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    queue.push_back(w);
                }
            }
        }
        if peeled == self.p {
            Ok(())
        } else {
            let component: Vec<usize> = (0..self.p).filter(|&v| indeg[v] > 0).map(|v| v + 1).collect();
            Err(TopologyError::ZeroDelayCycle(component))
        }
    }
}

/// All-pairs minimum accumulated delays.  `get(i, j)` is the smallest total
/// delay over directed paths from `j` to `i`, `None` if `i` is unreachable
/// from `j`, and `Some(0)` on the diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayMatrix {
    p: usize,
    // Row i, column j: delay from source j to destination i.
    d: Vec<Option<u32>>,
}

impl DelayMatrix {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn get(&self, dest: usize, src: usize) -> Option<u32> {
        self.d[dest * self.p + src]
    }

    /// Largest finite entry; 0 for a graph with no paths at all.
    pub fn max_finite_delay(&self) -> u32 {
        self.d.iter().flatten().copied().max().unwrap_or(0)
    }

    /// Agents whose state eventually reaches `i`: `{j : D_ij != inf}`.
    pub fn visible_from(&self, dest: usize) -> Vec<usize> {
        (0..self.p).filter(|&j| self.get(dest, j).is_some()).collect()
    }

    /// Neighborhood of `i` in the plant equation: `{j : D_ij <= 1}`.
    pub fn neighborhood(&self, dest: usize) -> Vec<usize> {
        (0..self.p)
            .filter(|&j| matches!(self.get(dest, j), Some(d) if d <= 1))
            .collect()
    }
}

impl fmt::Display for DelayMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.p {
            for j in 0..self.p {
                match self.get(i, j) {
                    Some(d) => write!(f, "{:>3}", d)?,
                    None => write!(f, "  .")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Computes the delay matrix by one 0-1 breadth-first search per source
/// node.  The result does not depend on the edge order.
pub fn compute_delay_matrix(g: &DirectedDelayGraph) -> DelayMatrix {
    let p = g.p();
    let mut adj = vec![Vec::new(); p];
    for e in g.edges() {
        adj[e.from].push((e.to, e.delay));
    }
    let mut d = vec![None; p * p];
    for src in 0..p {
        let mut dist = vec![None; p];
        dist[src] = Some(0u32);
        let mut deque = VecDeque::new();
        deque.push_back(src);
        while let Some(v) = deque.pop_front() {
            let dv = dist[v].unwrap();
            for &(w, delay) in &adj[v] {
                let cand = dv + delay;
                if dist[w].is_none_or(|old| cand < old) {
                    dist[w] = Some(cand);
                    if delay == 0 {
                        deque.push_front(w);
                    } else {
                        deque.push_back(w);
                    }
                }
            }
        }
        for dest in 0..p {
            d[dest * p + src] = dist[dest];
        }
    }
    DelayMatrix { p, d }
}

/// An ascending-ordered subset of the subsystem ids `0..p`.
///
/// The derived `Ord` is the canonical node order used everywhere iteration
/// order matters: smallest element first, then size, then lexicographic.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NodeSet(Vec<usize>);

impl NodeSet {
    pub fn new(mut members: Vec<usize>) -> Self {
        members.sort_unstable();
        members.dedup();
        Self(members)
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.0.binary_search(&v).is_ok()
    }

    /// Position of `v` within the subset, if present.
    pub fn position(&self, v: usize) -> Option<usize> {
        self.0.binary_search(&v).ok()
    }

    pub fn singleton(v: usize) -> Self {
        Self(vec![v])
    }

    pub fn full(p: usize) -> Self {
        Self((0..p).collect())
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.0.iter().map(|&v| v + 1).collect()
    }
}

impl Ord for NodeSet {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let a = (self.0.first(), self.0.len(), &self.0);
        let b = (other.0.first(), other.0.len(), &other.0);
        a.cmp(&b)
    }
}

impl PartialOrd for NodeSet {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for NodeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, v) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", v + 1)?;
        }
        write!(f, "}}")
    }
}

/// Index of a node within [`InfoGraph::nodes`].
pub type NodeIdx = usize;

/// The information graph: a forest whose nodes are the reachable sets
/// `s_j(k) = {i : D_ij <= k}`, each with a unique successor, ending in
/// self-loop roots.
#[derive(Debug, Clone)]
pub struct InfoGraph {
    nodes: Vec<NodeSet>,
    /// Unique successor of each node; roots point at themselves.
    parent: Vec<NodeIdx>,
    /// Predecessors of each node, self-loops excluded.
    children: Vec<Vec<NodeIdx>>,
    /// `origin[i]` is the node for `s_i(0)`; these are exactly the leaves.
    origin: Vec<NodeIdx>,
    /// Self-loop nodes, ascending.
    roots: Vec<NodeIdx>,
    /// Root reached from each node.
    root_of: Vec<NodeIdx>,
    /// Path length from each node to its root.
    depth: Vec<usize>,
}

/// Reachable set `s_j(k) = {i : D_ij <= k}`, ascending order.
pub fn reach_set(d: &DelayMatrix, src: usize, k: u32) -> NodeSet {
    NodeSet::new(
        (0..d.p())
            .filter(|&i| matches!(d.get(i, src), Some(v) if v <= k))
            .collect(),
    )
}

/// Builds the information graph from a delay matrix.  Expects the delay
/// matrix of a graph without zero-delay cycles; the construction iterates
/// the reachable sets of each source until they stop growing and merges
/// duplicate subsets into one node.
pub fn build_information_graph(d: &DelayMatrix) -> InfoGraph {
    let p = d.p();
    let mut index: HashMap<NodeSet, usize> = HashMap::new();
    // successor as a set, keyed by set
    let mut succ: HashMap<NodeSet, NodeSet> = HashMap::new();
    let mut origin_sets = Vec::with_capacity(p);
    for j in 0..p {
        let mut k = 0u32;
        let mut cur = reach_set(d, j, 0);
        origin_sets.push(cur.clone());
        loop {
            let next = reach_set(d, j, k + 1);
            match succ.get(&cur) {
                Some(existing) => {
                    // Reachable-set successors are a function of the set
                    // itself, so chains through a shared set must agree.
                    assert_eq!(
                        existing, &next,
                        "conflicting successors for information-graph node {cur}"
                    );
                    break;
                }
                None => {
                    succ.insert(cur.clone(), next.clone());
                    index.entry(cur.clone()).or_insert(0);
                    index.entry(next.clone()).or_insert(0);
                }
            }
            if next == cur {
                break;
            }
            cur = next;
            k += 1;
        }
    }

    let mut nodes: Vec<NodeSet> = index.keys().cloned().collect();
    nodes.sort();
    let index: HashMap<NodeSet, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();

    let mut parent = vec![0usize; nodes.len()];
    for (set, next) in &succ {
        parent[index[set]] = index[next];
    }
    let mut children = vec![Vec::new(); nodes.len()];
    for (v, &s) in parent.iter().enumerate() {
        if v != s {
            children[s].push(v);
        }
    }
    for c in &mut children {
        c.sort_unstable();
    }
    let roots: Vec<usize> = (0..nodes.len()).filter(|&v| parent[v] == v).collect();
    let origin: Vec<usize> = origin_sets.iter().map(|s| index[s]).collect();

    let mut root_of = vec![usize::MAX; nodes.len()];
    let mut depth = vec![0usize; nodes.len()];
    for v in 0..nodes.len() {
        let mut cur = v;
        let mut steps = 0usize;
        while parent[cur] != cur {
            cur = parent[cur];
            steps += 1;
            assert!(steps <= nodes.len(), "information graph has a non-root cycle");
        }
        root_of[v] = cur;
        depth[v] = steps;
    }

    InfoGraph {
        nodes,
        parent,
        children,
        origin,
        roots,
        root_of,
        depth,
    }
}

impl InfoGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeSet] {
        &self.nodes
    }

    pub fn set(&self, v: NodeIdx) -> &NodeSet {
        &self.nodes[v]
    }

    pub fn parent(&self, v: NodeIdx) -> NodeIdx {
        self.parent[v]
    }

    /// Predecessors `r` with an edge `r -> v`, excluding the self loop.
    pub fn children(&self, v: NodeIdx) -> &[NodeIdx] {
        &self.children[v]
    }

    pub fn roots(&self) -> &[NodeIdx] {
        &self.roots
    }

    pub fn is_root(&self, v: NodeIdx) -> bool {
        self.parent[v] == v
    }

    /// Leaves in canonical order; `leaf(i) == origin(i)`.
    pub fn leaves(&self) -> Vec<NodeIdx> {
        let mut l = self.origin.clone();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn origin(&self, agent: usize) -> NodeIdx {
        self.origin[agent]
    }

    pub fn is_leaf(&self, v: NodeIdx) -> bool {
        self.origin.contains(&v)
    }

    /// Leaf with a self loop: an isolated one-node tree.
    pub fn is_isolated(&self, v: NodeIdx) -> bool {
        self.is_leaf(v) && self.is_root(v)
    }

    /// Agent whose noise is injected at leaf `v`, i.e. the `j` with
    /// `s_j(0) = v`.  Unique because zero-delay cycles are excluded.
    pub fn generator(&self, v: NodeIdx) -> Option<usize> {
        self.origin.iter().position(|&o| o == v)
    }

    pub fn root_of(&self, v: NodeIdx) -> NodeIdx {
        self.root_of[v]
    }

    pub fn depth(&self, v: NodeIdx) -> usize {
        self.depth[v]
    }

    /// Length of the unique directed path from `v` to `s`, if `s` lies on
    /// the path from `v` to its root.
    pub fn path_len(&self, v: NodeIdx, s: NodeIdx) -> Option<usize> {
        let mut cur = v;
        let mut steps = 0usize;
        loop {
            if cur == s {
                return Some(steps);
            }
            if self.parent[cur] == cur {
                return None;
            }
            cur = self.parent[cur];
            steps += 1;
        }
    }

    /// Nodes containing agent `i`, ascending.
    pub fn nodes_containing(&self, agent: usize) -> Vec<NodeIdx> {
        (0..self.len()).filter(|&v| self.nodes[v].contains(agent)).collect()
    }

    pub fn to_json(&self) -> InfoGraphJson {
        InfoGraphJson {
            nodes: self.nodes.iter().map(|s| s.to_one_based()).collect(),
            parent: self.parent.clone(),
            leaves: self.leaves(),
            roots: self.roots.clone(),
            origin: self.origin.clone(),
        }
    }
}

/// JSON export of an information graph; subsets carry 1-based agent ids,
/// all cross references are indices into `nodes`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfoGraphJson {
    pub nodes: Vec<Vec<usize>>,
    pub parent: Vec<usize>,
    pub leaves: Vec<usize>,
    pub roots: Vec<usize>,
    pub origin: Vec<usize>,
}

/// Everything one controller needs to know about the topology: its trees,
/// the leaves in processing order, the roots, the visible agents and the
/// global maximum delay.
#[derive(Debug, Clone)]
pub struct AgentView {
    pub agent: usize,
    /// Nodes of all trees whose root contains the agent, ascending.
    pub tree_nodes: Vec<NodeIdx>,
    /// Leaves of those trees as `(node, generator, delay D_{i,generator})`,
    /// sorted by descending delay, ties in canonical node order.
    pub ordered_leaves: Vec<(NodeIdx, usize, u32)>,
    /// Non-leaf roots of those trees, ascending.  Isolated self-loop leaves
    /// are kept out of the root list and appear among the leaves only.
    pub roots: Vec<NodeIdx>,
    /// Agents visible to this one: `{j : D_ij != inf}`.
    pub visible: Vec<usize>,
    /// Global maximum finite delay.
    pub d_max: u32,
}

/// Builds the per-agent view of the information graph.
pub fn agent_view(ig: &InfoGraph, d: &DelayMatrix, agent: usize) -> AgentView {
    let tree_nodes: Vec<NodeIdx> = (0..ig.len())
        .filter(|&v| ig.set(ig.root_of(v)).contains(agent))
        .collect();
    let mut ordered_leaves: Vec<(NodeIdx, usize, u32)> = tree_nodes
        .iter()
        .copied()
        .filter(|&v| ig.is_leaf(v))
        .map(|v| {
            let j = ig.generator(v).expect("leaf without a generating agent");
            let delay = d
                .get(agent, j)
                .expect("leaf generator must be visible to the agent");
            (v, j, delay)
        })
        .collect();
    ordered_leaves.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)));
    let roots: Vec<NodeIdx> = tree_nodes
        .iter()
        .copied()
        .filter(|&v| ig.is_root(v) && !ig.is_leaf(v))
        .collect();
    AgentView {
        agent,
        tree_nodes,
        ordered_leaves,
        roots,
        visible: d.visible_from(agent),
        d_max: d.max_finite_delay(),
    }
}
