//! Discrete graphical-model types on hidden-Markov chain topologies.
//!
//! A [`ChainGraph`] is an undirected tree made of a path of hidden nodes, each
//! optionally carrying one observation leaf. Every edge holds a nonnegative
//! [`EdgePotential`]; nodes may carry a [`NodePotential`]. The joint density is
//! the normalized product of all potentials.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CgmError, Result};

/// Rows or distributions within this distance of 1 are accepted as exact.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Rows or distributions within this distance of 1 are renormalized; beyond it they are rejected.
pub const RENORMALIZE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Finite state alphabet of a node.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSpace {
    cardinality: usize,
    labels: Option<Vec<String>>,
}

impl StateSpace {
    pub fn new(cardinality: usize) -> Result<Self> {
        if cardinality == 0 {
            return Err(CgmError::Validation("state space must have at least one state".into()));
        }
        Ok(Self { cardinality, labels: None })
    }

    pub fn with_labels(labels: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
        if unique.len() != labels.len() {
            return Err(CgmError::Validation("state labels must be unique".into()));
        }
        let mut space = Self::new(labels.len())?;
        space.labels = Some(labels);
        Ok(space)
    }

    pub fn len(&self) -> usize {
        self.cardinality
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }
}

/// Nonnegative pairwise weight table, rows indexed by the first endpoint's states.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgePotential(Array2<f64>);

impl EdgePotential {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(CgmError::Validation("edge potential must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CgmError::Validation(
                "edge potential entries must be finite and nonnegative".into(),
            ));
        }
        // Zero rows are fine: absorbed potentials can rule states out.
        if values.iter().all(|v| *v == 0.0) {
            return Err(CgmError::Validation("edge potential is all zero".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Nonnegative unary weight vector.
#[derive(Clone, Debug, PartialEq)]
pub struct NodePotential(Array1<f64>);

impl NodePotential {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CgmError::Validation("node potential must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CgmError::Validation(
                "node potential entries must be finite and nonnegative".into(),
            ));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(CgmError::Validation("node potential is all zero".into()));
        }
        Ok(Self(values))
    }

    pub fn ones(d: usize) -> Self {
        Self(Array1::ones(d))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn is_unit(&self) -> bool {
        self.0.iter().all(|v| *v == 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    Observation,
    Hidden,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    /// Time index of the hidden node, or of the hidden node an observation leaf hangs off.
    pub time: usize,
    pub states: StateSpace,
    pub potential: Option<NodePotential>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub a: NodeId,
    pub b: NodeId,
    /// Shape `|a| x |b|`.
    pub potential: EdgePotential,
}

/// Undirected hidden-Markov chain with observation leaves and an observed index set.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(NodeId, usize)>>,
    observed: BTreeSet<NodeId>,
}

impl ChainGraph {
    /// Validated constructor. The hidden nodes must form a path, every
    /// observation node must be a leaf hanging off a hidden node, and the
    /// whole graph must be a tree.
    pub fn from_parts(nodes: Vec<Node>, edges: Vec<Edge>, observed: BTreeSet<NodeId>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(CgmError::Structure("graph has no nodes".into()));
        }
        let n = nodes.len();
        let mut adjacency = vec![Vec::new(); n];
        for (e, edge) in edges.iter().enumerate() {
            let (a, b) = (edge.a.0, edge.b.0);
            if a >= n || b >= n {
                return Err(CgmError::Structure(format!("edge {e} references a missing node")));
            }
            if a == b {
                return Err(CgmError::Structure(format!("edge {e} is a self-loop")));
            }
            let (ra, cb) = edge.potential.shape();
            if ra != nodes[a].states.len() || cb != nodes[b].states.len() {
                return Err(CgmError::Model(format!(
                    "edge {e} potential is {ra}x{cb}, endpoints have {} and {} states",
                    nodes[a].states.len(),
                    nodes[b].states.len()
                )));
            }
            adjacency[a].push((edge.b, e));
            adjacency[b].push((edge.a, e));
        }
        for (i, node) in nodes.iter().enumerate() {
            if let Some(p) = &node.potential {
                if p.values().len() != node.states.len() {
                    return Err(CgmError::Model(format!("node {i} potential has the wrong length")));
                }
            }
        }
        if edges.len() + 1 != n {
            return Err(CgmError::Structure(format!(
                "{} nodes and {} edges cannot form a tree",
                n,
                edges.len()
            )));
        }
        // Connectivity, which together with |E| = |V| - 1 gives a tree.
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &adjacency[u] {
                if !seen[v.0] {
                    seen[v.0] = true;
                    stack.push(v.0);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(CgmError::Structure("graph is not connected".into()));
        }
        for (i, node) in nodes.iter().enumerate() {
            let hidden_neighbors = adjacency[i]
                .iter()
                .filter(|(v, _)| nodes[v.0].kind == NodeKind::Hidden)
                .count();
            match node.kind {
                NodeKind::Observation => {
                    if adjacency[i].len() != 1 || hidden_neighbors != 1 {
                        return Err(CgmError::Structure(format!(
                            "observation node {i} must be a leaf attached to a hidden node"
                        )));
                    }
                }
                NodeKind::Hidden => {
                    if hidden_neighbors > 2 {
                        return Err(CgmError::Structure(format!(
                            "hidden node {i} has {hidden_neighbors} hidden neighbours; hidden nodes must form a path"
                        )));
                    }
                }
            }
        }
        let graph = Self { nodes, edges, adjacency, observed: BTreeSet::new() };
        graph.with_observed(observed)
    }

    /// Replaces the observed index set.
    pub fn with_observed(mut self, observed: BTreeSet<NodeId>) -> Result<Self> {
        if let Some(bad) = observed.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(CgmError::Structure(format!("observed node {bad} does not exist")));
        }
        self.observed = observed;
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn neighbors(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.adjacency[id.0].iter().map(|(v, _)| *v)
    }

    /// Neighbour and edge index pairs.
    pub fn incident(&self, id: NodeId) -> &[(NodeId, usize)] {
        &self.adjacency[id.0]
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.adjacency[id.0].len()
    }

    pub fn observed(&self) -> &BTreeSet<NodeId> {
        &self.observed
    }

    pub fn is_observed(&self, id: NodeId) -> bool {
        self.observed.contains(&id)
    }

    pub fn states(&self, id: NodeId) -> usize {
        self.nodes[id.0].states.len()
    }

    pub fn hidden_at(&self, time: usize) -> Option<NodeId> {
        self.find(NodeKind::Hidden, time)
    }

    pub fn observation_at(&self, time: usize) -> Option<NodeId> {
        self.find(NodeKind::Observation, time)
    }

    fn find(&self, kind: NodeKind, time: usize) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.kind == kind && n.time == time)
            .map(NodeId)
    }

    /// Hidden nodes ordered by time.
    pub fn hidden_nodes(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self
            .node_ids()
            .filter(|id| self.node(*id).kind == NodeKind::Hidden)
            .collect();
        ids.sort_by_key(|id| self.node(*id).time);
        ids
    }

    /// Edge index joining `i` and `j`, if adjacent.
    pub fn edge_between(&self, i: NodeId, j: NodeId) -> Option<usize> {
        self.adjacency[i.0].iter().find(|(v, _)| *v == j).map(|(_, e)| *e)
    }

    /// Potential of edge `(i, j)` with rows indexed by `i`'s states.
    pub fn oriented_potential(&self, i: NodeId, j: NodeId) -> Option<ArrayView2<'_, f64>> {
        let e = self.edge_between(i, j)?;
        let edge = &self.edges[e];
        let view = edge.potential.values().view();
        Some(if edge.a == i { view } else { view.reversed_axes() })
    }

    pub fn set_node_potential(&mut self, id: NodeId, potential: Option<NodePotential>) -> Result<()> {
        if let Some(p) = &potential {
            if p.values().len() != self.states(id) {
                return Err(CgmError::Model(format!("node {id} potential has the wrong length")));
            }
        }
        self.nodes[id.0].potential = potential;
        Ok(())
    }

    /// Builds an HMM window: hidden nodes at `first_time..first_time + transitions.len()`,
    /// one leaf per `Some` entry of `emissions`, observed set = all leaves.
    pub fn hmm_window(
        first_time: usize,
        hidden_states: usize,
        transitions: &[EdgePotential],
        emissions: &[Option<EdgePotential>],
        head_potential: Option<NodePotential>,
    ) -> Result<Self> {
        let len = transitions.len() + 1;
        if emissions.len() != len {
            return Err(CgmError::Model(format!(
                "{len} hidden nodes but {} emission slots",
                emissions.len()
            )));
        }
        let hidden_space = StateSpace::new(hidden_states)?;
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut observed = BTreeSet::new();
        let mut prev: Option<NodeId> = None;
        for (k, emission) in emissions.iter().enumerate() {
            let time = first_time + k;
            let hidden = NodeId(nodes.len());
            nodes.push(Node {
                kind: NodeKind::Hidden,
                time,
                states: hidden_space.clone(),
                potential: if k == 0 { head_potential.clone() } else { None },
            });
            if let Some(p) = prev {
                edges.push(Edge { a: p, b: hidden, potential: transitions[k - 1].clone() });
            }
            if let Some(em) = emission {
                let leaf = NodeId(nodes.len());
                nodes.push(Node {
                    kind: NodeKind::Observation,
                    time,
                    states: StateSpace::new(em.shape().1)?,
                    potential: None,
                });
                edges.push(Edge { a: hidden, b: leaf, potential: em.clone() });
                observed.insert(leaf);
            }
            prev = Some(hidden);
        }
        Self::from_parts(nodes, edges, observed)
    }
}

/// Validates a probability vector, renormalizing benign drift.
pub(crate) fn checked_distribution(values: Array1<f64>, what: &str) -> Result<Array1<f64>> {
    if values.is_empty() {
        return Err(CgmError::Validation(format!("{what} is empty")));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CgmError::Validation(format!("{what} has negative or non-finite entries")));
    }
    let sum = values.sum();
    if (sum - 1.0).abs() > RENORMALIZE_TOL {
        return Err(CgmError::Validation(format!("{what} sums to {sum}, not 1")));
    }
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        Ok(values / sum)
    } else {
        Ok(values)
    }
}

pub(crate) fn checked_stochastic(mut m: Array2<f64>, what: &str) -> Result<Array2<f64>> {
    for r in 0..m.nrows() {
        let row = checked_distribution(m.row(r).to_owned(), &format!("{what} row {r}"))?;
        m.row_mut(r).assign(&row);
    }
    Ok(m)
}

/// Normalized aggregate count histogram at an observed node.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateObservation {
    distribution: Array1<f64>,
    population: u64,
}

impl AggregateObservation {
    pub fn from_distribution(distribution: Array1<f64>, population: u64) -> Result<Self> {
        if population == 0 {
            return Err(CgmError::Validation("population must be positive".into()));
        }
        let distribution = checked_distribution(distribution, "observation")?;
        Ok(Self { distribution, population })
    }

    /// All mass on `state`; a single-trajectory observation.
    pub fn dirac(states: usize, state: usize) -> Result<Self> {
        if state >= states {
            return Err(CgmError::Validation(format!("state {state} outside alphabet of {states}")));
        }
        let mut v = Array1::zeros(states);
        v[state] = 1.0;
        Ok(Self { distribution: v, population: 1 })
    }

    pub fn distribution(&self) -> &Array1<f64> {
        &self.distribution
    }

    pub fn population(&self) -> u64 {
        self.population
    }

    pub fn len(&self) -> usize {
        self.distribution.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distribution.is_empty()
    }
}

pub fn normalize_counts(counts: &[u64], population: u64) -> Result<AggregateObservation> {
    if population == 0 {
        return Err(CgmError::Validation("population must be positive".into()));
    }
    let sum: u64 = counts.iter().sum();
    if sum != population {
        return Err(CgmError::CountMismatch { sum, population });
    }
    let m = population as f64;
    let distribution = counts.iter().map(|&c| c as f64 / m).collect::<Array1<f64>>();
    Ok(AggregateObservation { distribution, population })
}

/// Directed HMM parameters: prior over the first hidden state, row-stochastic
/// transition `d x d` and emission `d x d_o` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct HmmModel {
    prior: Array1<f64>,
    transition: Array2<f64>,
    observation: Array2<f64>,
}

impl HmmModel {
    pub fn new(prior: Array1<f64>, transition: Array2<f64>, observation: Array2<f64>) -> Result<Self> {
        let d = prior.len();
        if transition.dim() != (d, d) {
            return Err(CgmError::Model(format!(
                "transition is {:?}, prior has {d} states",
                transition.dim()
            )));
        }
        if observation.nrows() != d || observation.ncols() == 0 {
            return Err(CgmError::Model(format!(
                "observation is {:?}, prior has {d} states",
                observation.dim()
            )));
        }
        let prior = checked_distribution(prior, "prior")?;
        let transition = checked_stochastic(transition, "transition")?;
        let observation = checked_stochastic(observation, "observation")?;
        EdgePotential::new(transition.clone())?;
        EdgePotential::new(observation.clone())?;
        NodePotential::new(prior.clone())?;
        Ok(Self { prior, transition, observation })
    }

    pub fn states(&self) -> usize {
        self.prior.len()
    }

    pub fn symbols(&self) -> usize {
        self.observation.ncols()
    }

    pub fn prior(&self) -> &Array1<f64> {
        &self.prior
    }

    pub fn transition(&self) -> &Array2<f64> {
        &self.transition
    }

    pub fn observation(&self) -> &Array2<f64> {
        &self.observation
    }

    pub fn transition_potential(&self) -> EdgePotential {
        EdgePotential(self.transition.clone())
    }

    pub fn observation_potential(&self) -> EdgePotential {
        EdgePotential(self.observation.clone())
    }

    pub fn prior_potential(&self) -> NodePotential {
        NodePotential(self.prior.clone())
    }

    /// Chain over times `first..=last` with leaves at `leaves_from..=last`.
    pub fn window_graph(
        &self,
        first: usize,
        last: usize,
        leaves_from: usize,
        head_potential: Option<NodePotential>,
    ) -> Result<ChainGraph> {
        if last < first {
            return Err(CgmError::Model(format!("empty window {first}..={last}")));
        }
        let transitions = vec![self.transition_potential(); last - first];
        let emission = self.observation_potential();
        let emissions: Vec<Option<EdgePotential>> = (first..=last)
            .map(|t| (t >= leaves_from).then(|| emission.clone()))
            .collect();
        ChainGraph::hmm_window(first, self.states(), &transitions, &emissions, head_potential)
    }

    /// Full chain over `1..=horizon` with the prior on hidden node 1.
    pub fn chain(&self, horizon: usize) -> Result<ChainGraph> {
        if horizon == 0 {
            return Err(CgmError::Model("horizon must be at least 1".into()));
        }
        self.window_graph(1, horizon, 1, Some(self.prior_potential()))
    }
}

/// Converts directed HMM parameters into an undirected chain over `1..=horizon`.
///
/// Transition edges carry `p(x'|x)`, observation edges carry `p(o|x)`, the
/// prior sits as a node potential on hidden node 1, and every observation
/// leaf is observed.
pub fn build_hmm_chain(
    prior: Array1<f64>,
    transition: Array2<f64>,
    observation: Array2<f64>,
    horizon: usize,
) -> Result<ChainGraph> {
    HmmModel::new(prior, transition, observation)?.chain(horizon)
}

/// Folds the node potential of `node` into one incident edge and resets it to ones.
///
/// The target edge is the one toward the neighbour with the largest time
/// index; ties prefer a hidden neighbour, then the lowest node id.
pub fn absorb_node_potential(graph: &ChainGraph, node: NodeId) -> Result<ChainGraph> {
    if node.0 >= graph.num_nodes() {
        return Err(CgmError::Structure(format!("node {node} does not exist")));
    }
    let potential = graph
        .node(node)
        .potential
        .clone()
        .ok_or_else(|| CgmError::Structure(format!("node {node} has no node potential")))?;
    let &(_, e) = graph
        .incident(node)
        .iter()
        .max_by(|(u, _), (v, _)| {
            let (nu, nv) = (graph.node(*u), graph.node(*v));
            nu.time
                .cmp(&nv.time)
                .then(nu.kind.cmp(&nv.kind))
                .then(v.0.cmp(&u.0))
        })
        .ok_or_else(|| CgmError::Structure(format!("node {node} is isolated")))?;

    let mut out = graph.clone();
    let edge = &mut out.edges[e];
    let phi = potential.values();
    let mut values = edge.potential.values().clone();
    if edge.a == node {
        for (mut row, &w) in values.axis_iter_mut(Axis(0)).zip(phi.iter()) {
            row *= w;
        }
    } else {
        for (mut col, &w) in values.axis_iter_mut(Axis(1)).zip(phi.iter()) {
            col *= w;
        }
    }
    edge.potential = EdgePotential::new(values)?;
    out.nodes[node.0].potential = Some(NodePotential::ones(phi.len()));
    Ok(out)
}

/// Absorbs every non-unit node potential.
pub fn absorb_all(graph: &ChainGraph) -> Result<ChainGraph> {
    let mut out = graph.clone();
    for id in graph.node_ids() {
        if matches!(&graph.node(id).potential, Some(p) if !p.is_unit()) {
            out = absorb_node_potential(&out, id)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn joint(graph: &ChainGraph) -> Vec<f64> {
        // Row-major over node ids.
        let dims: Vec<usize> = graph.node_ids().map(|i| graph.states(i)).collect();
        let total: usize = dims.iter().product();
        let mut out = vec![0.0; total];
        let mut idx = vec![0usize; dims.len()];
        for slot in out.iter_mut() {
            let mut w = 1.0;
            for e in graph.edges() {
                w *= e.potential.values()[[idx[e.a.0], idx[e.b.0]]];
            }
            for (i, n) in graph.nodes().iter().enumerate() {
                if let Some(p) = &n.potential {
                    w *= p.values()[idx[i]];
                }
            }
            *slot = w;
            for k in (0..dims.len()).rev() {
                idx[k] += 1;
                if idx[k] < dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        let z: f64 = out.iter().sum();
        out.iter().map(|v| v / z).collect()
    }

    #[test]
    fn degenerate_single_state_chain() {
        let g = build_hmm_chain(array![1.0], array![[1.0]], array![[1.0]], 2).unwrap();
        assert_eq!(g.num_nodes(), 4);
        assert_eq!(g.edges().len(), 3);
        for e in g.edges() {
            assert_eq!(e.potential.values(), &array![[1.0]]);
        }
    }

    #[test]
    fn identity_chain_structure() {
        let eye = Array2::<f64>::eye(2);
        let g = build_hmm_chain(array![0.5, 0.5], eye.clone(), eye.clone(), 3).unwrap();
        let transition_edges = g
            .edges()
            .iter()
            .filter(|e| g.node(e.a).kind == NodeKind::Hidden && g.node(e.b).kind == NodeKind::Hidden)
            .count();
        assert_eq!(transition_edges, 2);
        assert_eq!(g.edges().len() - transition_edges, 3);
        assert!(g.edges().iter().all(|e| e.potential.values() == eye));
        assert_eq!(g.observed().len(), 3);
        assert!(g.observed().iter().all(|o| g.node(*o).kind == NodeKind::Observation));
        assert_eq!(g.node(g.hidden_at(1).unwrap()).potential.as_ref().unwrap().values(), &array![0.5, 0.5]);
    }

    #[test]
    fn chain_joint_matches_hmm_factorization() {
        let prior = array![0.3, 0.7];
        let a = array![[0.9, 0.1], [0.4, 0.6]];
        let b = array![[0.8, 0.2], [0.25, 0.75]];
        let g = build_hmm_chain(prior.clone(), a.clone(), b.clone(), 2).unwrap();
        let j = joint(&g);
        // Node order: x1, o1, x2, o2.
        let (x1, o1, x2, o2) = (
            g.hidden_at(1).unwrap().0,
            g.observation_at(1).unwrap().0,
            g.hidden_at(2).unwrap().0,
            g.observation_at(2).unwrap().0,
        );
        assert_eq!((x1, o1, x2, o2), (0, 1, 2, 3));
        let mut total = 0.0;
        for s1 in 0..2 {
            for e1 in 0..2 {
                for s2 in 0..2 {
                    for e2 in 0..2 {
                        let p = prior[s1] * a[[s1, s2]] * b[[s1, e1]] * b[[s2, e2]];
                        let flat = ((s1 * 2 + e1) * 2 + s2) * 2 + e2;
                        assert!((j[flat] - p).abs() < 1e-15);
                        total += p;
                    }
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        let eye = Array2::<f64>::eye(2);
        assert!(matches!(
            build_hmm_chain(array![0.5, 0.5], Array2::eye(3), eye.clone(), 2),
            Err(CgmError::Model(_))
        ));
        assert!(matches!(
            build_hmm_chain(array![0.5, 0.5], array![[0.5, 0.4], [0.0, 1.0]], eye.clone(), 2),
            Err(CgmError::Validation(_))
        ));
        assert!(matches!(
            build_hmm_chain(array![0.5, 0.5], eye.clone(), eye.clone(), 0),
            Err(CgmError::Model(_))
        ));
    }

    #[test]
    fn benign_drift_is_renormalized() {
        let m = HmmModel::new(
            array![0.5 + 5e-11, 0.5],
            array![[0.5, 0.5 + 1e-10], [0.0, 1.0]],
            Array2::eye(2),
        )
        .unwrap();
        assert!((m.prior().sum() - 1.0).abs() < 1e-15);
        assert!((m.transition().row(0).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn observation_alphabet_may_differ() {
        let m = HmmModel::new(array![1.0, 0.0], Array2::eye(2), array![[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]])
            .unwrap();
        let g = m.chain(2).unwrap();
        assert_eq!(g.states(g.observation_at(2).unwrap()), 3);
    }

    #[test]
    fn normalize_counts_examples() {
        assert_eq!(normalize_counts(&[10, 0], 10).unwrap().distribution(), &array![1.0, 0.0]);
        assert_eq!(normalize_counts(&[3, 7], 10).unwrap().distribution(), &array![0.3, 0.7]);
        assert_eq!(normalize_counts(&[1, 1, 2], 4).unwrap().distribution(), &array![0.25, 0.25, 0.5]);
        assert!(matches!(
            normalize_counts(&[1, 2], 4),
            Err(CgmError::CountMismatch { sum: 3, population: 4 })
        ));
    }

    #[test]
    fn absorb_unit_potential_is_noop() {
        let eye = Array2::<f64>::eye(2);
        let mut g = build_hmm_chain(array![0.5, 0.5], eye.clone(), eye.clone(), 2).unwrap();
        let x1 = g.hidden_at(1).unwrap();
        g.set_node_potential(x1, Some(NodePotential::ones(2))).unwrap();
        let h = absorb_node_potential(&g, x1).unwrap();
        assert_eq!(g, h);
    }

    #[test]
    fn absorb_into_leaf_edge() {
        let ones = EdgePotential::new(Array2::ones((2, 2))).unwrap();
        let mut g = ChainGraph::hmm_window(1, 2, &[], &[Some(ones)], None).unwrap();
        let leaf = g.observation_at(1).unwrap();
        g.set_node_potential(leaf, Some(NodePotential::new(array![2.0, 1.0]).unwrap()))
            .unwrap();
        let h = absorb_node_potential(&g, leaf).unwrap();
        // The leaf is the column endpoint of the edge; as rows of the leaf-oriented view:
        let v = h.oriented_potential(leaf, g.hidden_at(1).unwrap()).unwrap();
        assert_eq!(v, array![[2.0, 2.0], [1.0, 1.0]]);
        assert!(h.node(leaf).potential.as_ref().unwrap().is_unit());
    }

    #[test]
    fn absorption_targets_later_edge() {
        let m = HmmModel::new(array![0.3, 0.7], array![[0.9, 0.1], [0.2, 0.8]], Array2::eye(2)).unwrap();
        let g = m.chain(3).unwrap();
        let x1 = g.hidden_at(1).unwrap();
        let h = absorb_node_potential(&g, x1).unwrap();
        let e = h.edge_between(x1, g.hidden_at(2).unwrap()).unwrap();
        assert_abs_diff_eq!(h.edges()[e].potential.values(), &array![[0.27, 0.03], [0.14, 0.56]], epsilon = 1e-15);
        // Last hidden node: the leaf at the same time beats the earlier hidden neighbour.
        let mut g3 = g.clone();
        let x3 = g.hidden_at(3).unwrap();
        g3.set_node_potential(x3, Some(NodePotential::new(array![1.0, 3.0]).unwrap())).unwrap();
        let h3 = absorb_node_potential(&g3, x3).unwrap();
        let eo = h3.edge_between(x3, g.observation_at(3).unwrap()).unwrap();
        assert_eq!(h3.edges()[eo].potential.values(), &array![[1.0, 0.0], [0.0, 3.0]]);
    }

    #[test]
    fn absorbing_isolated_or_bare_node_fails() {
        let ones = EdgePotential::new(Array2::ones((2, 2))).unwrap();
        let g = ChainGraph::hmm_window(1, 2, &[], &[Some(ones)], None).unwrap();
        assert!(matches!(absorb_node_potential(&g, NodeId(0)), Err(CgmError::Structure(_))));
    }

    #[test]
    fn absorption_preserves_joint() {
        let m = HmmModel::new(
            array![0.2, 0.5, 0.3],
            array![[0.6, 0.3, 0.1], [0.2, 0.2, 0.6], [0.3, 0.3, 0.4]],
            array![[0.7, 0.3], [0.1, 0.9], [0.5, 0.5]],
        )
        .unwrap();
        for horizon in 1..=3 {
            let mut g = m.chain(horizon).unwrap();
            for id in g.node_ids().collect::<Vec<_>>() {
                if g.node(id).potential.is_none() {
                    let phi = (0..g.states(id)).map(|k| 0.5 + k as f64).collect();
                    g.set_node_potential(id, Some(NodePotential::new(phi).unwrap())).unwrap();
                }
            }
            let before = joint(&g);
            let after = joint(&absorb_all(&g).unwrap());
            for (p, q) in before.iter().zip(&after) {
                assert!((p - q).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_non_tree_and_bad_leaves() {
        let sp = StateSpace::new(1).unwrap();
        let node = |kind, time| Node { kind, time, states: sp.clone(), potential: None };
        let one = EdgePotential::new(array![[1.0]]).unwrap();
        let nodes = vec![node(NodeKind::Hidden, 1), node(NodeKind::Hidden, 2), node(NodeKind::Hidden, 3)];
        let cyc = vec![
            Edge { a: NodeId(0), b: NodeId(1), potential: one.clone() },
            Edge { a: NodeId(1), b: NodeId(2), potential: one.clone() },
            Edge { a: NodeId(2), b: NodeId(0), potential: one.clone() },
        ];
        assert!(matches!(
            ChainGraph::from_parts(nodes.clone(), cyc, BTreeSet::new()),
            Err(CgmError::Structure(_))
        ));
        let obs_mid = vec![node(NodeKind::Hidden, 1), node(NodeKind::Observation, 1), node(NodeKind::Hidden, 2)];
        let through_leaf = vec![
            Edge { a: NodeId(0), b: NodeId(1), potential: one.clone() },
            Edge { a: NodeId(1), b: NodeId(2), potential: one.clone() },
        ];
        assert!(matches!(
            ChainGraph::from_parts(obs_mid, through_leaf, BTreeSet::new()),
            Err(CgmError::Structure(_))
        ));
        let g = ChainGraph::hmm_window(1, 1, &[], &[Some(one)], None).unwrap();
        assert!(g.with_observed([NodeId(7)].into()).is_err());
    }

    #[test]
    fn aggregate_observation_validation() {
        assert!(AggregateObservation::from_distribution(array![0.5, 0.6], 10).is_err());
        assert!(AggregateObservation::from_distribution(array![0.5, 0.5], 0).is_err());
        let o = AggregateObservation::dirac(3, 2).unwrap();
        assert_eq!(o.distribution(), &array![0.0, 0.0, 1.0]);
        assert!(StateSpace::with_labels(vec!["a".into(), "a".into()]).is_err());
        assert_eq!(StateSpace::with_labels(vec!["a".into(), "b".into()]).unwrap().len(), 2);
    }
}
