//! Sinkhorn belief propagation on chain graphs.
//!
//! Unobserved nodes send ordinary sum-product messages. Observed nodes send
//! Sinkhorn scaling messages: the ratio of the observed marginal to the
//! incoming message, pushed through the edge potential. Updates follow the
//! constrained-node tour: for each observed node in time order, refresh its
//! outgoing messages, then every message on the path to the next observed
//! node (cyclically). At the fixed point the resulting node and edge beliefs
//! minimize the Bethe free energy subject to the observed marginals.
//!
//! Messages are kept normalized in the linear domain. Node potentials are
//! applied as multiplicative factors at their node, which is equivalent to
//! absorbing them into an incident edge.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use crate::error::{CgmError, Result};
use crate::model::{AggregateObservation, ChainGraph, NodeId};

pub type Observations = BTreeMap<NodeId, AggregateObservation>;

pub const DEFAULT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_MAX_SWEEPS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SbpOptions {
    /// Stop once a full sweep changes no message entry by more than this.
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// Floor observed distributions at this value (then renormalize). Off by default.
    pub observation_floor: Option<f64>,
}

impl Default for SbpOptions {
    fn default() -> Self {
        Self { tolerance: DEFAULT_TOLERANCE, max_sweeps: DEFAULT_MAX_SWEEPS, observation_floor: None }
    }
}

/// One normalized message per direction of every edge.
///
/// Slot `2e` holds the message `a -> b` of edge `e`, slot `2e + 1` the message `b -> a`.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageStore {
    endpoints: Vec<(NodeId, NodeId)>,
    messages: Vec<Array1<f64>>,
}

impl MessageStore {
    pub fn uniform(graph: &ChainGraph) -> Self {
        let mut endpoints = Vec::with_capacity(2 * graph.edges().len());
        let mut messages = Vec::with_capacity(2 * graph.edges().len());
        for e in graph.edges() {
            endpoints.push((e.a, e.b));
            messages.push(uniform(graph.states(e.b)));
            endpoints.push((e.b, e.a));
            messages.push(uniform(graph.states(e.a)));
        }
        Self { endpoints, messages }
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    fn slot(&self, from: NodeId, to: NodeId) -> Option<usize> {
        self.endpoints.iter().position(|&(f, t)| f == from && t == to)
    }

    /// Message `from -> to`, over `to`'s states.
    pub fn get(&self, from: NodeId, to: NodeId) -> Option<&Array1<f64>> {
        self.slot(from, to).map(|s| &self.messages[s])
    }

    pub fn set(&mut self, from: NodeId, to: NodeId, message: Array1<f64>) -> Result<()> {
        let s = self
            .slot(from, to)
            .ok_or_else(|| CgmError::Structure(format!("no edge {from} -> {to}")))?;
        if message.len() != self.messages[s].len() {
            return Err(CgmError::LengthMismatch { left: message.len(), right: self.messages[s].len() });
        }
        self.messages[s] = message;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = ((NodeId, NodeId), &Array1<f64>)> {
        self.endpoints.iter().copied().zip(self.messages.iter())
    }

    /// Builds a store for `target` by copying messages whose endpoints match
    /// `source` nodes of the same kind and time; unmatched edges start uniform.
    pub fn transplant(&self, source: &ChainGraph, target: &ChainGraph) -> Self {
        let key = |g: &ChainGraph, id: NodeId| {
            let n = g.node(id);
            (n.kind, n.time)
        };
        let known: HashMap<_, &Array1<f64>> = self
            .iter()
            .map(|((f, t), m)| ((key(source, f), key(source, t)), m))
            .collect();
        let mut out = Self::uniform(target);
        for (slot, &(f, t)) in out.endpoints.iter().enumerate() {
            if let Some(m) = known.get(&(key(target, f), key(target, t))) {
                if m.len() == out.messages[slot].len() {
                    out.messages[slot] = (*m).clone();
                }
            }
        }
        out
    }

    fn matches(&self, graph: &ChainGraph) -> bool {
        self.messages.len() == 2 * graph.edges().len()
            && graph.edges().iter().enumerate().all(|(e, edge)| {
                self.endpoints[2 * e] == (edge.a, edge.b)
                    && self.endpoints[2 * e + 1] == (edge.b, edge.a)
                    && self.messages[2 * e].len() == graph.states(edge.b)
                    && self.messages[2 * e + 1].len() == graph.states(edge.a)
            })
    }
}

fn uniform(d: usize) -> Array1<f64> {
    Array1::from_elem(d, 1.0 / d as f64)
}

fn normalized(mut v: Array1<f64>, node: NodeId, context: &str) -> Result<Array1<f64>> {
    let sum = v.sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(CgmError::NumericalDegeneracy { node, context: context.to_string() });
    }
    v /= sum;
    Ok(v)
}

/// `out(x_j) = sum_i psi(x_i, x_j) f(x_i)` with `psi` oriented sender-by-receiver.
fn push_through(psi: ArrayView2<'_, f64>, factor: &Array1<f64>) -> Array1<f64> {
    psi.t().dot(factor)
}

/// Scaling factor `y / m` of an observed sender, zero where `y` is zero.
fn scaling_factor(
    y: ArrayView1<'_, f64>,
    incoming: ArrayView1<'_, f64>,
    node: NodeId,
) -> Result<Array1<f64>> {
    let mut out = Array1::zeros(y.len());
    let mut peak = 0.0f64;
    for (k, (&yk, &mk)) in y.iter().zip(incoming.iter()).enumerate() {
        if yk > 0.0 {
            if mk <= 0.0 {
                return Err(CgmError::SupportViolation { node, state: k });
            }
            let r = yk / mk;
            out[k] = r;
            peak = peak.max(r);
        }
    }
    if peak.is_finite() && peak > 0.0 {
        out /= peak;
    }
    Ok(out)
}

/// Product of the node potential of `i` with every incoming message except the one from `exclude`.
///
/// With `exclude = Some(j)` this is the factor that the edge `(i, j)` turns
/// into the message `i -> j`.
pub fn belief_factor(graph: &ChainGraph, store: &MessageStore, i: NodeId, exclude: Option<NodeId>) -> Array1<f64> {
    let mut f = match &graph.node(i).potential {
        Some(p) => p.values().clone(),
        None => Array1::ones(graph.states(i)),
    };
    for k in graph.neighbors(i) {
        if Some(k) != exclude {
            let m = store.get(k, i).expect("store bound to graph");
            f *= m;
        }
    }
    f
}

fn require_neighbors(graph: &ChainGraph, store: &MessageStore, i: NodeId, j: NodeId) -> Result<()> {
    if i.0 >= graph.num_nodes() || j.0 >= graph.num_nodes() || graph.edge_between(i, j).is_none() {
        return Err(CgmError::Structure(format!("{i} and {j} are not adjacent")));
    }
    if !store.matches(graph) {
        return Err(CgmError::Structure("message store does not belong to this graph".into()));
    }
    Ok(())
}

/// Sum-product message `i -> j` from an unobserved node.
pub fn update_hidden_message(
    graph: &ChainGraph,
    store: &MessageStore,
    i: NodeId,
    j: NodeId,
) -> Result<Array1<f64>> {
    require_neighbors(graph, store, i, j)?;
    let f = belief_factor(graph, store, i, Some(j));
    let psi = graph.oriented_potential(i, j).expect("adjacent");
    normalized(push_through(psi, &f), i, "hidden-node message vanished")
}

/// Sinkhorn scaling message `i -> j` from an observed node with marginal `y`.
pub fn update_observed_message(
    graph: &ChainGraph,
    store: &MessageStore,
    i: NodeId,
    y: &AggregateObservation,
    j: NodeId,
) -> Result<Array1<f64>> {
    require_neighbors(graph, store, i, j)?;
    if y.len() != graph.states(i) {
        return Err(CgmError::LengthMismatch { left: y.len(), right: graph.states(i) });
    }
    let incoming = store.get(j, i).expect("store bound to graph");
    let f = scaling_factor(y.distribution().view(), incoming.view(), i)?;
    let psi = graph.oriented_potential(i, j).expect("adjacent");
    normalized(push_through(psi, &f), i, "observed-node message vanished")
}

/// Normalized product of all messages into `i` (times its node potential).
pub fn node_marginal(graph: &ChainGraph, store: &MessageStore, i: NodeId) -> Result<Array1<f64>> {
    if i.0 >= graph.num_nodes() {
        return Err(CgmError::Structure(format!("node {i} does not exist")));
    }
    if !store.matches(graph) {
        return Err(CgmError::Structure("message store does not belong to this graph".into()));
    }
    normalized(belief_factor(graph, store, i, None), i, "node belief vanished")
}

/// Pairwise belief on edge `(i, j)`, rows indexed by `i`.
///
/// An observed endpoint contributes its scaling factor `y / m` in place of
/// the product of its other incoming messages.
pub fn edge_marginal(
    graph: &ChainGraph,
    observations: &Observations,
    store: &MessageStore,
    i: NodeId,
    j: NodeId,
) -> Result<Array2<f64>> {
    require_neighbors(graph, store, i, j)?;
    let side = |u: NodeId, v: NodeId| -> Result<Array1<f64>> {
        match observations.get(&u) {
            Some(y) if graph.is_observed(u) => {
                scaling_factor(y.distribution().view(), store.get(v, u).expect("bound").view(), u)
            }
            _ => Ok(belief_factor(graph, store, u, Some(v))),
        }
    };
    let fi = side(i, j)?;
    let fj = side(j, i)?;
    let psi = graph.oriented_potential(i, j).expect("adjacent");
    let mut b = psi.to_owned();
    Zip::indexed(&mut b).for_each(|(r, c), v| *v *= fi[r] * fj[c]);
    let z = b.sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(CgmError::NumericalDegeneracy { node: i, context: "edge belief vanished".into() });
    }
    b /= z;
    Ok(b)
}

/// Node and edge beliefs. Edge `e` is oriented as stored in the graph (`a` rows, `b` columns).
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalEstimate {
    pub nodes: Vec<Array1<f64>>,
    pub edges: Vec<Array2<f64>>,
}

impl MarginalEstimate {
    pub fn node(&self, id: NodeId) -> &Array1<f64> {
        &self.nodes[id.0]
    }

    pub fn edge(&self, e: usize) -> &Array2<f64> {
        &self.edges[e]
    }

    /// Largest violation of row/column-sum consistency between edge and node beliefs.
    pub fn consistency_error(&self, graph: &ChainGraph) -> f64 {
        let mut worst = 0.0f64;
        for (e, edge) in graph.edges().iter().enumerate() {
            let b = &self.edges[e];
            let rows = b.sum_axis(ndarray::Axis(1));
            let cols = b.sum_axis(ndarray::Axis(0));
            for (x, y) in rows.iter().zip(self.nodes[edge.a.0].iter()) {
                worst = worst.max((x - y).abs());
            }
            for (x, y) in cols.iter().zip(self.nodes[edge.b.0].iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        for n in &self.nodes {
            worst = worst.max((n.sum() - 1.0).abs());
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SbpDiagnostics {
    pub sweeps: usize,
    /// Max absolute change of any scheduled message over the last sweep.
    pub residual: f64,
    pub converged: bool,
    pub wall_time: Duration,
    /// Total number of message updates performed, including the initial pass.
    pub message_updates: usize,
    pub updates_per_sweep: usize,
}

#[derive(Clone, Debug)]
pub struct SbpSolution {
    pub store: MessageStore,
    pub marginals: MarginalEstimate,
    pub diagnostics: SbpDiagnostics,
}

/// Allowed mismatch between edge-belief row/column sums and node beliefs.
pub const CONSISTENCY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
struct Slot {
    from: NodeId,
    to: NodeId,
    observed: bool,
}

/// Receiver-by-sender matrix for one message direction, sparse when mostly zero.
#[derive(Clone, Debug)]
enum Kernel {
    Dense(Array2<f64>),
    Sparse { row_start: Vec<usize>, cols: Vec<usize>, values: Vec<f64> },
}

impl Kernel {
    fn new(m: ArrayView2<'_, f64>) -> Self {
        let nonzero = m.iter().filter(|v| **v != 0.0).count();
        if 4 * nonzero >= m.len() {
            return Kernel::Dense(m.as_standard_layout().into_owned());
        }
        let mut row_start = Vec::with_capacity(m.nrows() + 1);
        let mut cols = Vec::with_capacity(nonzero);
        let mut values = Vec::with_capacity(nonzero);
        for row in m.rows() {
            row_start.push(cols.len());
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    cols.push(c);
                    values.push(v);
                }
            }
        }
        row_start.push(cols.len());
        Kernel::Sparse { row_start, cols, values }
    }

    fn apply(&self, f: &Array1<f64>) -> Array1<f64> {
        match self {
            Kernel::Dense(m) => m.dot(f),
            Kernel::Sparse { row_start, cols, values } => row_start
                .windows(2)
                .map(|w| (w[0]..w[1]).map(|k| values[k] * f[cols[k]]).sum())
                .collect(),
        }
    }
}

/// Precomputed update orders for one graph and observed set.
#[derive(Clone, Debug)]
pub struct SbpSolver<'g> {
    graph: &'g ChainGraph,
    targets: BTreeMap<NodeId, Array1<f64>>,
    slots: Vec<Slot>,
    /// Incoming slot indices per node, with their sender.
    incoming: Vec<Vec<(NodeId, usize)>>,
    init_order: Vec<usize>,
    sweep_order: Vec<usize>,
    swept: Vec<usize>,
    refresh_order: Vec<usize>,
    /// Per edge: kernels for the `a -> b` and `b -> a` messages.
    kernels: Vec<[Kernel; 2]>,
    options: SbpOptions,
}

impl<'g> SbpSolver<'g> {
    pub fn new(graph: &'g ChainGraph, observations: &Observations, options: SbpOptions) -> Result<Self> {
        if options.tolerance.is_nan() || options.tolerance <= 0.0 || options.max_sweeps == 0 {
            return Err(CgmError::Validation("tolerance and max_sweeps must be positive".into()));
        }
        let mut targets = BTreeMap::new();
        for &i in graph.observed() {
            let y = observations
                .get(&i)
                .ok_or_else(|| CgmError::Structure(format!("observed node {i} has no observation")))?;
            if y.len() != graph.states(i) {
                return Err(CgmError::LengthMismatch { left: y.len(), right: graph.states(i) });
            }
            let mut v = y.distribution().clone();
            if let Some(eps) = options.observation_floor {
                v.mapv_inplace(|p| p.max(eps));
                let s = v.sum();
                v /= s;
            }
            targets.insert(i, v);
        }
        if let Some(extra) = observations.keys().find(|k| !graph.is_observed(**k)) {
            return Err(CgmError::Structure(format!("observation given for unobserved node {extra}")));
        }

        let n = graph.num_nodes();
        let mut slots = Vec::with_capacity(2 * graph.edges().len());
        let mut incoming = vec![Vec::new(); n];
        let mut slot_of = HashMap::new();
        for e in graph.edges() {
            for (from, to) in [(e.a, e.b), (e.b, e.a)] {
                let s = slots.len();
                slots.push(Slot { from, to, observed: graph.is_observed(from) });
                incoming[to.0].push((from, s));
                slot_of.insert((from, to), s);
            }
        }

        let mut constrained: Vec<NodeId> = graph.observed().iter().copied().collect();
        constrained.sort_by_key(|&i| {
            let node = graph.node(i);
            (node.time, node.kind, i)
        });

        // Two-pass tree order rooted at the first constrained node.
        let root = constrained.first().copied().unwrap_or(NodeId(0));
        let (bfs, parent) = bfs(graph, root);
        let mut init_order = Vec::with_capacity(slots.len());
        for &u in bfs.iter().rev() {
            if let Some(p) = parent[u.0] {
                init_order.push(slot_of[&(u, p)]);
            }
        }
        for &u in &bfs {
            if let Some(p) = parent[u.0] {
                init_order.push(slot_of[&(p, u)]);
            }
        }

        let mut sweep_order = Vec::new();
        if !constrained.is_empty() {
            for (k, &i) in constrained.iter().enumerate() {
                for j in graph.neighbors(i) {
                    sweep_order.push(slot_of[&(i, j)]);
                }
                let next = constrained[(k + 1) % constrained.len()];
                let path = tree_path(graph, i, next);
                for w in path.windows(2).skip(1) {
                    sweep_order.push(slot_of[&(w[0], w[1])]);
                }
            }
        }
        let mut in_sweep = vec![false; slots.len()];
        let mut swept = Vec::new();
        for &s in &sweep_order {
            if !in_sweep[s] {
                in_sweep[s] = true;
                swept.push(s);
            }
        }
        let refresh_order = init_order.iter().copied().filter(|s| !in_sweep[*s]).collect();

        Ok(Self {
            graph,
            targets,
            slots,
            incoming,
            init_order,
            sweep_order,
            swept,
            refresh_order,
            kernels: graph
                .edges()
                .iter()
                .map(|e| {
                    let psi = e.potential.values();
                    [Kernel::new(psi.t()), Kernel::new(psi.view())]
                })
                .collect(),
            options,
        })
    }

    pub fn updates_per_sweep(&self) -> usize {
        self.sweep_order.len()
    }

    fn compute(&self, store: &MessageStore, s: usize) -> Result<Array1<f64>> {
        let Slot { from, to, observed } = self.slots[s];
        let factor = if observed {
            let back = self.incoming[from.0]
                .iter()
                .find(|(k, _)| *k == to)
                .map(|(_, t)| *t)
                .expect("reverse slot");
            scaling_factor(self.targets[&from].view(), store.messages[back].view(), from)?
        } else {
            let mut f = match &self.graph.node(from).potential {
                Some(p) => p.values().clone(),
                None => Array1::ones(self.graph.states(from)),
            };
            for &(k, t) in &self.incoming[from.0] {
                if k != to {
                    f *= &store.messages[t];
                }
            }
            f
        };
        // Slot 2e runs a -> b, slot 2e + 1 runs b -> a.
        normalized(self.kernels[s / 2][s % 2].apply(&factor), from, "message vanished")
    }

    fn apply(&self, store: &mut MessageStore, order: &[usize]) -> Result<()> {
        for &s in order {
            store.messages[s] = self.compute(store, s)?;
        }
        Ok(())
    }

    /// Initial pass over every message in two-pass tree order.
    pub fn initial_pass(&self, store: &mut MessageStore) -> Result<()> {
        self.apply(store, &self.init_order)
    }

    /// One pass of the constrained-node tour; returns the max absolute change
    /// of any message it touches.
    pub fn sweep(&self, store: &mut MessageStore) -> Result<f64> {
        let before: Vec<Array1<f64>> = self.swept.iter().map(|&s| store.messages[s].clone()).collect();
        self.apply(store, &self.sweep_order)?;
        let mut residual = 0.0f64;
        for (&s, old) in self.swept.iter().zip(&before) {
            for (a, b) in store.messages[s].iter().zip(old.iter()) {
                residual = residual.max((a - b).abs());
            }
        }
        Ok(residual)
    }

    /// Recomputes messages that no sweep touches (those leaving the constrained subtree).
    pub fn refresh(&self, store: &mut MessageStore) -> Result<()> {
        self.apply(store, &self.refresh_order)
    }

    pub fn marginals(&self, store: &MessageStore) -> Result<MarginalEstimate> {
        let graph = self.graph;
        let mut nodes = Vec::with_capacity(graph.num_nodes());
        for i in graph.node_ids() {
            nodes.push(match self.targets.get(&i) {
                Some(y) => y.clone(),
                None => node_marginal(graph, store, i)?,
            });
        }
        let observations: Observations = self
            .targets
            .iter()
            .map(|(k, v)| (*k, AggregateObservation::from_distribution(v.clone(), 1).expect("normalized")))
            .collect();
        let mut edges = Vec::with_capacity(graph.edges().len());
        for edge in graph.edges() {
            edges.push(edge_marginal(graph, &observations, store, edge.a, edge.b)?);
        }
        Ok(MarginalEstimate { nodes, edges })
    }

    pub fn solve(&self, mut store: MessageStore) -> Result<SbpSolution> {
        if !store.matches(self.graph) {
            return Err(CgmError::Structure("message store does not belong to this graph".into()));
        }
        let start = Instant::now();
        self.initial_pass(&mut store)?;
        let mut updates = self.init_order.len();
        let mut sweeps = 0;
        let mut residual = 0.0;
        let mut converged = self.sweep_order.is_empty();
        while !converged && sweeps < self.options.max_sweeps {
            residual = self.sweep(&mut store)?;
            sweeps += 1;
            updates += self.sweep_order.len();
            converged = residual <= self.options.tolerance;
        }
        self.refresh(&mut store)?;
        updates += self.refresh_order.len();
        let marginals = self.marginals(&store)?;
        let diagnostics = SbpDiagnostics {
            sweeps,
            residual,
            converged,
            wall_time: start.elapsed(),
            message_updates: updates,
            updates_per_sweep: self.sweep_order.len(),
        };
        Ok(SbpSolution { store, marginals, diagnostics })
    }
}

fn bfs(graph: &ChainGraph, root: NodeId) -> (Vec<NodeId>, Vec<Option<NodeId>>) {
    let mut order = Vec::with_capacity(graph.num_nodes());
    let mut parent = vec![None; graph.num_nodes()];
    let mut seen = vec![false; graph.num_nodes()];
    let mut queue = VecDeque::from([root]);
    seen[root.0] = true;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for v in graph.neighbors(u) {
            if !seen[v.0] {
                seen[v.0] = true;
                parent[v.0] = Some(u);
                queue.push_back(v);
            }
        }
    }
    (order, parent)
}

/// Node sequence of the unique tree path `from ..= to`.
fn tree_path(graph: &ChainGraph, from: NodeId, to: NodeId) -> Vec<NodeId> {
    if from == to {
        return vec![from];
    }
    let (_, parent) = bfs(graph, from);
    let mut path = vec![to];
    let mut cur = to;
    while let Some(p) = parent[cur.0] {
        path.push(p);
        cur = p;
    }
    path.reverse();
    path
}

/// Runs SBP to convergence from uniform messages.
pub fn run_sbp(graph: &ChainGraph, observations: &Observations, options: SbpOptions) -> Result<SbpSolution> {
    run_sbp_from(graph, observations, options, MessageStore::uniform(graph))
}

/// Runs SBP starting from the given messages.
pub fn run_sbp_from(
    graph: &ChainGraph,
    observations: &Observations,
    options: SbpOptions,
    store: MessageStore,
) -> Result<SbpSolution> {
    SbpSolver::new(graph, observations, options)?.solve(store)
}

fn xlogy_ratio(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if y == 0.0 {
        f64::INFINITY
    } else {
        x * (x / y).ln()
    }
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Bethe free energy of consistent beliefs:
/// `sum_edges sum n_ij ln(n_ij / psi_ij) - sum_nodes (deg - 1) sum n_i ln n_i`,
/// minus `sum n_i ln phi_i` for nodes carrying a potential.
pub fn bethe_free_energy(graph: &ChainGraph, marginals: &MarginalEstimate) -> Result<f64> {
    if marginals.nodes.len() != graph.num_nodes() || marginals.edges.len() != graph.edges().len() {
        return Err(CgmError::Validation("marginals do not match the graph".into()));
    }
    for (i, n) in marginals.nodes.iter().enumerate() {
        if n.len() != graph.states(NodeId(i)) {
            return Err(CgmError::LengthMismatch { left: n.len(), right: graph.states(NodeId(i)) });
        }
    }
    let err = marginals.consistency_error(graph);
    if err.is_nan() || err > CONSISTENCY_TOL {
        return Err(CgmError::Validation(format!("marginals are inconsistent by {err:e}")));
    }
    let mut energy = 0.0;
    for (e, edge) in graph.edges().iter().enumerate() {
        let b = &marginals.edges[e];
        if b.dim() != edge.potential.shape() {
            return Err(CgmError::Validation(format!("edge {e} belief has the wrong shape")));
        }
        energy += Zip::from(b)
            .and(edge.potential.values())
            .fold(0.0, |acc, &n, &psi| acc + xlogy_ratio(n, psi));
    }
    for i in graph.node_ids() {
        let n = marginals.node(i);
        let deg = graph.degree(i) as f64;
        energy -= (deg - 1.0) * n.iter().map(|&p| xlogx(p)).sum::<f64>();
        if let Some(phi) = &graph.node(i).potential {
            // The potential acts as an extra factor: -sum n ln phi, infinite where phi vanishes under mass.
            for (&p, &w) in n.iter().zip(phi.values().iter()) {
                if p > 0.0 {
                    energy -= if w > 0.0 { p * w.ln() } else { f64::NEG_INFINITY };
                }
            }
        }
    }
    Ok(energy)
}
