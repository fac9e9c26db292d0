//! Brute-force references for small instances.
//!
//! [`ipf_joint_projection`] materializes the full joint tensor of a chain and
//! projects it onto the observed marginals by iterative proportional fitting.
//! [`forward_backward`] is the classical scaled HMM smoother. Neither shares
//! code with the message-passing engine.

use ndarray::{Array1, Array2};

use crate::error::{CgmError, Result};
use crate::model::{ChainGraph, NodeId};
use crate::sbp::{MarginalEstimate, Observations};

/// Maximal number of joint assignments the oracle will materialize.
pub const ASSIGNMENT_GUARD: u128 = 1_000_000;
pub const DEFAULT_IPF_TOLERANCE: f64 = 1e-12;
pub const MAX_IPF_CYCLES: usize = 200_000;

/// Dense row-major tensor over all node states of a graph.
#[derive(Clone, Debug)]
pub struct JointTensor {
    dims: Vec<usize>,
    strides: Vec<usize>,
    values: Vec<f64>,
}

impl JointTensor {
    /// Unnormalized product of every edge and node potential.
    pub fn from_graph(graph: &ChainGraph) -> Result<Self> {
        let dims: Vec<usize> = graph.node_ids().map(|i| graph.states(i)).collect();
        let entries = dims.iter().fold(1u128, |acc, &d| acc.saturating_mul(d as u128));
        if entries > ASSIGNMENT_GUARD {
            return Err(CgmError::Size { entries, limit: ASSIGNMENT_GUARD });
        }
        let mut strides = vec![1usize; dims.len()];
        for k in (0..dims.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * dims[k + 1];
        }
        let total = entries as usize;
        let mut values = vec![1.0; total];
        let mut idx = vec![0usize; dims.len()];
        for v in values.iter_mut() {
            for e in graph.edges() {
                *v *= e.potential.values()[[idx[e.a.0], idx[e.b.0]]];
            }
            for (i, node) in graph.nodes().iter().enumerate() {
                if let Some(p) = &node.potential {
                    *v *= p.values()[idx[i]];
                }
            }
            for k in (0..dims.len()).rev() {
                idx[k] += 1;
                if idx[k] < dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(Self { dims, strides, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Normalization constant.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    fn coord(&self, flat: usize, axis: usize) -> usize {
        (flat / self.strides[axis]) % self.dims[axis]
    }

    /// Unnormalized marginal along one axis.
    pub fn axis_sums(&self, axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dims[axis]];
        for (flat, v) in self.values.iter().enumerate() {
            out[self.coord(flat, axis)] += v;
        }
        out
    }

    pub fn node_marginal(&self, axis: usize) -> Array1<f64> {
        let sums = Array1::from(self.axis_sums(axis));
        let z = sums.sum();
        sums / z
    }

    pub fn pair_marginal(&self, a: usize, b: usize) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.dims[a], self.dims[b]));
        for (flat, v) in self.values.iter().enumerate() {
            out[[self.coord(flat, a), self.coord(flat, b)]] += v;
        }
        let z = out.sum();
        out / z
    }

    /// Multiplies every entry by `factors[x_axis]`.
    pub fn scale_axis(&mut self, axis: usize, factors: &[f64]) {
        let (stride, dim) = (self.strides[axis], self.dims[axis]);
        for (flat, v) in self.values.iter_mut().enumerate() {
            *v *= factors[(flat / stride) % dim];
        }
    }
}

#[derive(Clone, Debug)]
pub struct IpfResult {
    pub marginals: MarginalEstimate,
    /// `KL(n || prod psi)` of the projected, normalized tensor.
    pub objective: f64,
    pub cycles: usize,
    pub converged: bool,
    /// Objective after each full cycle, starting with the unprojected tensor.
    pub objective_trace: Vec<f64>,
}

fn kl_to_reference(current: &JointTensor, reference: &JointTensor) -> f64 {
    let z = current.total();
    current
        .values
        .iter()
        .zip(&reference.values)
        .map(|(&c, &q)| {
            let p = c / z;
            if p == 0.0 {
                0.0
            } else {
                p * (p / q).ln()
            }
        })
        .sum()
}

/// I-projection of the graph's joint onto the observed marginals.
///
/// Constrained axes are rescaled in increasing node order until every
/// constrained marginal is within `tolerance` in l1.
pub fn ipf_joint_projection(
    graph: &ChainGraph,
    observations: &Observations,
    tolerance: f64,
) -> Result<IpfResult> {
    let reference = JointTensor::from_graph(graph)?;
    let mut current = reference.clone();
    let mut constraints: Vec<(usize, &Array1<f64>)> = Vec::new();
    for &i in graph.observed() {
        let y = observations
            .get(&i)
            .ok_or_else(|| CgmError::Structure(format!("observed node {i} has no observation")))?;
        if y.len() != graph.states(i) {
            return Err(CgmError::LengthMismatch { left: y.len(), right: graph.states(i) });
        }
        constraints.push((i.0, y.distribution()));
    }
    constraints.sort_by_key(|(i, _)| *i);

    let deviation = |t: &JointTensor| -> f64 {
        constraints
            .iter()
            .map(|(axis, y)| {
                let m = t.node_marginal(*axis);
                m.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    };

    let mut trace = vec![kl_to_reference(&current, &reference)];
    let mut cycles = 0;
    let mut converged = constraints.is_empty() || deviation(&current) <= tolerance;
    while !converged && cycles < MAX_IPF_CYCLES {
        for (axis, y) in &constraints {
            let sums = current.axis_sums(*axis);
            let z: f64 = sums.iter().sum();
            let mut factors = vec![0.0; sums.len()];
            for (k, (&s, &target)) in sums.iter().zip(y.iter()).enumerate() {
                if target > 0.0 {
                    if s <= 0.0 {
                        return Err(CgmError::SupportViolation { node: NodeId(*axis), state: k });
                    }
                    factors[k] = target * z / s;
                }
            }
            current.scale_axis(*axis, &factors);
            // Keep the tensor near unit mass.
            let total = current.total();
            current.values.iter_mut().for_each(|v| *v /= total);
        }
        cycles += 1;
        trace.push(kl_to_reference(&current, &reference));
        converged = deviation(&current) <= tolerance;
    }

    let nodes = (0..current.order()).map(|a| current.node_marginal(a)).collect();
    let edges = graph.edges().iter().map(|e| current.pair_marginal(e.a.0, e.b.0)).collect();
    let objective = *trace.last().expect("non-empty");
    Ok(IpfResult { marginals: MarginalEstimate { nodes, edges }, objective, cycles, converged, objective_trace: trace })
}

/// Scaled forward-backward smoother for a single observed symbol sequence.
///
/// Returns `p(x_t | o_1..o_T)` for every `t`.
pub fn forward_backward(
    prior: &Array1<f64>,
    transition: &Array2<f64>,
    observation: &Array2<f64>,
    symbols: &[usize],
) -> Result<Vec<Array1<f64>>> {
    let d = prior.len();
    if transition.dim() != (d, d) || observation.nrows() != d {
        return Err(CgmError::Model("forward-backward parameter shapes disagree".into()));
    }
    if let Some(&bad) = symbols.iter().find(|&&o| o >= observation.ncols()) {
        return Err(CgmError::Validation(format!("symbol {bad} outside the observation alphabet")));
    }
    let horizon = symbols.len();
    let mut alpha: Vec<Array1<f64>> = Vec::with_capacity(horizon);
    for (t, &o) in symbols.iter().enumerate() {
        let predicted = if t == 0 { prior.clone() } else { alpha[t - 1].dot(transition) };
        let mut a = &predicted * &observation.column(o);
        let z = a.sum();
        if z.is_nan() || z <= 0.0 {
            return Err(CgmError::SupportViolation { node: NodeId(t), state: o });
        }
        a /= z;
        alpha.push(a);
    }
    let mut beta = vec![Array1::ones(d); horizon];
    for t in (0..horizon.saturating_sub(1)).rev() {
        let weighted = &beta[t + 1] * &observation.column(symbols[t + 1]);
        let mut b = transition.dot(&weighted);
        let z = b.sum();
        b /= z;
        beta[t] = b;
    }
    Ok(alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| {
            let g = a * b;
            let z = g.sum();
            g / z
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AggregateObservation, EdgePotential, HmmModel};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use std::collections::BTreeSet;

    #[test]
    fn unconstrained_is_plain_marginalization() {
        let m = HmmModel::new(array![0.3, 0.7], array![[0.9, 0.1], [0.4, 0.6]], array![[0.8, 0.2], [0.1, 0.9]])
            .unwrap();
        let g = m.chain(2).unwrap().with_observed(BTreeSet::new()).unwrap();
        let r = ipf_joint_projection(&g, &Observations::new(), 1e-12).unwrap();
        assert_eq!(r.cycles, 0);
        assert_abs_diff_eq!(r.marginals.node(g.hidden_at(1).unwrap()), &array![0.3, 0.7], epsilon = 1e-15);
        assert_abs_diff_eq!(
            r.marginals.node(g.hidden_at(2).unwrap()),
            &array![0.3 * 0.9 + 0.7 * 0.4, 0.3 * 0.1 + 0.7 * 0.6],
            epsilon = 1e-15
        );
        // Normalized HMM: objective is -ln Z = 0.
        assert_abs_diff_eq!(r.objective, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn single_constraint_closed_form() {
        let psi = EdgePotential::new(array![[0.4, 0.1], [0.2, 0.3]]).unwrap();
        let g = ChainGraph::hmm_window(1, 2, &[], &[Some(psi)], None).unwrap();
        let (x, o) = (g.hidden_at(1).unwrap(), g.observation_at(1).unwrap());
        let g = g.with_observed([x].into()).unwrap();
        let obs = Observations::from([(x, AggregateObservation::from_distribution(array![0.8, 0.2], 10).unwrap())]);
        let r = ipf_joint_projection(&g, &obs, 1e-14).unwrap();
        assert_eq!(r.cycles, 1);
        assert_abs_diff_eq!(r.marginals.edge(0), &array![[0.64, 0.16], [0.08, 0.12]], epsilon = 1e-15);
        assert_abs_diff_eq!(r.marginals.node(o), &array![0.72, 0.28], epsilon = 1e-15);
    }

    #[test]
    fn two_leaves_converge_and_match() {
        let m = HmmModel::new(array![0.5, 0.5], array![[0.7, 0.3], [0.2, 0.8]], array![[0.9, 0.1], [0.3, 0.7]])
            .unwrap();
        let g = m.chain(2).unwrap();
        let y1 = array![0.35, 0.65];
        let y2 = array![0.8, 0.2];
        let obs = Observations::from([
            (g.observation_at(1).unwrap(), AggregateObservation::from_distribution(y1.clone(), 20).unwrap()),
            (g.observation_at(2).unwrap(), AggregateObservation::from_distribution(y2.clone(), 20).unwrap()),
        ]);
        let r = ipf_joint_projection(&g, &obs, 1e-12).unwrap();
        assert!(r.converged);
        assert_abs_diff_eq!(r.marginals.node(g.observation_at(1).unwrap()), &y1, epsilon = 1e-10);
        assert_abs_diff_eq!(r.marginals.node(g.observation_at(2).unwrap()), &y2, epsilon = 1e-10);
        // The projection can only climb from the unconstrained minimum -ln Z toward the constrained optimum.
        for w in r.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-14, "{:?}", r.objective_trace);
        }
    }

    #[test]
    fn guard_and_support() {
        let m = HmmModel::new(Array1::from_elem(4, 0.25), Array2::from_elem((4, 4), 0.25), Array2::eye(4)).unwrap();
        let g = m.chain(6).unwrap();
        assert!(matches!(JointTensor::from_graph(&g), Err(CgmError::Size { .. })));

        let m = HmmModel::new(array![1.0, 0.0], Array2::eye(2), Array2::eye(2)).unwrap();
        let g = m.chain(1).unwrap();
        let obs = Observations::from([(g.observation_at(1).unwrap(), AggregateObservation::dirac(2, 1).unwrap())]);
        assert!(matches!(ipf_joint_projection(&g, &obs, 1e-12), Err(CgmError::SupportViolation { .. })));
    }

    #[test]
    fn forward_backward_examples() {
        let eye = Array2::<f64>::eye(2);
        let u = array![0.5, 0.5];
        let out = forward_backward(&u, &eye, &eye, &[0, 0, 0]).unwrap();
        for m in &out {
            assert_abs_diff_eq!(m, &array![1.0, 0.0]);
        }
        let flat = Array2::from_elem((2, 2), 0.5);
        let out = forward_backward(&u, &flat, &eye, &[0, 1]).unwrap();
        assert_abs_diff_eq!(&out[0], &array![1.0, 0.0]);
        assert_abs_diff_eq!(&out[1], &array![0.0, 1.0]);
        assert!(matches!(
            forward_backward(&u, &eye, &eye, &[0, 1]),
            Err(CgmError::SupportViolation { .. })
        ));
    }

    #[test]
    fn forward_backward_agrees_with_ipf_on_diracs() {
        let m = HmmModel::new(
            array![0.6, 0.4],
            array![[0.75, 0.25], [0.35, 0.65]],
            array![[0.85, 0.15], [0.3, 0.7]],
        )
        .unwrap();
        let symbols = [1usize, 0, 1];
        let g = m.chain(3).unwrap();
        let obs: Observations = symbols
            .iter()
            .enumerate()
            .map(|(k, &s)| (g.observation_at(k + 1).unwrap(), AggregateObservation::dirac(2, s).unwrap()))
            .collect();
        let r = ipf_joint_projection(&g, &obs, 1e-13).unwrap();
        let fb = forward_backward(m.prior(), m.transition(), m.observation(), &symbols).unwrap();
        for (t, f) in fb.iter().enumerate() {
            let s = r.marginals.node(g.hidden_at(t + 1).unwrap());
            assert_abs_diff_eq!(s, f, epsilon = 1e-10);
            assert_abs_diff_eq!(f.sum(), 1.0, epsilon = 1e-12);
        }
    }
}
