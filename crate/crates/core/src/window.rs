//! Sliding-window incremental inference.
//!
//! After an initial solve on the first `K` observations, each advance keeps
//! only the `K` most recent observations. The naive variant forgets
//! everything older. The other two add one boundary hidden node at time
//! `t - K` that summarizes the discarded history:
//!
//! * [`WindowVariant::ConstrainedMarginal`] pins its marginal to the estimate
//!   from the previous window;
//! * [`WindowVariant::PotentialUpdate`] gives it a node potential equal to the
//!   factor behind the previous window's message toward `t - K + 1`, so the
//!   boundary node re-emits exactly that message. With single-trajectory
//!   observations this is exact filtering.

use std::collections::VecDeque;
use std::time::Duration;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{CgmError, Result};
use crate::model::{absorb_node_potential, AggregateObservation, ChainGraph, HmmModel, NodePotential};
use crate::sbp::{belief_factor, run_sbp, run_sbp_from, MessageStore, Observations, SbpDiagnostics, SbpOptions, SbpSolution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WindowVariant {
    Naive,
    ConstrainedMarginal,
    PotentialUpdate,
}

/// History carried across the window boundary.
#[derive(Clone, Debug, PartialEq)]
pub enum Carried {
    Nothing,
    /// Estimate of the boundary node's marginal.
    Marginal(Array1<f64>),
    /// Node potential for the boundary node.
    Potential(NodePotential),
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub time: usize,
    /// Filtered marginal at `time`.
    pub marginal: Array1<f64>,
    pub diagnostics: SbpDiagnostics,
    pub wall_time: Duration,
}

impl StepResult {
    fn from_solution(graph: &ChainGraph, time: usize, solution: &SbpSolution) -> Self {
        let node = graph.hidden_at(time).expect("window ends at the current time");
        Self {
            time,
            marginal: solution.marginals.node(node).clone(),
            diagnostics: solution.diagnostics,
            wall_time: solution.diagnostics.wall_time,
        }
    }
}

/// Sequential inference state for one variant; advance once per new observation.
#[derive(Clone, Debug)]
pub struct WindowState {
    variant: WindowVariant,
    window: usize,
    time: usize,
    model: HmmModel,
    options: SbpOptions,
    recent: VecDeque<AggregateObservation>,
    graph: ChainGraph,
    carried: Carried,
    cache: MessageStore,
}

fn leaf_observations(graph: &ChainGraph, recent: &VecDeque<AggregateObservation>, first: usize) -> Observations {
    recent
        .iter()
        .enumerate()
        .map(|(k, y)| (graph.observation_at(first + k).expect("leaf per observation"), y.clone()))
        .collect()
}

/// Boundary data for the window after `time`, whose head is hidden node `time - K + 1`.
fn extract_carry(
    variant: WindowVariant,
    graph: &ChainGraph,
    time: usize,
    window: usize,
    solution: &SbpSolution,
) -> Result<Carried> {
    let head_time = time + 1 - window;
    let head = graph.hidden_at(head_time).expect("head inside window");
    Ok(match variant {
        WindowVariant::Naive => Carried::Nothing,
        WindowVariant::ConstrainedMarginal => Carried::Marginal(solution.marginals.node(head).clone()),
        WindowVariant::PotentialUpdate => {
            let successor = graph.hidden_at(head_time + 1);
            let mut phi = belief_factor(graph, &solution.store, head, successor);
            let z = phi.sum();
            if !(z > 0.0 && z.is_finite()) {
                return Err(CgmError::NumericalDegeneracy {
                    node: head,
                    context: "carried boundary potential vanished".into(),
                });
            }
            phi /= z;
            Carried::Potential(NodePotential::new(phi)?)
        }
    })
}

impl WindowState {
    /// Solves the initial window on observations `1..=K` (prior on node 1).
    pub fn init(
        model: HmmModel,
        variant: WindowVariant,
        window: usize,
        first: &[AggregateObservation],
        options: SbpOptions,
    ) -> Result<(Self, StepResult)> {
        if window == 0 {
            return Err(CgmError::Validation("window length must be at least 1".into()));
        }
        if first.len() != window {
            return Err(CgmError::Validation(format!(
                "initial window needs {window} observations, got {}",
                first.len()
            )));
        }
        let graph = model.chain(window)?;
        let recent: VecDeque<_> = first.iter().cloned().collect();
        let observations = leaf_observations(&graph, &recent, 1);
        let solution = run_sbp(&graph, &observations, options)?;
        let step = StepResult::from_solution(&graph, window, &solution);
        let carried = extract_carry(variant, &graph, window, window, &solution)?;
        let state = Self {
            variant,
            window,
            time: window,
            model,
            options,
            recent,
            graph,
            carried,
            cache: solution.store,
        };
        Ok((state, step))
    }

    pub fn variant(&self) -> WindowVariant {
        self.variant
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    /// Time of the latest incorporated observation.
    pub fn time(&self) -> usize {
        self.time
    }

    pub fn graph(&self) -> &ChainGraph {
        &self.graph
    }

    pub fn carried(&self) -> &Carried {
        &self.carried
    }

    pub fn cache(&self) -> &MessageStore {
        &self.cache
    }

    /// Window graph and observations at time `t` from the carried data.
    fn build_window(&self, t: usize, carried: &Carried) -> Result<(ChainGraph, Observations)> {
        let k = self.window;
        let leaves_from = t + 1 - k;
        match (self.variant, carried) {
            (WindowVariant::Naive, _) => {
                let graph = self.model.window_graph(leaves_from, t, leaves_from, None)?;
                let obs = leaf_observations(&graph, &self.recent, leaves_from);
                Ok((graph, obs))
            }
            (WindowVariant::ConstrainedMarginal, Carried::Marginal(estimate)) => {
                let graph = self.model.window_graph(t - k, t, leaves_from, None)?;
                let head = graph.hidden_at(t - k).expect("head");
                let mut observed = graph.observed().clone();
                observed.insert(head);
                let graph = graph.with_observed(observed)?;
                let mut obs = leaf_observations(&graph, &self.recent, leaves_from);
                let population = self.recent.back().map_or(1, AggregateObservation::population);
                obs.insert(head, AggregateObservation::from_distribution(estimate.clone(), population)?);
                Ok((graph, obs))
            }
            (WindowVariant::PotentialUpdate, Carried::Potential(phi)) => {
                let graph = self.model.window_graph(t - k, t, leaves_from, Some(phi.clone()))?;
                let head = graph.hidden_at(t - k).expect("head");
                let graph = absorb_node_potential(&graph, head)?;
                let obs = leaf_observations(&graph, &self.recent, leaves_from);
                Ok((graph, obs))
            }
            _ => Err(CgmError::Validation("carried data does not match the window variant".into())),
        }
    }

    /// Incorporates the observation at `time + 1` and returns the filtered marginal there.
    pub fn advance(&mut self, y: AggregateObservation) -> Result<StepResult> {
        if y.len() != self.model.symbols() {
            return Err(CgmError::LengthMismatch { left: y.len(), right: self.model.symbols() });
        }
        let t = self.time + 1;
        self.recent.push_back(y);
        if self.recent.len() > self.window {
            self.recent.pop_front();
        }
        let built = self.build_window(t, &self.carried);
        let (graph, observations) = match built {
            Ok(v) => v,
            Err(e) => {
                self.rollback();
                return Err(e);
            }
        };
        let warm = self.cache.transplant(&self.graph, &graph);
        let solution = match run_sbp_from(&graph, &observations, self.options, warm) {
            Ok(s) => s,
            Err(e) => {
                self.rollback();
                return Err(e);
            }
        };
        let step = StepResult::from_solution(&graph, t, &solution);
        let carried = match extract_carry(self.variant, &graph, t, self.window, &solution) {
            Ok(c) => c,
            Err(e) => {
                self.rollback();
                return Err(e);
            }
        };
        self.time = t;
        self.graph = graph;
        self.carried = carried;
        self.cache = solution.store;
        Ok(step)
    }

    // Undo the observation push of a failed advance. The dropped front
    // observation is not needed again: the window only moves forward.
    fn rollback(&mut self) {
        self.recent.pop_back();
    }
}

/// Builds the initial window state; see [`WindowState::init`].
pub fn init_window(
    model: HmmModel,
    variant: WindowVariant,
    window: usize,
    first: &[AggregateObservation],
    options: SbpOptions,
) -> Result<(WindowState, StepResult)> {
    WindowState::init(model, variant, window, first, options)
}

fn expect_variant(state: &WindowState, variant: WindowVariant) -> Result<()> {
    if state.variant != variant {
        return Err(CgmError::Validation(format!("state is {:?}, not {variant:?}", state.variant)));
    }
    Ok(())
}

pub fn advance_naive(state: &mut WindowState, y: AggregateObservation) -> Result<StepResult> {
    expect_variant(state, WindowVariant::Naive)?;
    state.advance(y)
}

pub fn advance_constrained(state: &mut WindowState, y: AggregateObservation) -> Result<StepResult> {
    expect_variant(state, WindowVariant::ConstrainedMarginal)?;
    state.advance(y)
}

pub fn advance_potential(state: &mut WindowState, y: AggregateObservation) -> Result<StepResult> {
    expect_variant(state, WindowVariant::PotentialUpdate)?;
    state.advance(y)
}

/// Full-chain SBP on `y_1..y_t` from scratch; returns the marginal at `t`.
pub fn baseline_full(
    model: &HmmModel,
    observations: &[AggregateObservation],
    options: SbpOptions,
) -> Result<StepResult> {
    let t = observations.len();
    if t == 0 {
        return Err(CgmError::Validation("baseline needs at least one observation".into()));
    }
    let graph = model.chain(t)?;
    let obs: Observations = observations
        .iter()
        .enumerate()
        .map(|(k, y)| (graph.observation_at(k + 1).expect("leaf"), y.clone()))
        .collect();
    let solution = run_sbp(&graph, &obs, options)?;
    Ok(StepResult::from_solution(&graph, t, &solution))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn model_identity() -> HmmModel {
        HmmModel::new(array![0.5, 0.5], Array2::eye(2), Array2::eye(2)).unwrap()
    }

    #[test]
    fn k1_dirac_init() {
        let (_, step) = init_window(
            model_identity(),
            WindowVariant::PotentialUpdate,
            1,
            &[AggregateObservation::dirac(2, 0).unwrap()],
            SbpOptions::default(),
        )
        .unwrap();
        assert_eq!(step.time, 1);
        assert_abs_diff_eq!(step.marginal, array![1.0, 0.0], epsilon = 1e-14);
    }

    #[test]
    fn window_sizes() {
        let m = HmmModel::new(array![0.5, 0.5], array![[0.8, 0.2], [0.3, 0.7]], array![[0.9, 0.1], [0.2, 0.8]])
            .unwrap();
        let ys: Vec<_> = (0..8)
            .map(|k| AggregateObservation::from_distribution(array![0.1 + 0.1 * k as f64, 0.9 - 0.1 * k as f64], 10).unwrap())
            .collect();
        for (variant, nodes) in [
            (WindowVariant::Naive, 6),
            (WindowVariant::ConstrainedMarginal, 7),
            (WindowVariant::PotentialUpdate, 7),
        ] {
            let (mut s, _) = init_window(m.clone(), variant, 3, &ys[..3], SbpOptions::default()).unwrap();
            assert!(matches!(
                (variant, s.carried()),
                (WindowVariant::Naive, Carried::Nothing)
                    | (WindowVariant::ConstrainedMarginal, Carried::Marginal(_))
                    | (WindowVariant::PotentialUpdate, Carried::Potential(_))
            ));
            for y in &ys[3..] {
                let step = s.advance(y.clone()).unwrap();
                assert_eq!(s.graph().num_nodes(), nodes);
                assert_eq!(step.time, s.time());
                assert_abs_diff_eq!(step.marginal.sum(), 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn wrong_variant_is_rejected() {
        let ys = vec![AggregateObservation::dirac(2, 0).unwrap(); 2];
        let (mut s, _) = init_window(model_identity(), WindowVariant::Naive, 2, &ys, SbpOptions::default()).unwrap();
        assert!(advance_constrained(&mut s, ys[0].clone()).is_err());
        assert!(advance_potential(&mut s, ys[0].clone()).is_err());
        assert!(advance_naive(&mut s, ys[0].clone()).is_ok());
        assert!(init_window(model_identity(), WindowVariant::Naive, 3, &ys, SbpOptions::default()).is_err());
    }

    #[test]
    fn failed_advance_keeps_state_usable() {
        let ys = vec![AggregateObservation::dirac(2, 0).unwrap(); 2];
        let (mut s, _) =
            init_window(model_identity(), WindowVariant::ConstrainedMarginal, 2, &ys, SbpOptions::default()).unwrap();
        // Identity dynamics pinned at state 0 cannot explain an observation of state 1.
        assert!(s.advance(AggregateObservation::dirac(2, 1).unwrap()).is_err());
        assert_eq!(s.time(), 2);
        let ok = s.advance(AggregateObservation::dirac(2, 0).unwrap()).unwrap();
        assert_eq!(ok.time, 3);
        assert_abs_diff_eq!(ok.marginal, array![1.0, 0.0], epsilon = 1e-12);
    }

    #[test]
    fn baseline_single_step() {
        let y = AggregateObservation::from_distribution(array![0.3, 0.7], 10).unwrap();
        let step = baseline_full(&model_identity(), &[y], SbpOptions::default()).unwrap();
        assert_abs_diff_eq!(step.marginal, array![0.3, 0.7], epsilon = 1e-12);
        assert!(baseline_full(&model_identity(), &[], SbpOptions::default()).is_err());
    }
}
