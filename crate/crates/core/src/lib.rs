//! Marginal inference for collective graphical models on hidden-Markov chains.
//!
//! * [`model`]: chain graphs, potentials, aggregate observations.
//! * [`sbp`]: the Sinkhorn belief propagation engine.
//! * [`window`]: incremental sliding-window inference (naive, constrained
//!   marginal, potential update) and the full-chain baseline.
//! * [`scenario`]: random HMMs, the grid-world migration model and population sampling.
//! * [`oracle`]: brute-force references (joint-tensor IPF, forward-backward).
//! * [`experiment`], [`report`], [`config`]: the experiment runner behind the CLI.

pub mod config;
pub mod error;
pub mod experiment;
pub mod model;
pub mod oracle;
pub mod report;
pub mod sbp;
pub mod scenario;
pub mod window;

pub use error::{CgmError, Result};
pub use model::{
    absorb_node_potential, build_hmm_chain, normalize_counts, AggregateObservation, ChainGraph,
    EdgePotential, HmmModel, NodeId, NodeKind, NodePotential, StateSpace,
};
pub use sbp::{
    bethe_free_energy, edge_marginal, node_marginal, run_sbp, run_sbp_from, update_hidden_message,
    update_observed_message, MarginalEstimate, MessageStore, Observations, SbpDiagnostics,
    SbpOptions, SbpSolution,
};
pub use window::{baseline_full, StepResult, WindowState, WindowVariant};
