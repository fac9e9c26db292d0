use cgm_sbp::config::{Method, ScenarioConfig};
use cgm_sbp::experiment::{l1_error, run_experiment, RunOptions};
use cgm_sbp::oracle::JointTensor;
use cgm_sbp::scenario::{
    grid_transition, random_hmm, sample_initial, sample_population, sensor_observation, GridWorld, LogLinearWeights,
};
use cgm_sbp::{
    absorb_node_potential, normalize_counts, run_sbp, AggregateObservation, HmmModel, NodePotential, Observations,
    SbpOptions, WindowState, WindowVariant,
};
use ndarray::{Array1, Axis};
use proptest::prelude::*;

fn distribution(weights: Vec<f64>) -> Array1<f64> {
    let v = Array1::from(weights);
    let s = v.sum();
    v / s
}

fn observations_for(model: &HmmModel, horizon: usize, seed: u64, population: u64) -> Vec<AggregateObservation> {
    let start = sample_initial(model.prior(), population, seed).unwrap();
    sample_population(&start, model.transition(), model.observation(), horizon, seed + 1).unwrap().observations
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn counts_normalize(counts in prop::collection::vec(0u64..1000, 1..8)) {
        let m: u64 = counts.iter().sum();
        prop_assume!(m > 0);
        let y = normalize_counts(&counts, m).unwrap();
        prop_assert!((y.distribution().sum() - 1.0).abs() < 1e-12);
        prop_assert!(normalize_counts(&counts, m + 1).is_err());
    }

    #[test]
    fn l1_is_bounded(a in prop::collection::vec(0.01f64..1.0, 4), b in prop::collection::vec(0.01f64..1.0, 4)) {
        let e = l1_error(&distribution(a), &distribution(b)).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&e));
    }

    #[test]
    fn sbp_fixed_point_invariants(d in 2usize..5, horizon in 1usize..8, seed in any::<u64>()) {
        let (a, b) = random_hmm(d, seed).unwrap();
        let model = HmmModel::new(Array1::from_elem(d, 1.0 / d as f64), a, b).unwrap();
        let ys = observations_for(&model, horizon, seed, 500);
        let graph = model.chain(horizon).unwrap();
        let obs: Observations = ys.iter().enumerate().map(|(k, y)| (graph.observation_at(k + 1).unwrap(), y.clone())).collect();
        let sol = run_sbp(&graph, &obs, SbpOptions::default()).unwrap();
        prop_assert!(sol.diagnostics.converged);
        prop_assert!(sol.diagnostics.residual <= 1e-9);
        for i in graph.node_ids() {
            let n = sol.marginals.node(i);
            prop_assert!((n.sum() - 1.0).abs() < 1e-9);
            prop_assert!(n.iter().all(|v| *v >= 0.0));
        }
        prop_assert!(sol.marginals.consistency_error(&graph) <= 1e-8);
    }

    #[test]
    fn absorption_preserves_joint(d in 1usize..4, horizon in 1usize..4, seed in any::<u64>(), w in prop::collection::vec(0.1f64..2.0, 3)) {
        let (a, b) = random_hmm(d, seed).unwrap();
        let model = HmmModel::new(Array1::from_elem(d, 1.0 / d as f64), a, b).unwrap();
        let mut graph = model.chain(horizon).unwrap();
        let target = graph.hidden_at(horizon).unwrap();
        graph.set_node_potential(target, Some(NodePotential::new(Array1::from(w[..d].to_vec())).unwrap())).unwrap();
        let absorbed = absorb_node_potential(&graph, target).unwrap();
        let before = JointTensor::from_graph(&graph).unwrap();
        let after = JointTensor::from_graph(&absorbed).unwrap();
        for (x, y) in before.values().iter().zip(after.values()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn window_sizes(k in 1usize..5, extra in 1usize..5, seed in any::<u64>()) {
        let (a, b) = random_hmm(3, seed).unwrap();
        let model = HmmModel::new(Array1::from_elem(3, 1.0 / 3.0), a, b).unwrap();
        let ys = observations_for(&model, k + extra, seed, 300);
        for variant in [WindowVariant::Naive, WindowVariant::ConstrainedMarginal, WindowVariant::PotentialUpdate] {
            let (mut state, _) = WindowState::init(model.clone(), variant, k, &ys[..k], SbpOptions::default()).unwrap();
            for (step, y) in ys[k..].iter().enumerate() {
                let r = state.advance(y.clone()).unwrap();
                prop_assert_eq!(r.time, k + step + 1);
                prop_assert!((r.marginal.sum() - 1.0).abs() < 1e-9);
                let expected = if variant == WindowVariant::Naive { 2 * k } else { 2 * k + 1 };
                prop_assert_eq!(state.graph().num_nodes(), expected);
            }
        }
    }

    #[test]
    fn population_is_conserved(d in 1usize..6, m in 1u64..5000, horizon in 1usize..6, seed in any::<u64>()) {
        let (a, b) = random_hmm(d, seed).unwrap();
        let start = sample_initial(&Array1::from_elem(d, 1.0 / d as f64), m, seed).unwrap();
        let sim = sample_population(&start, &a, &b, horizon, seed ^ 1).unwrap();
        prop_assert_eq!(sim.hidden.len(), horizon);
        for (h, o) in sim.hidden.iter().zip(&sim.observed) {
            prop_assert_eq!(h.counts().iter().sum::<u64>(), m);
            prop_assert_eq!(o.counts().iter().sum::<u64>(), m);
        }
    }

    #[test]
    fn grid_rows_are_stochastic(side in 1usize..7, wind in 0.0f64..360.0, stay in -2.0f64..2.0) {
        let grid = GridWorld::new(side, vec![(0, 0)], wind.to_radians()).unwrap();
        let w = LogLinearWeights { stay, ..LogLinearWeights::default() };
        let t = grid_transition(&grid, &w).unwrap();
        for s in t.sum_axis(Axis(1)) {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn closer_sensor_weighs_more(side in 2usize..8, cell in any::<prop::sample::Index>(), lambda in 0.1f64..3.0) {
        let sensors = vec![(0, 0), (side - 1, side - 1), (0, side - 1)];
        let grid = GridWorld::new(side, sensors.clone(), 0.0).unwrap();
        let o = sensor_observation(&grid, lambda).unwrap();
        let c = cell.index(grid.cells());
        let (r, col) = grid.coords(c);
        let dist: Vec<f64> = sensors.iter().map(|&(sr, sc)| (r as f64 - sr as f64).hypot(col as f64 - sc as f64)).collect();
        for i in 0..3 {
            for j in 0..3 {
                if dist[i] < dist[j] {
                    prop_assert!(o[[c, i]] > o[[c, j]]);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn report_row_count(horizon in 3usize..8, k in 1usize..3, trials in 1usize..3, mask in 1u8..16) {
        let methods: Vec<Method> = Method::ALL.into_iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, m)| m).collect();
        let mut config = ScenarioConfig::default();
        config.apply_overrides(&["d=3", "M=100", &format!("T={horizon}"), &format!("K={k}")]).unwrap();
        let report = run_experiment(&config, &methods, trials, RunOptions::default()).unwrap();
        prop_assert_eq!(report.rows.len(), trials * (horizon - k) * methods.len());
        prop_assert!(report.rows.iter().all(|r| r.error.is_none()));
    }
}
