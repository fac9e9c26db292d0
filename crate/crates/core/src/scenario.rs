//! Generative models and population simulation.
//!
//! All randomness comes from [`ChaCha8Rng`] seeded with [`seeded_rng`], so a
//! seed reproduces the same matrices and counts on every platform.

use std::f64::consts::FRAC_1_SQRT_2;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CgmError, Result};
use crate::model::{normalize_counts, AggregateObservation};

pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn row_normalize(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let s = row.sum();
        row /= s;
    }
}

/// `500 I + 10 exp(E)` with standard-normal `E`, rows normalized.
fn dominant_diagonal(d: usize, rng: &mut Rng) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((d, d), |_| {
        let e: f64 = StandardNormal.sample(rng);
        10.0 * e.exp()
    });
    for k in 0..d {
        m[[k, k]] += 500.0;
    }
    row_normalize(&mut m);
    m
}

/// Random transition and observation matrices of size `d x d`.
pub fn random_hmm(d: usize, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    if d == 0 {
        return Err(CgmError::Validation("state dimension must be at least 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let transition = dominant_diagonal(d, &mut rng);
    let observation = dominant_diagonal(d, &mut rng);
    Ok((transition, observation))
}

/// Square grid with `(row, col)` cells, row `side - 1` at the bottom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    side: usize,
    sensors: Vec<(usize, usize)>,
    /// Wind heading in radians, counter-clockwise from "right".
    wind: f64,
}

impl GridWorld {
    pub fn new(side: usize, sensors: Vec<(usize, usize)>, wind: f64) -> Result<Self> {
        if side == 0 {
            return Err(CgmError::Validation("grid side must be at least 1".into()));
        }
        if sensors.is_empty() {
            return Err(CgmError::Validation("grid needs at least one sensor".into()));
        }
        if let Some(s) = sensors.iter().find(|(r, c)| *r >= side || *c >= side) {
            return Err(CgmError::Validation(format!("sensor {s:?} lies outside the {side}x{side} grid")));
        }
        if !wind.is_finite() {
            return Err(CgmError::Validation("wind direction must be finite".into()));
        }
        Ok(Self { side, sensors, wind })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    pub fn sensors(&self) -> &[(usize, usize)] {
        &self.sensors
    }

    pub fn wind(&self) -> f64 {
        self.wind
    }

    pub fn cell(&self, row: usize, col: usize) -> usize {
        row * self.side + col
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell / self.side, cell % self.side)
    }
}

/// `count` distinct sensor cells drawn uniformly.
pub fn random_sensors(side: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let cells = side * side;
    if count == 0 || count > cells {
        return Err(CgmError::Validation(format!("cannot place {count} sensors on {cells} cells")));
    }
    let mut rng = seeded_rng(seed);
    let mut picked: Vec<usize> = sample(&mut rng, cells, count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|c| (c / side, c % side)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLinearWeights {
    pub distance: f64,
    pub goal_angle: f64,
    pub wind_angle: f64,
    pub stay: f64,
}

impl Default for LogLinearWeights {
    fn default() -> Self {
        Self { distance: 5.0, goal_angle: 3.0, wind_angle: 1.6, stay: 1.0 }
    }
}

/// Movement features `(-distance, cos to goal, cos to wind, stay)` for one move.
fn move_features(dr: isize, dc: isize, wind: (f64, f64)) -> [f64; 4] {
    if dr == 0 && dc == 0 {
        return [0.0, 0.0, 0.0, 1.0];
    }
    // x to the right, y upward.
    let (dx, dy) = (dc as f64, -(dr as f64));
    let len = dx.hypot(dy);
    let (ux, uy) = (dx / len, dy / len);
    [-len, (ux + uy) * FRAC_1_SQRT_2, ux * wind.0 + uy * wind.1, 0.0]
}

/// Log-linear transition kernel over the 8-neighbourhood plus staying put.
pub fn grid_transition(grid: &GridWorld, weights: &LogLinearWeights) -> Result<Array2<f64>> {
    let w = [weights.distance, weights.goal_angle, weights.wind_angle, weights.stay];
    if w.iter().any(|v| !v.is_finite()) {
        return Err(CgmError::Validation("log-linear weights must be finite".into()));
    }
    let wind = (grid.wind.cos(), grid.wind.sin());
    let n = grid.cells();
    let side = grid.side as isize;
    let mut out = Array2::zeros((n, n));
    for cell in 0..n {
        let (r, c) = grid.coords(cell);
        let mut moves = Vec::with_capacity(9);
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if (0..side).contains(&nr) && (0..side).contains(&nc) {
                    let f = move_features(dr, dc, wind);
                    let score: f64 = f.iter().zip(&w).map(|(a, b)| a * b).sum();
                    moves.push((grid.cell(nr as usize, nc as usize), score));
                }
            }
        }
        if moves.is_empty() {
            return Err(CgmError::Structure(format!("cell {cell} has no admissible move")));
        }
        let peak = moves.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = moves.iter().map(|m| (m.1 - peak).exp()).sum();
        for (dest, score) in moves {
            out[[cell, dest]] = (score - peak).exp() / z;
        }
    }
    Ok(out)
}

/// `p(sensor | cell) ∝ exp(-decay * distance(cell, sensor))`.
pub fn sensor_observation(grid: &GridWorld, decay: f64) -> Result<Array2<f64>> {
    if !(decay > 0.0 && decay.is_finite()) {
        return Err(CgmError::Validation("sensor decay rate must be positive".into()));
    }
    let n = grid.cells();
    let mut out = Array2::zeros((n, grid.sensors.len()));
    for cell in 0..n {
        let (r, c) = grid.coords(cell);
        let dist: Vec<f64> = grid
            .sensors
            .iter()
            .map(|&(sr, sc)| (r as f64 - sr as f64).hypot(c as f64 - sc as f64))
            .collect();
        let nearest = dist.iter().copied().fold(f64::INFINITY, f64::min);
        for (s, d) in dist.iter().enumerate() {
            out[[cell, s]] = (-decay * (d - nearest)).exp();
        }
    }
    row_normalize(&mut out);
    Ok(out)
}

/// Integer counts of a population over states.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopulationState {
    counts: Vec<u64>,
    population: u64,
}

impl PopulationState {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        let population: u64 = counts.iter().sum();
        if population == 0 {
            return Err(CgmError::Validation("population must be positive".into()));
        }
        Ok(Self { counts, population })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn population(&self) -> u64 {
        self.population
    }

    pub fn distribution(&self) -> Array1<f64> {
        let m = self.population as f64;
        self.counts.iter().map(|&c| c as f64 / m).collect()
    }

    pub fn to_observation(&self) -> AggregateObservation {
        normalize_counts(&self.counts, self.population).expect("counts sum to the population")
    }
}

/// Half the population at the bottom-left cell, the other half at the bottom-centre cell.
pub fn initial_clusters(grid: &GridWorld, population: u64) -> Result<PopulationState> {
    if grid.side < 2 {
        return Err(CgmError::Validation("initial clusters need a grid side of at least 2".into()));
    }
    let bottom = grid.side - 1;
    let mut counts = vec![0; grid.cells()];
    counts[grid.cell(bottom, 0)] = population - population / 2;
    counts[grid.cell(bottom, grid.side / 2)] += population / 2;
    PopulationState::new(counts)
}

/// Split `n` individuals over `probs` by sequential conditional binomials.
fn multinomial(n: u64, probs: impl Iterator<Item = f64> + Clone, rng: &mut Rng, out: &mut [u64]) {
    let mut remaining = n;
    let mut mass: f64 = probs.clone().sum();
    for (k, p) in probs.enumerate() {
        if remaining == 0 {
            break;
        }
        if p <= 0.0 {
            continue;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 1.0 };
        let x = if q >= 1.0 {
            remaining
        } else {
            Binomial::new(remaining, q).expect("probability in range").sample(rng)
        };
        out[k] += x;
        remaining -= x;
        mass -= p;
    }
    // Floating-point leftovers go to the last state with positive mass.
    if remaining > 0 {
        if let Some(last) = (0..out.len()).rev().find(|&k| out[k] > 0) {
            out[last] += remaining;
        }
    }
}

/// Draws `population` individuals from a probability vector.
pub fn sample_initial(prior: &Array1<f64>, population: u64, seed: u64) -> Result<PopulationState> {
    let mut rng = seeded_rng(seed);
    let mut counts = vec![0; prior.len()];
    multinomial(population, prior.iter().copied(), &mut rng, &mut counts);
    PopulationState::new(counts)
}

/// Ground truth and aggregate observations of a simulated population.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    /// Hidden counts at times `1..=T`.
    pub hidden: Vec<PopulationState>,
    /// Observation-symbol counts at times `1..=T`.
    pub observed: Vec<PopulationState>,
    /// Normalized `observed`.
    pub observations: Vec<AggregateObservation>,
}

/// Propagates independent individuals through the chain.
///
/// `initial` is the hidden state at time 1; at each later time every
/// individual moves by its row of `transition`. At every time each individual
/// emits one symbol by its row of `observation`.
pub fn sample_population(
    initial: &PopulationState,
    transition: &Array2<f64>,
    observation: &Array2<f64>,
    horizon: usize,
    seed: u64,
) -> Result<Simulation> {
    let d = initial.counts.len();
    if transition.dim() != (d, d) || observation.nrows() != d {
        return Err(CgmError::Model("simulation parameters do not match the state count".into()));
    }
    if horizon == 0 {
        return Err(CgmError::Validation("horizon must be at least 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut hidden = Vec::with_capacity(horizon);
    let mut observed = Vec::with_capacity(horizon);
    let mut current = initial.counts.clone();
    for t in 0..horizon {
        if t > 0 {
            let mut next = vec![0; d];
            for (x, &count) in current.iter().enumerate() {
                if count > 0 {
                    multinomial(count, transition.row(x).iter().copied(), &mut rng, &mut next);
                }
            }
            current = next;
        }
        let mut symbols = vec![0; observation.ncols()];
        for (x, &count) in current.iter().enumerate() {
            if count > 0 {
                multinomial(count, observation.row(x).iter().copied(), &mut rng, &mut symbols);
            }
        }
        hidden.push(PopulationState::new(current.clone())?);
        observed.push(PopulationState::new(symbols)?);
    }
    let observations = observed.iter().map(PopulationState::to_observation).collect();
    Ok(Simulation { hidden, observed, observations })
}
