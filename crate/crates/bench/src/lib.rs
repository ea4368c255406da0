//! Seeded fixtures shared by the kernel benchmarks.

use bcqforge_core::cohort::{ReplayBuffer, Transition};
use bcqforge_core::nn::rng_from_seed;
use bcqforge_core::ope::EvalTrajectory;
use rand::Rng;

/// Uniform random transitions with 20% terminal flags.
pub fn random_buffer(n: usize, dim: usize, seed: u64) -> ReplayBuffer {
    let mut rng = rng_from_seed(seed);
    let transitions = (0..n)
        .map(|i| Transition {
            state: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            action: rng.random_range(0..2u8),
            reward: rng.random_range(-1.0..1.0),
            next_state: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            done: rng.random_bool(0.2),
            patient: i / 10,
        })
        .collect();
    ReplayBuffer::new(transitions).expect("non-empty buffer")
}

/// One patient history: `bins` feature rows and `bins - 1` actions.
pub fn random_history(bins: usize, width: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut rng = rng_from_seed(seed);
    let features = (0..bins).map(|_| (0..width).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let actions = (0..bins - 1).map(|_| rng.random_range(0..2u8)).collect();
    (features, actions)
}

/// Evaluation trajectories with random greedy actions and behavior
/// probabilities, shaped like a test split.
pub struct WisFixture {
    pub trajectories: Vec<EvalTrajectory>,
    pub greedy: Vec<Vec<u8>>,
    pub mu: Vec<Vec<Vec<f64>>>,
}

pub fn wis_fixture(patients: usize, len: usize, seed: u64) -> WisFixture {
    let mut rng = rng_from_seed(seed);
    let mut trajectories = Vec::with_capacity(patients);
    let mut greedy = Vec::with_capacity(patients);
    let mut mu = Vec::with_capacity(patients);
    for patient in 0..patients {
        let actions: Vec<u8> = (0..len).map(|_| rng.random_range(0..2u8)).collect();
        let mut rewards = vec![0.0; len];
        rewards[len - 1] = if rng.random_bool(0.8) { 10.0 } else { -10.0 };
        trajectories.push(EvalTrajectory { patient, states: vec![vec![0.0]; len], actions, rewards });
        greedy.push((0..len).map(|_| rng.random_range(0..2u8)).collect());
        mu.push(
            (0..len)
                .map(|_| {
                    let p = rng.random_range(0.05..0.95);
                    vec![p, 1.0 - p]
                })
                .collect(),
        );
    }
    WisFixture { trajectories, greedy, mu }
}
