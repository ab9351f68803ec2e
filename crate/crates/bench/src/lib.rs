//! Fixtures shared by the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajflow::data::{Position, RoadMask, MASK_SIZE};
use trajflow::model::{DatasetStats, Model, ModelConfig, PreparedEpisode};
use trajflow::objective::synth_fork;

/// Full-size mask with roughly `density` drivable pixels.
pub fn random_mask(density: f64, seed: u64) -> RoadMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<bool> = (0..MASK_SIZE * MASK_SIZE).map(|_| rng.random_bool(density)).collect();
    cells[0] = true;
    RoadMask::new(MASK_SIZE, MASK_SIZE, 0.5, Position::ORIGIN, cells).expect("valid mask")
}

pub fn random_matrices(n: usize, scale: f64, seed: u64) -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-scale..scale))).collect()
}

/// A freshly initialized desk-preset model and a few prepared fork episodes.
pub fn desk_fixture(episodes: usize, seed: u64) -> (Model, Vec<PreparedEpisode>) {
    let eps = synth_fork(episodes, seed).expect("synthetic episodes");
    let stats = DatasetStats::from_episodes(&eps).expect("stats");
    let model = Model::new(ModelConfig::desk(), stats, seed).expect("model");
    let prepared = eps.iter().map(|e| model.prepare(e).expect("prepare")).collect();
    (model, prepared)
}
