//! Seeded fixtures shared by the benchmarks.

use patchpool_core::pool::{PoolMode, PromptPool, PromptSpec, ScoreGrid};
use patchpool_core::retriever::{flatten_normalize, FeatureMap, FeatureVector, RetrievalIndex};
use patchpool_core::{CodebookDistribution, GridDims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn distribution(rng: &mut ChaCha8Rng, v: usize) -> CodebookDistribution {
    CodebookDistribution::from_weights((0..v).map(|_| rng.random::<f64>() + 1e-3).collect()).unwrap()
}

/// Query grid plus a Q-mode pool of width `m` over an `rows×cols` grid.
pub fn pool(seed: u64, rows: usize, cols: usize, v: usize, m: usize) -> (ScoreGrid, PromptPool) {
    let mut r = rng(seed);
    let grid = GridDims::new(rows, cols).unwrap();
    let slots: Vec<(usize, ScoreGrid)> = (0..m)
        .map(|i| {
            let mut g = ScoreGrid::new((0..grid.len()).map(|_| distribution(&mut r, v)).collect()).unwrap();
            g.prompt = Some(PromptSpec::new(&format!("s{i}").into(), &"q".into(), grid));
            (i + 1, g)
        })
        .collect();
    let query = slots[0].1.clone();
    (query, PromptPool::from_grids(PoolMode::Q, m, slots).unwrap())
}

pub fn index(seed: u64, n: usize, dim: usize) -> (RetrievalIndex, FeatureVector) {
    let mut r = rng(seed);
    let mut unit = |id: String| {
        let values = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        flatten_normalize(&FeatureMap::flat(id, values).unwrap()).unwrap()
    };
    let idx = RetrievalIndex::from_vectors((0..n).map(|i| unit(format!("s{i}")))).unwrap();
    (idx, unit("q".into()))
}
