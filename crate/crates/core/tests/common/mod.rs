#![allow(dead_code)]

use patchpool_core::divergence::{CodebookDistribution, DivergenceKind};
use patchpool_core::pool::{PoolMode, PromptPool, PromptSpec, ScoreGrid};
use patchpool_core::smoothing::{Aggregation, KeyKind, Scope, SmoothingConfig};
use patchpool_core::types::{GridDims, ItemId};
use rand::Rng;

/// Random distribution; with `sparse`, about a quarter of the entries are zero.
pub fn random_dist<R: Rng>(rng: &mut R, v: usize, sparse: bool) -> CodebookDistribution {
    loop {
        let w: Vec<f64> = (0..v)
            .map(|_| {
                if sparse && rng.random_bool(0.25) {
                    0.0
                } else {
                    rng.random::<f64>().powi(3)
                }
            })
            .collect();
        if w.iter().any(|&x| x > 0.0) {
            return CodebookDistribution::from_weights(w).unwrap();
        }
    }
}

pub struct Instance {
    pub query: ScoreGrid,
    pub pool: PromptPool,
    pub config: SmoothingConfig,
}

pub const DIVERGENCES: [DivergenceKind; 2] = [DivergenceKind::Js, DivergenceKind::Kl];
pub const AGGREGATIONS: [Aggregation; 3] = [Aggregation::Weighted, Aggregation::Average, Aggregation::Nearest];
pub const SCOPES: [Scope; 2] = [Scope::Patch, Scope::All];
pub const KEYS: [KeyKind; 3] = [KeyKind::Score, KeyKind::Feature, KeyKind::Patch];

fn keyed_grid<R: Rng>(rng: &mut R, l: usize, v: usize, dim: usize, sparse: bool) -> ScoreGrid {
    let dists = (0..l).map(|_| random_dist(rng, v, sparse)).collect();
    let mut keys = || -> Vec<Vec<f64>> {
        (0..l).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    };
    let (f, p) = (keys(), keys());
    ScoreGrid::new(dists).unwrap().with_features(f).unwrap().with_patches(p).unwrap()
}

/// A random pool of width `m` over `l` patches. The query grid is slot 1,
/// as in the default pool; some pool entries are exact duplicates so ties
/// are exercised.
pub fn random_instance<R: Rng>(rng: &mut R, max_l: usize, max_v: usize, max_m: usize) -> Instance {
    let l = rng.random_range(1..=max_l);
    let v = rng.random_range(2..=max_v);
    let m = rng.random_range(1..=max_m);
    let dim = rng.random_range(1..=16);
    let sparse = rng.random_bool(0.3);
    let grid = GridDims::new(1, l).unwrap();
    let q: ItemId = "q".into();
    let mut grids: Vec<ScoreGrid> = Vec::with_capacity(m);
    for i in 0..m {
        let g = if i > 0 && rng.random_bool(0.15) {
            grids[rng.random_range(0..i)].clone()
        } else {
            keyed_grid(rng, l, v, dim, sparse)
        };
        grids.push(g);
    }
    let slots: Vec<(usize, ScoreGrid)> = grids
        .into_iter()
        .enumerate()
        .map(|(i, mut g)| {
            g.prompt = Some(PromptSpec::new(&format!("s{i}").into(), &q, grid));
            (i + 1, g)
        })
        .collect();
    let query = slots[0].1.clone();
    let pool = PromptPool::from_grids(PoolMode::Q, m, slots).unwrap();
    let config = SmoothingConfig {
        m,
        k: rng.random_range(1..=m),
        alpha: if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..=1.0) },
        tau: 10f64.powf(rng.random_range(-1.0..1.5)),
        divergence: DIVERGENCES[rng.random_range(0..2)],
        key: KEYS[rng.random_range(0..3)],
        aggregation: AGGREGATIONS[rng.random_range(0..3)],
        scope: SCOPES[rng.random_range(0..2)],
    };
    Instance { query, pool, config }
}

pub fn max_abs_diff(a: &[CodebookDistribution], b: &[CodebookDistribution]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
