use patchpool_core::retriever::{flatten_normalize, top_m, FeatureMap, FeatureVector, RetrievalIndex};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(rng: &mut ChaCha8Rng, id: String, c: usize, h: usize, w: usize) -> FeatureMap {
    let values = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMap::new(id, (c, h, w), values).unwrap()
}

/// Full sort of every similarity; ties by insertion order.
fn oracle(query: &FeatureVector, items: &[FeatureVector], m: usize) -> Vec<String> {
    let mut scored: Vec<(f64, usize)> = items
        .iter()
        .enumerate()
        .map(|(i, x)| (query.values().iter().zip(x.values()).map(|(a, b)| a * b).sum(), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(m).map(|(_, i)| items[i].id.to_string()).collect()
}

fn check(rng: &mut ChaCha8Rng, n: usize, shape: (usize, usize, usize), m: usize, dup: bool) {
    let (c, h, w) = shape;
    let dup = dup && n > 3;
    let mut maps: Vec<FeatureMap> = (0..n).map(|i| random_map(rng, format!("s{i}"), c, h, w)).collect();
    if dup {
        let copy = FeatureMap::new("dup", (c, h, w), maps[1].values().to_vec()).unwrap();
        maps.insert(n / 2, copy);
    }
    let vectors: Vec<FeatureVector> = maps.iter().map(|m| flatten_normalize(m).unwrap()).collect();
    let index = RetrievalIndex::from_vectors(vectors.iter().cloned()).unwrap();
    let query = if dup { vectors[1].clone() } else { flatten_normalize(&random_map(rng, "q".into(), c, h, w)).unwrap() };
    let got: Vec<String> = top_m(&query, &index, m).unwrap().ids().map(|i| i.to_string()).collect();
    assert_eq!(got, oracle(&query, &vectors, m));
}

#[test]
fn large_index_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check(&mut rng, 5000, (16, 16, 16), 8, false);
    check(&mut rng, 5000, (1, 1, 4096), 20, true);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn small_indices_match_full_sort(seed in any::<u64>(), n in 1usize..200, m in 1usize..12, dup in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(&mut rng, n, (2, 3, 4), m, dup);
    }

    #[test]
    fn normalization_is_scale_invariant(seed in any::<u64>(), exp in -6i32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(&mut rng, "x".into(), 3, 4, 5);
        let scale = rng.random_range(0.1..10.0) * 10f64.powi(exp);
        let a = flatten_normalize(&map).unwrap();
        let b = flatten_normalize(&map.scaled(scale)).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}
