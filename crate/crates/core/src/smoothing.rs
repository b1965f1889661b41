//! Patch-level k-nearest-neighbor smoothing of assignment scores.
//!
//! For every patch `l` the query score `s_l` is compared with the pool
//! entries, the `k` closest are kept, and the result is
//!
//! ```text
//! ŝ_l = (1 − α)·s_l + α·Σ_i w_i·u_i,    w_i = exp(−d_i/τ) / Σ_j exp(−d_j/τ)
//! ```
//!
//! Neighbors are ranked by JS (or KL) on the scores themselves, or by ℓ2 on
//! feature / decoded-patch keys; the blended quantity is always the score.
//! Neighbors at infinite distance (KL against a zero-mass query entry) get
//! weight 0 in every aggregation mode.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{js_raw, kl_raw, CodebookDistribution, DivergenceKind};
use crate::error::{Error, Result};
use crate::pool::{ScoreGrid, PromptPool};

/// Renormalize a smoothed distribution only when its sum drifts this far.
pub const RENORM_DRIFT: f64 = 1e-9;

/// Which representation neighbors are ranked by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyKind {
    #[default]
    Score,
    Feature,
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Weighted,
    Average,
    Nearest,
}

/// Where neighbors come from: the same patch's pool or the union of all pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    #[default]
    Patch,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    /// Pool width the defaults were derived from.
    pub m: usize,
    pub k: usize,
    pub alpha: f64,
    pub tau: f64,
    #[serde(default)]
    pub divergence: DivergenceKind,
    #[serde(default)]
    pub key: KeyKind,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub scope: Scope,
}

impl SmoothingConfig {
    /// Segmentation / colorization defaults: `k = min(5, m)`, `α = 1`, `τ = 1`,
    /// JS on scores, softmax weighting, per-patch scope.
    pub fn defaults(m: usize) -> Self {
        Self {
            m,
            k: m.clamp(1, 5),
            alpha: 1.0,
            tau: 1.0,
            divergence: DivergenceKind::Js,
            key: KeyKind::Score,
            aggregation: Aggregation::Weighted,
            scope: Scope::Patch,
        }
    }

    /// Detection defaults: as [`defaults`](Self::defaults) with `α = 0.7`.
    pub fn detection_defaults(m: usize) -> Self {
        Self {
            alpha: 0.7,
            ..Self::defaults(m)
        }
    }

    /// Feature-ensemble defaults for pixel-space models: `m = 2`, `τ = 25`, `α = 0.5`.
    pub fn feature_defaults() -> Self {
        Self {
            tau: 25.0,
            alpha: 0.5,
            ..Self::defaults(2)
        }
    }

    /// Two-sequence aggregation defaults for autoregressive models: `τ = 1`, `α = 0.8`.
    pub fn sequence_defaults() -> Self {
        Self {
            alpha: 0.8,
            ..Self::defaults(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::config(format!("tau must be positive and finite, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Distance used to rank candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Divergence between score distributions; KL is `KL(candidate ‖ query)`.
    Divergence(DivergenceKind),
    /// Euclidean distance between key vectors.
    L2,
}

impl Metric {
    pub fn for_config(config: &SmoothingConfig) -> Self {
        match config.key {
            KeyKind::Score => Metric::Divergence(config.divergence),
            KeyKind::Feature | KeyKind::Patch => Metric::L2,
        }
    }

    fn distance(self, query: &[f64], candidate: &[f64]) -> f64 {
        match self {
            Metric::Divergence(DivergenceKind::Js) => js_raw(query, candidate),
            Metric::Divergence(DivergenceKind::Kl) => kl_raw(candidate, query),
            Metric::L2 => l2(query, candidate),
        }
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A candidate key with its provenance.
#[derive(Debug, Clone, Copy)]
pub struct KeyedCandidate<'a> {
    pub key: &'a [f64],
    /// 1-based prompt slot.
    pub pair_index: usize,
    pub patch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Position in the candidate list handed to [`knn_select`].
    pub position: usize,
    pub pair_index: usize,
    pub patch: usize,
    pub distance: f64,
}

/// Selected neighbors, closest first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NeighborSet {
    pub entries: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.entries.iter().map(|n| n.distance).collect()
    }
}

/// The `k` candidates closest to `query`, ascending by distance.
///
/// `k` larger than the pool is clamped. Ties go to the lower slot, then the
/// lower patch index.
pub fn knn_select(
    query: &[f64],
    candidates: &[KeyedCandidate<'_>],
    k: usize,
    metric: Metric,
) -> Result<NeighborSet> {
    if candidates.is_empty() {
        return Err(Error::EmptyPool);
    }
    if let Some(bad) = candidates.iter().find(|c| c.key.len() != query.len()) {
        return Err(Error::dim("neighbor key length", query.len(), bad.key.len()));
    }
    let mut entries: Vec<Neighbor> = candidates
        .iter()
        .enumerate()
        .map(|(position, c)| Neighbor {
            position,
            pair_index: c.pair_index,
            patch: c.patch,
            distance: metric.distance(query, c.key),
        })
        .collect();
    let by_rank = |a: &Neighbor, b: &Neighbor| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.pair_index.cmp(&b.pair_index))
            .then(a.patch.cmp(&b.patch))
    };
    let k = k.min(entries.len());
    if k < entries.len() {
        entries.select_nth_unstable_by(k - 1, by_rank);
        entries.truncate(k);
    }
    entries.sort_unstable_by(by_rank);
    Ok(NeighborSet { entries })
}

/// Temperature softmax of negated distances, shifted by the smallest finite
/// distance. Infinite distances get weight 0.
pub fn softmax_weights(distances: &[f64], tau: f64) -> Result<Vec<f64>> {
    let min = distances
        .iter()
        .copied()
        .filter(|d| d.is_finite())
        .min_by(f64::total_cmp)
        .ok_or(Error::DegenerateWeights(distances.len()))?;
    let raw: Vec<f64> = distances
        .iter()
        .map(|&d| if d.is_finite() { (-(d - min) / tau).exp() } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Neighbor weights for the configured aggregation mode.
pub fn aggregation_weights(distances: &[f64], config: &SmoothingConfig) -> Result<Vec<f64>> {
    match config.aggregation {
        Aggregation::Weighted => softmax_weights(distances, config.tau),
        Aggregation::Average => {
            let finite = distances.iter().filter(|d| d.is_finite()).count();
            if finite == 0 {
                return Err(Error::DegenerateWeights(distances.len()));
            }
            let w = 1.0 / finite as f64;
            Ok(distances.iter().map(|d| if d.is_finite() { w } else { 0.0 }).collect())
        }
        Aggregation::Nearest => match distances.first() {
            Some(d) if d.is_finite() => {
                let mut w = vec![0.0; distances.len()];
                w[0] = 1.0;
                Ok(w)
            }
            _ => Err(Error::DegenerateWeights(distances.len())),
        },
    }
}

/// `(1 − α)·s + α·Σ w_i·u_i`, skipping zero-weight neighbors.
fn blend(s: &[f64], neighbors: &[&[f64]], weights: &[f64], alpha: f64) -> Vec<f64> {
    let mut mix = vec![0.0; s.len()];
    for (u, &w) in neighbors.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (m, &x) in mix.iter_mut().zip(u.iter()) {
            *m += w * x;
        }
    }
    s.iter()
        .zip(mix)
        .map(|(&x, m)| (1.0 - alpha) * x + alpha * m)
        .collect()
}

/// Smooth one patch score with already-selected neighbors, given as
/// `(distribution, distance)` closest first.
pub fn smooth_patch(
    s: &CodebookDistribution,
    neighbors: &[(&CodebookDistribution, f64)],
    config: &SmoothingConfig,
) -> Result<CodebookDistribution> {
    if neighbors.is_empty() || config.alpha == 0.0 {
        return Ok(s.clone());
    }
    if let Some((bad, _)) = neighbors.iter().find(|(u, _)| u.len() != s.len()) {
        return Err(Error::dim("neighbor codebook size", s.len(), bad.len()));
    }
    let distances: Vec<f64> = neighbors.iter().map(|(_, d)| *d).collect();
    let weights = aggregation_weights(&distances, config)?;
    let values: Vec<&[f64]> = neighbors.iter().map(|(u, _)| u.as_slice()).collect();
    Ok(CodebookDistribution::from_simplex(
        blend(s.as_slice(), &values, &weights, config.alpha),
        RENORM_DRIFT,
    ))
}

/// Chosen neighbor and its weight, for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedNeighbor {
    pub pair_index: usize,
    pub patch: usize,
    pub distance: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PatchDiagnostics {
    pub neighbors: Vec<WeightedNeighbor>,
}

/// Smoothed per-patch scores `ŝ_l` with the neighbors that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedGrid {
    pub distributions: Vec<CodebookDistribution>,
    pub diagnostics: Vec<PatchDiagnostics>,
}

impl SmoothedGrid {
    fn unchanged(grid: &ScoreGrid) -> Self {
        Self {
            distributions: grid.distributions.clone(),
            diagnostics: vec![PatchDiagnostics::default(); grid.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.distributions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distributions.is_empty()
    }
}

/// Pool entry as seen by the smoothing engine.
#[derive(Clone, Copy)]
struct Cand<'a> {
    dist: &'a CodebookDistribution,
    feature: Option<&'a [f64]>,
    patch_key: Option<&'a [f64]>,
    pair_index: usize,
    patch: usize,
}

impl<'a> Cand<'a> {
    fn key(&self, kind: KeyKind) -> Option<&'a [f64]> {
        match kind {
            KeyKind::Score => Some(self.dist.as_slice()),
            KeyKind::Feature => self.feature,
            KeyKind::Patch => self.patch_key,
        }
    }
}

fn query_key(grid: &ScoreGrid, l: usize, kind: KeyKind) -> Option<&[f64]> {
    match kind {
        KeyKind::Score => Some(grid.distributions[l].as_slice()),
        KeyKind::Feature => grid.features.as_ref().map(|f| f[l].as_slice()),
        KeyKind::Patch => grid.patches.as_ref().map(|p| p[l].as_slice()),
    }
}

fn run_engine(
    query: &ScoreGrid,
    per_patch: &[Vec<Cand<'_>>],
    config: &SmoothingConfig,
) -> Result<SmoothedGrid> {
    config.validate()?;
    if per_patch.len() != query.len() {
        return Err(Error::dim("pool patches", query.len(), per_patch.len()));
    }
    let v = query.codebook_size();
    for c in per_patch.iter().flatten() {
        if c.dist.len() != v {
            return Err(Error::dim("pool codebook size", v, c.dist.len()));
        }
        if c.key(config.key).is_none() {
            return Err(Error::config(format!(
                "{:?} key requested but the pool carries no such key vectors",
                config.key
            )));
        }
    }
    if config.key != KeyKind::Score && query_key(query, 0, config.key).is_none() {
        return Err(Error::config(format!(
            "{:?} key requested but the query grid carries no such key vectors",
            config.key
        )));
    }
    if config.alpha == 0.0 {
        return Ok(SmoothedGrid::unchanged(query));
    }

    let metric = Metric::for_config(config);
    let flat: Vec<Cand<'_>> = match config.scope {
        Scope::All => per_patch.iter().flatten().copied().collect(),
        Scope::Patch => Vec::new(),
    };

    let results = (0..query.len())
        .into_par_iter()
        .map(|l| {
            let cands: &[Cand<'_>] = match config.scope {
                Scope::Patch => &per_patch[l],
                Scope::All => &flat,
            };
            let keyed: Vec<KeyedCandidate<'_>> = cands
                .iter()
                .map(|c| KeyedCandidate {
                    key: c.key(config.key).expect("checked above"),
                    pair_index: c.pair_index,
                    patch: c.patch,
                })
                .collect();
            let q = query_key(query, l, config.key).expect("checked above");
            let nn = knn_select(q, &keyed, config.k, metric)?;
            let distances = nn.distances();
            let weights = aggregation_weights(&distances, config)?;
            let values: Vec<&[f64]> = nn
                .entries
                .iter()
                .map(|n| cands[n.position].dist.as_slice())
                .collect();
            let s = &query.distributions[l];
            let smoothed = CodebookDistribution::from_simplex(
                blend(s.as_slice(), &values, &weights, config.alpha),
                RENORM_DRIFT,
            );
            let diag = PatchDiagnostics {
                neighbors: nn
                    .entries
                    .iter()
                    .zip(&weights)
                    .map(|(n, &w)| WeightedNeighbor {
                        pair_index: n.pair_index,
                        patch: n.patch,
                        distance: n.distance,
                        weight: w,
                    })
                    .collect(),
            };
            Ok((smoothed, diag))
        })
        .collect::<Result<Vec<_>>>()?;

    let (distributions, diagnostics) = results.into_iter().unzip();
    Ok(SmoothedGrid {
        distributions,
        diagnostics,
    })
}

/// Smooth every patch of the query grid against the prompt pool.
pub fn smooth_grid(query: &ScoreGrid, pool: &PromptPool, config: &SmoothingConfig) -> Result<SmoothedGrid> {
    if pool.patch_count() != query.len() {
        return Err(Error::dim("pool patches", query.len(), pool.patch_count()));
    }
    if pool.width() == 0 {
        return Err(Error::EmptyPool);
    }
    let per_patch: Vec<Vec<Cand<'_>>> = pool
        .patches()
        .iter()
        .enumerate()
        .map(|(l, entries)| {
            entries
                .iter()
                .map(|e| Cand {
                    dist: &e.distribution,
                    feature: e.feature.as_deref(),
                    patch_key: e.patch.as_deref(),
                    pair_index: e.pair_index,
                    patch: l,
                })
                .collect()
        })
        .collect();
    run_engine(query, &per_patch, config)
}

/// Treat `grids[0]` as the query and `grids[1..]` as a pool of whole
/// sequences, then smooth. Two grids give the two-sequence weighted sum.
pub fn aggregate_sequences(grids: &[ScoreGrid], config: &SmoothingConfig) -> Result<SmoothedGrid> {
    let (query, rest) = grids
        .split_first()
        .ok_or_else(|| Error::config("need at least one sequence"))?;
    for g in rest {
        if g.len() != query.len() {
            return Err(Error::dim("sequence patches", query.len(), g.len()));
        }
        if g.codebook_size() != query.codebook_size() {
            return Err(Error::dim("sequence codebook size", query.codebook_size(), g.codebook_size()));
        }
    }
    config.validate()?;
    if rest.is_empty() {
        return Ok(SmoothedGrid::unchanged(query));
    }
    let per_patch: Vec<Vec<Cand<'_>>> = (0..query.len())
        .map(|l| {
            rest.iter()
                .enumerate()
                .map(|(i, g)| Cand {
                    dist: &g.distributions[l],
                    feature: g.features.as_ref().map(|f| f[l].as_slice()),
                    patch_key: g.patches.as_ref().map(|p| p[l].as_slice()),
                    pair_index: i + 1,
                    patch: l,
                })
                .collect()
        })
        .collect();
    run_engine(query, &per_patch, config)
}

/// The same k-NN blend over unconstrained feature vectors with ℓ2 distance,
/// e.g. intermediate attention features of a pixel-space model.
///
/// `pools[l]` holds the candidate vectors for patch `l`. No normalization is
/// applied to the result.
pub fn smooth_features(
    query: &[Vec<f64>],
    pools: &[Vec<Vec<f64>>],
    config: &SmoothingConfig,
) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    if pools.len() != query.len() {
        return Err(Error::dim("feature pool patches", query.len(), pools.len()));
    }
    let dim = query.first().map_or(0, Vec::len);
    for v in query.iter().chain(pools.iter().flatten()) {
        if v.len() != dim {
            return Err(Error::dim("feature length", dim, v.len()));
        }
    }
    if config.alpha == 0.0 {
        return Ok(query.to_vec());
    }
    let keyed: Vec<Vec<KeyedCandidate<'_>>> = pools
        .iter()
        .enumerate()
        .map(|(l, vs)| {
            vs.iter()
                .enumerate()
                .map(|(i, v)| KeyedCandidate {
                    key: v,
                    pair_index: i + 1,
                    patch: l,
                })
                .collect()
        })
        .collect();
    let flat: Vec<KeyedCandidate<'_>> = match config.scope {
        Scope::All => keyed.iter().flatten().copied().collect(),
        Scope::Patch => Vec::new(),
    };
    query
        .par_iter()
        .enumerate()
        .map(|(l, q)| {
            let cands = match config.scope {
                Scope::Patch => &keyed[l],
                Scope::All => &flat,
            };
            if cands.is_empty() {
                return Ok(q.clone());
            }
            let nn = knn_select(q, cands, config.k, Metric::L2)?;
            let weights = aggregation_weights(&nn.distances(), config)?;
            let values: Vec<&[f64]> = nn.entries.iter().map(|n| cands[n.position].key).collect();
            Ok(blend(q, &values, &weights, config.alpha))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn d(v: &[f64]) -> CodebookDistribution {
        CodebookDistribution::new(v.to_vec()).unwrap()
    }

    fn cfg(k: usize, alpha: f64, aggregation: Aggregation) -> SmoothingConfig {
        SmoothingConfig {
            k,
            alpha,
            aggregation,
            ..SmoothingConfig::defaults(k)
        }
    }

    #[test]
    fn defaults_follow_pool_width() {
        assert_eq!(SmoothingConfig::defaults(3).k, 3);
        assert_eq!(SmoothingConfig::defaults(7).k, 5);
        assert_eq!(SmoothingConfig::detection_defaults(7).alpha, 0.7);
        let f = SmoothingConfig::feature_defaults();
        assert_eq!((f.m, f.tau, f.alpha), (2, 25.0, 0.5));
        assert_eq!(SmoothingConfig::sequence_defaults().alpha, 0.8);
    }

    #[test]
    fn validate_rejects_bad_values() {
        let base = SmoothingConfig::defaults(4);
        assert!(SmoothingConfig { k: 0, ..base }.validate().is_err());
        assert!(SmoothingConfig { alpha: 1.5, ..base }.validate().is_err());
        assert!(SmoothingConfig { alpha: f64::NAN, ..base }.validate().is_err());
        assert!(SmoothingConfig { tau: 0.0, ..base }.validate().is_err());
        assert!(base.validate().is_ok());
    }

    #[test]
    fn knn_examples() {
        let q = [1.0, 0.0];
        let a = [0.5, 0.5];
        let b = [0.0, 1.0];
        let c = [1.0, 0.0];
        let cands = [
            KeyedCandidate { key: &a, pair_index: 1, patch: 0 },
            KeyedCandidate { key: &b, pair_index: 2, patch: 0 },
            KeyedCandidate { key: &c, pair_index: 3, patch: 0 },
        ];
        let js = Metric::Divergence(DivergenceKind::Js);
        let nn = knn_select(&q, &cands, 2, js).unwrap();
        assert_eq!(nn.entries.iter().map(|n| n.pair_index).collect::<Vec<_>>(), [3, 1]);
        assert_eq!(nn.entries[0].distance, 0.0);

        let all = knn_select(&q, &cands, 10, js).unwrap();
        assert_eq!(all.entries.iter().map(|n| n.pair_index).collect::<Vec<_>>(), [3, 1, 2]);
        assert!(matches!(knn_select(&q, &[], 1, js), Err(Error::EmptyPool)));
        let short = [1.0];
        let bad = [KeyedCandidate { key: &short, pair_index: 1, patch: 0 }];
        assert!(matches!(knn_select(&q, &bad, 1, js), Err(Error::Dimension { .. })));
    }

    #[test]
    fn knn_ties_use_slot_then_patch() {
        let k = [0.5, 0.5];
        let cands = [
            KeyedCandidate { key: &k, pair_index: 2, patch: 0 },
            KeyedCandidate { key: &k, pair_index: 1, patch: 1 },
            KeyedCandidate { key: &k, pair_index: 1, patch: 0 },
        ];
        let nn = knn_select(&[0.5, 0.5], &cands, 3, Metric::L2).unwrap();
        let order: Vec<_> = nn.entries.iter().map(|n| (n.pair_index, n.patch)).collect();
        assert_eq!(order, [(1, 0), (1, 1), (2, 0)]);
    }

    #[test]
    fn kl_infinite_distances_sort_last() {
        let q = [1.0, 0.0];
        let a = [0.0, 1.0];
        let b = [1.0, 0.0];
        let cands = [
            KeyedCandidate { key: &a, pair_index: 1, patch: 0 },
            KeyedCandidate { key: &b, pair_index: 2, patch: 0 },
        ];
        let nn = knn_select(&q, &cands, 2, Metric::Divergence(DivergenceKind::Kl)).unwrap();
        assert_eq!(nn.entries[0].pair_index, 2);
        assert!(nn.entries[1].distance.is_infinite());
    }

    #[test]
    fn softmax_examples() {
        let w = softmax_weights(&[0.3, 0.3, 0.3], 0.7).unwrap();
        for x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        // 40-digit reference: [2/3, 1/3].
        let w = softmax_weights(&[0.0, LN_2], 1.0).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(softmax_weights(&[4.2], 3.0).unwrap(), [1.0]);
        let w = softmax_weights(&[0.1, f64::INFINITY], 1.0).unwrap();
        assert_eq!(w, [1.0, 0.0]);
        assert!(matches!(
            softmax_weights(&[f64::INFINITY, f64::INFINITY], 1.0),
            Err(Error::DegenerateWeights(2))
        ));
        // Large distances over a small temperature do not underflow.
        let w = softmax_weights(&[1000.0, 1001.0], 0.5).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_patch_examples() {
        let s = d(&[1.0, 0.0]);
        let u = d(&[0.0, 1.0]);
        let id = smooth_patch(&s, &[(&u, LN_2)], &cfg(1, 0.0, Aggregation::Weighted)).unwrap();
        assert_eq!(id, s);
        let near = smooth_patch(&s, &[(&u, LN_2)], &cfg(1, 1.0, Aggregation::Nearest)).unwrap();
        assert_eq!(near, u);
        let half = smooth_patch(&s, &[(&u, LN_2)], &cfg(1, 0.5, Aggregation::Weighted)).unwrap();
        assert_eq!(half.as_slice(), &[0.5, 0.5]);
        assert_eq!(smooth_patch(&s, &[], &cfg(1, 0.5, Aggregation::Weighted)).unwrap(), s);
        let three = d(&[0.2, 0.3, 0.5]);
        assert!(smooth_patch(&s, &[(&three, 0.1)], &cfg(1, 0.5, Aggregation::Weighted)).is_err());
    }

    fn single_patch_grid(v: &[f64]) -> ScoreGrid {
        ScoreGrid::new(vec![d(v)]).unwrap()
    }

    #[test]
    fn aggregate_sequences_examples() {
        let q = single_patch_grid(&[1.0, 0.0]);
        let other = single_patch_grid(&[0.0, 1.0]);
        let c = SmoothingConfig::sequence_defaults();
        let out = aggregate_sequences(&[q.clone(), other], &c).unwrap();
        let got = out.distributions[0].as_slice();
        assert!((got[0] - 0.2).abs() < 1e-15 && (got[1] - 0.8).abs() < 1e-15, "{got:?}");

        let one = aggregate_sequences(std::slice::from_ref(&q), &c).unwrap();
        assert_eq!(one.distributions, q.distributions);

        let x = single_patch_grid(&[0.3, 0.7]);
        let same = aggregate_sequences(&[x.clone(), x.clone()], &c).unwrap();
        for (a, b) in same.distributions[0].as_slice().iter().zip(x.distributions[0].as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        let wide = ScoreGrid::new(vec![d(&[0.5, 0.5]), d(&[0.5, 0.5])]).unwrap();
        assert!(aggregate_sequences(&[q, wide], &c).is_err());
    }

    #[test]
    fn smooth_features_examples() {
        let q = vec![vec![1.0, -2.0, 3.0]];
        let v = vec![4.0, 0.5, -1.0];
        let pools = vec![vec![v.clone(), v.clone()]];
        let c = SmoothingConfig {
            alpha: 0.0,
            ..SmoothingConfig::feature_defaults()
        };
        assert_eq!(smooth_features(&q, &pools, &c).unwrap(), q);
        let c = SmoothingConfig::feature_defaults();
        let out = smooth_features(&q, &pools, &c).unwrap();
        for ((o, a), b) in out[0].iter().zip(&q[0]).zip(&v) {
            assert!((o - (0.5 * a + 0.5 * b)).abs() < 1e-12);
        }
        assert!(smooth_features(&q, &[vec![vec![1.0]]], &c).is_err());
    }
}
