//! A small deterministic stand-in for a visual in-context learning task.
//!
//! Items are token grids drawn around a handful of prototypes; each item's
//! output is a fixed token-to-token rule applied patchwise, and its latent
//! feature map is a noisy one-hot encoding of its input. The biased scorer
//! mixes the anchor's true output token with the in-context pair's output
//! token, which reproduces the single-pair over-reliance that smoothing is
//! meant to remove. Everything is a function of the seed.
//!
//! RNG: ChaCha8 seeded from the world seed. Stream 0 drives world-level
//! draws (rule, prototypes, token embeddings); item `j` uses stream `j + 1`.
//! Experiment query sampling uses its own ChaCha8 seeded by the experiment
//! seed.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{CodebookDistribution, CodebookSpec};
use crate::error::{Error, Result};
use crate::metrics::{decode_argmax, pixel_accuracy};
use crate::pool::{build_pool, score_prompt, PoolMode, PromptPool, PromptSpec, ScoreGrid, ScorerBackend};
use crate::retriever::{top_m, FeatureMap, RetrievalIndex, flatten_normalize};
use crate::smoothing::{Aggregation, KeyKind, Scope, SmoothedGrid, SmoothingConfig, PatchDiagnostics, WeightedNeighbor};
use crate::divergence::DivergenceKind;
use crate::types::{GridDims, ItemId};

pub const RNG_CONTRACT: &str =
    "ChaCha8 (rand_chacha); world stream 0, item j stream j+1; query sampling seeded by experiment seed";

/// Dimension of the per-token embedding used for feature and patch keys.
pub const EMBED_DIM: usize = 8;
const FLIP_PROB: f64 = 0.3;
const FEATURE_NOISE: f64 = 0.35;

static SEED_FILE: &str = include_str!("../data/seeds.txt");

/// The 100 fixed experiment seeds shipped with the crate.
pub fn fixed_seeds() -> Vec<u64> {
    SEED_FILE
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse().expect("seeds.txt holds integers"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TaskFamily {
    #[default]
    Identity,
    Shift {
        offset: u32,
    },
    Permute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub codebook_size: usize,
    pub n_items: usize,
    #[serde(default)]
    pub task: TaskFamily,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            rows: 4,
            cols: 4,
            codebook_size: 16,
            n_items: 80,
            task: TaskFamily::Permute,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticItem {
    pub id: ItemId,
    pub input: Vec<u32>,
    pub output: Vec<u32>,
    pub feature: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub grid: GridDims,
    pub codebook: CodebookSpec,
    /// `rule[v]` is the output token for input token `v`.
    pub rule: Vec<u32>,
    pub embeddings: Vec<Vec<f64>>,
    pub items: Vec<SyntheticItem>,
    pub support: Vec<ItemId>,
    pub queries: Vec<ItemId>,
    lookup: HashMap<ItemId, usize>,
}

impl SyntheticWorld {
    pub fn item(&self, id: &ItemId) -> Result<&SyntheticItem> {
        self.lookup
            .get(id)
            .map(|&i| &self.items[i])
            .ok_or_else(|| Error::MissingItem(id.to_string()))
    }

    pub fn support_index(&self) -> Result<RetrievalIndex> {
        let maps = self
            .support
            .iter()
            .map(|id| self.item(id).map(|it| &it.feature))
            .collect::<Result<Vec<_>>>()?;
        RetrievalIndex::from_maps(maps)
    }
}

fn item_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64 + 1);
    rng
}

pub fn generate_world(spec: WorldSpec) -> Result<SyntheticWorld> {
    let grid = GridDims::new(spec.rows, spec.cols)?;
    let codebook = CodebookSpec::new(spec.codebook_size)?;
    if spec.n_items < 2 {
        return Err(Error::config(format!("need at least 2 items, got {}", spec.n_items)));
    }
    let v = spec.codebook_size;
    let l = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let rule: Vec<u32> = match spec.task {
        TaskFamily::Identity => (0..v as u32).collect(),
        TaskFamily::Shift { offset } => (0..v as u32).map(|t| (t + offset) % v as u32).collect(),
        TaskFamily::Permute => {
            let mut r: Vec<u32> = (0..v as u32).collect();
            r.shuffle(&mut rng);
            r
        }
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let embeddings: Vec<Vec<f64>> = (0..v)
        .map(|_| (0..EMBED_DIM).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let n_proto = (spec.n_items / 8).max(2);
    let prototypes: Vec<Vec<u32>> = (0..n_proto)
        .map(|_| (0..l).map(|_| rng.random_range(0..v as u32)).collect())
        .collect();

    let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid sigma");
    let items = (0..spec.n_items)
        .map(|j| {
            let mut r = item_rng(spec.seed, j);
            let proto = &prototypes[r.random_range(0..n_proto)];
            let input: Vec<u32> = proto
                .iter()
                .map(|&t| if r.random_bool(FLIP_PROB) { r.random_range(0..v as u32) } else { t })
                .collect();
            let output = input.iter().map(|&t| rule[t as usize]).collect();
            let mut values = vec![0.0; v * l];
            for (li, &t) in input.iter().enumerate() {
                values[t as usize * l + li] = 1.0;
            }
            values.iter_mut().for_each(|x| *x += noise.sample(&mut r));
            let id = ItemId::new(format!("item-{j:05}"));
            let feature = FeatureMap::new(id.clone(), (v, spec.rows, spec.cols), values)?;
            Ok(SyntheticItem {
                id,
                input,
                output,
                feature,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n_query = (spec.n_items / 5).max(1);
    let split = spec.n_items - n_query;
    let support = items[..split].iter().map(|i| i.id.clone()).collect();
    let queries = items[split..].iter().map(|i| i.id.clone()).collect();
    let lookup = items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
    Ok(SyntheticWorld {
        spec,
        grid,
        codebook,
        rule,
        embeddings,
        items,
        support,
        queries,
        lookup,
    })
}

/// Mixture weights of the biased scorer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasedScorerParams {
    /// Mass on the anchor's true output token.
    pub beta_truth: f64,
    /// Mass on the in-context pair's output token at the same patch.
    pub beta_pair: f64,
    /// Mass spread uniformly over the codebook.
    pub epsilon_noise: f64,
    /// Fraction of `beta_truth` moved to the pair token per unit of
    /// anchor↔pair feature dissimilarity `(1 − cos)/2`.
    #[serde(default)]
    pub similarity_coupling: f64,
}

impl BiasedScorerParams {
    pub fn new(beta_truth: f64, beta_pair: f64, epsilon_noise: f64) -> Self {
        Self {
            beta_truth,
            beta_pair,
            epsilon_noise,
            similarity_coupling: 0.0,
        }
    }

    /// The moderate-bias regime `(0.45, 0.45, 0.1)`.
    pub fn moderate() -> Self {
        Self::new(0.45, 0.45, 0.1)
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.beta_truth, self.beta_pair, self.epsilon_noise, self.similarity_coupling];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::config(format!("scorer weights must be finite and >= 0: {w:?}")));
        }
        if self.beta_truth + self.beta_pair + self.epsilon_noise <= 0.0 {
            return Err(Error::config("scorer weights sum to zero"));
        }
        Ok(())
    }
}

/// Biased scorer over a synthetic world.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticScorer<'w> {
    pub world: &'w SyntheticWorld,
    pub params: BiasedScorerParams,
}

impl<'w> SyntheticScorer<'w> {
    pub fn new(world: &'w SyntheticWorld, params: BiasedScorerParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { world, params })
    }
}

impl ScorerBackend for SyntheticScorer<'_> {
    fn grid(&self) -> GridDims {
        self.world.grid
    }

    fn codebook_size(&self) -> usize {
        self.world.codebook.size()
    }

    fn score(&self, prompt: &PromptSpec) -> Result<ScoreGrid> {
        synthetic_score(self.world, &self.params, prompt)
    }
}

/// Per patch: `β_t·onehot(truth) + β_p·onehot(pair token) + ε·uniform`,
/// normalized, with `β_t` partly shifted to `β_p` when the anchor and the
/// pair input are dissimilar.
pub fn synthetic_score(
    world: &SyntheticWorld,
    params: &BiasedScorerParams,
    prompt: &PromptSpec,
) -> Result<ScoreGrid> {
    params.validate()?;
    let anchor = world.item(&prompt.anchor)?;
    let pair_in = world.item(&prompt.in_context_input)?;
    let pair_out = world.item(&prompt.in_context_output)?;
    if prompt.grid != world.grid {
        return Err(Error::dim("prompt grid patches", world.grid.len(), prompt.grid.len()));
    }

    let mut bt = params.beta_truth;
    let mut bp = params.beta_pair;
    if params.similarity_coupling > 0.0 {
        let sim = flatten_normalize(&anchor.feature)?.dot(&flatten_normalize(&pair_in.feature)?)?;
        let moved = (params.similarity_coupling * (1.0 - sim) / 2.0).clamp(0.0, 1.0) * bt;
        bt -= moved;
        bp += moved;
    }
    let total = bt + bp + params.epsilon_noise;
    let (bt, bp, eps) = (bt / total, bp / total, params.epsilon_noise / total);

    let v = world.codebook.size();
    let mut dists = Vec::with_capacity(world.grid.len());
    let mut features = Vec::with_capacity(world.grid.len());
    let mut patches = Vec::with_capacity(world.grid.len());
    for l in 0..world.grid.len() {
        let mut p = vec![eps / v as f64; v];
        p[anchor.output[l] as usize] += bt;
        p[pair_out.output[l] as usize] += bp;
        let mut f = vec![0.0; EMBED_DIM];
        for (t, &w) in p.iter().enumerate() {
            for (fi, e) in f.iter_mut().zip(&world.embeddings[t]) {
                *fi += w * e;
            }
        }
        let d = CodebookDistribution::from_weights(p)?;
        patches.push(world.embeddings[d.argmax()].clone());
        features.push(f);
        dists.push(d);
    }
    ScoreGrid::new(dists)?.with_features(features)?.with_patches(patches)
}

// ---------------------------------------------------------------------------
// Brute-force oracle. Shares no kernels with `smoothing` or `divergence`.
// ---------------------------------------------------------------------------

fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            if q[i] <= 0.0 {
                return f64::INFINITY;
            }
            total += p[i] * (p[i] / q[i]).ln();
        }
    }
    total
}

fn oracle_js(p: &[f64], q: &[f64]) -> f64 {
    let mid: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    (oracle_kl(p, &mid) + oracle_kl(q, &mid)) / 2.0
}

fn oracle_l2(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        total += (p[i] - q[i]).powi(2);
    }
    total.sqrt()
}

struct OracleCandidate<'a> {
    scores: &'a [f64],
    slot: usize,
    patch: usize,
    distance: f64,
}

/// Exhaustive reference for [`crate::smoothing::smooth_grid`]: every distance,
/// a full sort, then the blend written out term by term.
pub fn brute_force_smooth(
    query: &ScoreGrid,
    pool: &PromptPool,
    config: &SmoothingConfig,
) -> Result<SmoothedGrid> {
    config.validate()?;
    if pool.patch_count() != query.len() {
        return Err(Error::dim("pool patches", query.len(), pool.patch_count()));
    }
    if pool.width() == 0 {
        return Err(Error::EmptyPool);
    }
    let v = query.codebook_size();
    let key_of_query = |l: usize| -> Result<&[f64]> {
        match config.key {
            KeyKind::Score => Ok(query.distributions[l].as_slice()),
            KeyKind::Feature => query.features.as_ref().map(|f| f[l].as_slice()).ok_or_else(|| Error::config("no feature keys")),
            KeyKind::Patch => query.patches.as_ref().map(|f| f[l].as_slice()).ok_or_else(|| Error::config("no patch keys")),
        }
    };
    let mut all = Vec::new();
    for (l, entries) in pool.patches().iter().enumerate() {
        for e in entries {
            if e.distribution.len() != v {
                return Err(Error::dim("pool codebook size", v, e.distribution.len()));
            }
            let key = match config.key {
                KeyKind::Score => Some(e.distribution.as_slice()),
                KeyKind::Feature => e.feature.as_deref(),
                KeyKind::Patch => e.patch.as_deref(),
            }
            .ok_or_else(|| Error::config("pool entry lacks key"))?;
            all.push((l, e.distribution.as_slice(), key, e.pair_index));
        }
    }
    if query.is_empty() {
        return Err(Error::dim("query patches", 1, 0));
    }

    let mut distributions = Vec::with_capacity(query.len());
    let mut diagnostics = Vec::with_capacity(query.len());
    for l in 0..query.len() {
        let s = query.distributions[l].as_slice();
        if config.alpha == 0.0 {
            distributions.push(query.distributions[l].clone());
            diagnostics.push(PatchDiagnostics::default());
            continue;
        }
        let qk = key_of_query(l)?;
        let mut cands: Vec<OracleCandidate<'_>> = Vec::new();
        for &(pl, scores, key, slot) in &all {
            if config.scope == Scope::Patch && pl != l {
                continue;
            }
            if key.len() != qk.len() {
                return Err(Error::dim("neighbor key length", qk.len(), key.len()));
            }
            let distance = match (config.key, config.divergence) {
                (KeyKind::Score, DivergenceKind::Js) => oracle_js(scores, s),
                (KeyKind::Score, DivergenceKind::Kl) => oracle_kl(scores, s),
                _ => oracle_l2(key, qk),
            };
            cands.push(OracleCandidate { scores, slot, patch: pl, distance });
        }
        if cands.is_empty() {
            return Err(Error::EmptyPool);
        }
        cands.sort_by(|a, b| {
            a.distance
                .partial_cmp(&b.distance)
                .expect("no NaN distances")
                .then(a.slot.cmp(&b.slot))
                .then(a.patch.cmp(&b.patch))
        });
        let chosen = &cands[..config.k.min(cands.len())];

        let finite: Vec<&OracleCandidate<'_>> = chosen.iter().filter(|c| c.distance.is_finite()).collect();
        if finite.is_empty() || (config.aggregation == Aggregation::Nearest && !chosen[0].distance.is_finite()) {
            return Err(Error::DegenerateWeights(chosen.len()));
        }
        let weights: Vec<f64> = match config.aggregation {
            Aggregation::Nearest => chosen.iter().enumerate().map(|(i, _)| if i == 0 { 1.0 } else { 0.0 }).collect(),
            Aggregation::Average => chosen
                .iter()
                .map(|c| if c.distance.is_finite() { 1.0 / finite.len() as f64 } else { 0.0 })
                .collect(),
            Aggregation::Weighted => {
                let lowest = finite.iter().map(|c| c.distance).fold(f64::INFINITY, f64::min);
                let num: Vec<f64> = chosen
                    .iter()
                    .map(|c| if c.distance.is_finite() { (-(c.distance - lowest) / config.tau).exp() } else { 0.0 })
                    .collect();
                let den: f64 = num.iter().sum();
                num.iter().map(|n| n / den).collect()
            }
        };
        let mut out = vec![0.0; v];
        for t in 0..v {
            let mut neighbor_sum = 0.0;
            for (c, w) in chosen.iter().zip(&weights) {
                neighbor_sum += c.scores[t] * w;
            }
            out[t] = (1.0 - config.alpha) * s[t] + config.alpha * neighbor_sum;
        }
        distributions.push(CodebookDistribution::from_weights(out)?);
        diagnostics.push(PatchDiagnostics {
            neighbors: chosen
                .iter()
                .zip(&weights)
                .map(|(c, &w)| WeightedNeighbor { pair_index: c.slot, patch: c.patch, distance: c.distance, weight: w })
                .collect(),
        });
    }
    Ok(SmoothedGrid {
        distributions,
        diagnostics,
    })
}

/// The queries evaluated on a synthetic world: `n` of them (all if `n` is 0
/// or too large) chosen with `seed`, in world order.
pub fn sample_queries(world: &SyntheticWorld, n: usize, seed: u64) -> Vec<ItemId> {
    let total = world.queries.len();
    let n = if n == 0 { total } else { n.min(total) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, n).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| world.queries[i].clone()).collect()
}

// ---------------------------------------------------------------------------
// Bias experiment
// ---------------------------------------------------------------------------

/// One configuration's outcome on one world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigOutcome {
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    /// Mean over patches of `JS(ŝ_l, onehot(truth_l))`.
    pub js_to_truth: f64,
    pub baseline_js_to_truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldExperiment {
    pub seed: u64,
    pub queries: Vec<ItemId>,
    pub outcomes: Vec<ConfigOutcome>,
}

fn js_to_onehot(d: &CodebookDistribution, token: u32) -> f64 {
    let truth = CodebookDistribution::one_hot(d.len(), token as usize).expect("token in range");
    crate::divergence::js_divergence(d, &truth).expect("equal lengths")
}

/// Run every config against the single-pair baseline on `n_queries` query
/// items (all of them if fewer exist), chosen with `seed`.
pub fn run_bias_experiment(
    world: &SyntheticWorld,
    params: &BiasedScorerParams,
    configs: &[SmoothingConfig],
    n_queries: usize,
    seed: u64,
) -> Result<WorldExperiment> {
    let max_m = configs.iter().map(|c| c.m).max().ok_or_else(|| Error::config("no configs"))?;
    if max_m == 0 {
        return Err(Error::config("m must be >= 1"));
    }
    if world.support.len() < max_m {
        return Err(Error::config(format!(
            "world has {} support items, configs need {max_m}",
            world.support.len()
        )));
    }
    for c in configs {
        c.validate()?;
    }
    let scorer = SyntheticScorer::new(world, *params)?;
    let index = world.support_index()?;

    let n = n_queries.min(world.queries.len());
    if n == 0 {
        return Err(Error::config("no queries to evaluate"));
    }
    let queries = sample_queries(world, n, seed);

    let mut sums = vec![[0.0f64; 4]; configs.len()];
    let mut patches = 0usize;
    for q in &queries {
        let item = world.item(q)?;
        let qv = flatten_normalize(&item.feature)?;
        let retrieved = top_m(&qv, &index, max_m)?;
        let top = &retrieved.items[0].id;
        let base = score_prompt(&scorer, &PromptSpec::new(top, q, world.grid))?;
        let base_pred = decode_argmax(world.grid, &base.distributions)?;
        let base_acc = pixel_accuracy(&base_pred.tokens, &item.output)?;
        let base_js: f64 = base
            .distributions
            .iter()
            .zip(&item.output)
            .map(|(d, &t)| js_to_onehot(d, t))
            .sum();
        let l = world.grid.len();
        patches += l;

        for (ci, cfg) in configs.iter().enumerate() {
            let mut sub = retrieved.clone();
            sub.items.truncate(cfg.m);
            let pool = build_pool(&scorer, &sub, q, PoolMode::Q)?;
            let smoothed = crate::smoothing::smooth_grid(&base, &pool, cfg)?;
            let pred = decode_argmax(world.grid, &smoothed.distributions)?;
            let acc = pixel_accuracy(&pred.tokens, &item.output)?;
            let js: f64 = smoothed
                .distributions
                .iter()
                .zip(&item.output)
                .map(|(d, &t)| js_to_onehot(d, t))
                .sum();
            let s = &mut sums[ci];
            s[0] += acc * l as f64;
            s[1] += base_acc * l as f64;
            s[2] += js;
            s[3] += base_js;
        }
    }
    let denom = patches as f64;
    Ok(WorldExperiment {
        seed,
        queries,
        outcomes: sums
            .into_iter()
            .map(|s| ConfigOutcome {
                accuracy: s[0] / denom,
                baseline_accuracy: s[1] / denom,
                js_to_truth: s[2] / denom,
                baseline_js_to_truth: s[3] / denom,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub js_to_truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRow {
    pub config: SmoothingConfig,
    pub mean_accuracy: f64,
    pub mean_baseline_accuracy: f64,
    /// `mean_accuracy − mean_baseline_accuracy`.
    pub margin: f64,
    pub mean_js_to_truth: f64,
    pub mean_baseline_js_to_truth: f64,
    pub per_seed: Vec<SeedRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub rng: String,
    pub world: WorldSpec,
    pub params: BiasedScorerParams,
    pub n_queries: usize,
    pub seeds: Vec<u64>,
    pub configs: Vec<ConfigRow>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl ExperimentReport {
    pub fn row_for_m(&self, m: usize) -> Option<&ConfigRow> {
        self.configs.iter().find(|r| r.config.m == m)
    }
}

/// Run the experiment over one world per seed (world seed = experiment seed)
/// and average per config. Seeds run in parallel; rows are merged in seed order.
pub fn run_bias_sweep(
    world: WorldSpec,
    params: &BiasedScorerParams,
    configs: &[SmoothingConfig],
    n_queries: usize,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::config("no seeds"));
    }
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let w = generate_world(WorldSpec { seed, ..world })?;
            run_bias_experiment(&w, params, configs, n_queries, seed)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = runs.len() as f64;
    let rows = configs
        .iter()
        .enumerate()
        .map(|(ci, cfg)| {
            let per_seed: Vec<SeedRow> = runs
                .iter()
                .map(|r| SeedRow {
                    seed: r.seed,
                    accuracy: r.outcomes[ci].accuracy,
                    baseline_accuracy: r.outcomes[ci].baseline_accuracy,
                    js_to_truth: r.outcomes[ci].js_to_truth,
                })
                .collect();
            let mean_of = |f: &dyn Fn(&ConfigOutcome) -> f64| runs.iter().map(|r| f(&r.outcomes[ci])).sum::<f64>() / n;
            let mean_accuracy = mean_of(&|o| o.accuracy);
            let mean_baseline_accuracy = mean_of(&|o| o.baseline_accuracy);
            ConfigRow {
                config: *cfg,
                mean_accuracy,
                mean_baseline_accuracy,
                margin: mean_accuracy - mean_baseline_accuracy,
                mean_js_to_truth: mean_of(&|o| o.js_to_truth),
                mean_baseline_js_to_truth: mean_of(&|o| o.baseline_js_to_truth),
                per_seed,
            }
        })
        .collect();
    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rng: RNG_CONTRACT.into(),
        world: WorldSpec { seed: seeds[0], ..world },
        params: *params,
        n_queries,
        seeds: seeds.to_vec(),
        configs: rows,
    })
}
