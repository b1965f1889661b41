//! Symbolic prompt canvases, the scorer interface, and per-patch prompt pools.
//!
//! A prompt is the four-cell canvas `[x, y, anchor, blank]`; only the ids are
//! tracked here. A [`ScorerBackend`] turns a prompt into one assignment-score
//! distribution per masked patch. A [`PromptPool`] collects, for every patch,
//! the distributions produced by several prompts.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::CodebookDistribution;
use crate::error::{Error, Result};
use crate::retriever::RetrievedSet;
use crate::tensor_file::read_tensor;
use crate::types::{GridDims, ItemId};

/// The canvas `[in_context_input, in_context_output, anchor, blank]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub in_context_input: ItemId,
    pub in_context_output: ItemId,
    pub anchor: ItemId,
    pub grid: GridDims,
}

impl PromptSpec {
    /// Prompt built from the support item `pair` (its input and ground-truth
    /// output) with `anchor` in the query cell.
    pub fn new(pair: &ItemId, anchor: &ItemId, grid: GridDims) -> Self {
        Self {
            in_context_input: pair.clone(),
            in_context_output: pair.clone(),
            anchor: anchor.clone(),
            grid,
        }
    }

    pub fn file_stem(&self) -> String {
        format!(
            "{}__{}__{}",
            self.in_context_input, self.in_context_output, self.anchor
        )
    }
}

/// Per-patch assignment scores from one prompt, plus optional key vectors
/// (intermediate features and decoded patch values) used by non-score keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub distributions: Vec<CodebookDistribution>,
    pub features: Option<Vec<Vec<f64>>>,
    pub patches: Option<Vec<Vec<f64>>>,
    pub prompt: Option<PromptSpec>,
}

impl ScoreGrid {
    pub fn new(distributions: Vec<CodebookDistribution>) -> Result<Self> {
        let first = distributions
            .first()
            .ok_or_else(|| Error::config("score grid needs at least one patch"))?;
        let v = first.len();
        if let Some(bad) = distributions.iter().find(|d| d.len() != v) {
            return Err(Error::dim("score grid codebook size", v, bad.len()));
        }
        Ok(Self {
            distributions,
            features: None,
            patches: None,
            prompt: None,
        })
    }

    pub fn with_features(mut self, features: Vec<Vec<f64>>) -> Result<Self> {
        check_keys(&features, self.len(), "feature keys")?;
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_patches(mut self, patches: Vec<Vec<f64>>) -> Result<Self> {
        check_keys(&patches, self.len(), "patch keys")?;
        self.patches = Some(patches);
        Ok(self)
    }

    /// Number of patches `L`.
    pub fn len(&self) -> usize {
        self.distributions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distributions.is_empty()
    }

    pub fn codebook_size(&self) -> usize {
        self.distributions[0].len()
    }
}

pub(crate) fn check_keys(keys: &[Vec<f64>], patches: usize, context: &'static str) -> Result<()> {
    if keys.len() != patches {
        return Err(Error::dim(context, patches, keys.len()));
    }
    if let Some(first) = keys.first() {
        if let Some(bad) = keys.iter().find(|k| k.len() != first.len()) {
            return Err(Error::dim(context, first.len(), bad.len()));
        }
    }
    Ok(())
}

/// Anything that maps a prompt to per-patch assignment scores.
///
/// Implementations must be deterministic: the same prompt always yields the
/// same grid, bit for bit.
pub trait ScorerBackend: Sync {
    fn grid(&self) -> GridDims;
    fn codebook_size(&self) -> usize;
    fn score(&self, prompt: &PromptSpec) -> Result<ScoreGrid>;
}

/// Score one prompt and check the result against the backend's declared shape.
pub fn score_prompt<B: ScorerBackend + ?Sized>(backend: &B, prompt: &PromptSpec) -> Result<ScoreGrid> {
    let mut grid = backend.score(prompt)?;
    let l = backend.grid().len();
    if grid.len() != l {
        return Err(Error::dim("scored patches", l, grid.len()));
    }
    if grid.codebook_size() != backend.codebook_size() {
        return Err(Error::dim(
            "scored codebook size",
            backend.codebook_size(),
            grid.codebook_size(),
        ));
    }
    grid.prompt = Some(prompt.clone());
    Ok(grid)
}

/// Scores exported by an external model, one container per prompt.
///
/// The file for a prompt is `<dir>/<input>__<output>__<anchor>.pncl` holding
/// an f32 tensor of shape `(L, |V|)`, rows in the exporter's patch order.
/// Optional siblings `<stem>.feature.pncl` and `<stem>.patch.pncl` with shape
/// `(L, d)` carry key vectors. Rows are renormalized on import.
#[derive(Debug, Clone)]
pub struct FileScorer {
    dir: PathBuf,
    grid: GridDims,
    codebook_size: usize,
}

impl FileScorer {
    pub fn new(dir: impl Into<PathBuf>, grid: GridDims, codebook_size: usize) -> Self {
        Self {
            dir: dir.into(),
            grid,
            codebook_size,
        }
    }

    pub fn path_for(&self, prompt: &PromptSpec) -> PathBuf {
        self.dir.join(format!("{}.pncl", prompt.file_stem()))
    }

    fn keys(&self, prompt: &PromptSpec, kind: &str) -> Result<Option<Vec<Vec<f64>>>> {
        let path = self.dir.join(format!("{}.{kind}.pncl", prompt.file_stem()));
        if !path.exists() {
            return Ok(None);
        }
        let t = read_tensor(&path)?;
        t.expect_shape("key tensor", &[Some(self.grid.len()), None])?;
        let d = t.dims()[1];
        let data = t
            .as_f32()
            .ok_or_else(|| Error::config(format!("{} must be f32", path.display())))?;
        Ok(Some(
            data.chunks(d.max(1))
                .take(self.grid.len())
                .map(|row| row.iter().map(|&x| f64::from(x)).collect())
                .collect(),
        ))
    }
}

impl ScorerBackend for FileScorer {
    fn grid(&self) -> GridDims {
        self.grid
    }

    fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    fn score(&self, prompt: &PromptSpec) -> Result<ScoreGrid> {
        let path = self.path_for(prompt);
        if !path.exists() {
            return Err(Error::MissingItem(format!(
                "no exported scores for prompt {} at {}",
                prompt.file_stem(),
                path.display()
            )));
        }
        let t = read_tensor(&path)?;
        t.expect_shape(
            "exported score tensor",
            &[Some(self.grid.len()), Some(self.codebook_size)],
        )?;
        let data = t
            .as_f32()
            .ok_or_else(|| Error::config(format!("{} must be f32", path.display())))?;
        let dists = data
            .chunks(self.codebook_size)
            .map(|row| CodebookDistribution::from_weights(row.iter().map(|&x| f64::from(x)).collect()))
            .collect::<Result<Vec<_>>>()?;
        let mut grid = ScoreGrid::new(dists)?;
        if let Some(f) = self.keys(prompt, "feature")? {
            grid = grid.with_features(f)?;
        }
        if let Some(p) = self.keys(prompt, "patch")? {
            grid = grid.with_patches(p)?;
        }
        Ok(grid)
    }
}

/// How prompts for the pool are assembled from the retrieved pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PoolMode {
    /// Every retrieved pair with the query as anchor.
    #[default]
    Q,
    /// The top pair with anchors drawn without replacement from the retrieved inputs.
    Rand { seed: Option<u64> },
    /// The top pair with anchors `x_2..x_m` in retrieval order.
    Seq,
    /// Every retrieved pair anchored on its own input.
    #[serde(rename = "self")]
    SelfAnchor,
}

impl PoolMode {
    /// Whether the caller must add the query prompt to complete the pool.
    pub fn needs_query_prompt(&self) -> bool {
        matches!(self, PoolMode::Rand { .. } | PoolMode::Seq)
    }
}

/// One pool distribution with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    /// 1-based slot of the prompt that produced this entry.
    pub pair_index: usize,
    pub prompt: PromptSpec,
    pub distribution: CodebookDistribution,
    pub feature: Option<Vec<f64>>,
    pub patch: Option<Vec<f64>>,
}

/// Per-patch prompt pool: `per_patch[l]` holds one entry per prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    pub mode: PoolMode,
    /// Number of retrieved pairs the pool was built from.
    pub m: usize,
    per_patch: Vec<Vec<PoolEntry>>,
}

impl PromptPool {
    /// Assemble a pool from prompt slots and their score grids.
    pub fn from_grids(mode: PoolMode, m: usize, slots: Vec<(usize, ScoreGrid)>) -> Result<Self> {
        let (_, first) = slots
            .first()
            .ok_or_else(|| Error::config("pool needs at least one prompt"))?;
        let l = first.len();
        let v = first.codebook_size();
        let mut per_patch: Vec<Vec<PoolEntry>> = (0..l).map(|_| Vec::with_capacity(slots.len())).collect();
        let mut seen = std::collections::HashSet::new();
        for (pair_index, grid) in slots {
            if !seen.insert(pair_index) {
                return Err(Error::config(format!("duplicate pool slot {pair_index}")));
            }
            if grid.len() != l {
                return Err(Error::dim("pool grid patches", l, grid.len()));
            }
            if grid.codebook_size() != v {
                return Err(Error::dim("pool codebook size", v, grid.codebook_size()));
            }
            let prompt = grid
                .prompt
                .clone()
                .ok_or_else(|| Error::config("pool grid lacks prompt provenance"))?;
            let ScoreGrid {
                distributions,
                mut features,
                mut patches,
                ..
            } = grid;
            for (li, dist) in distributions.into_iter().enumerate() {
                per_patch[li].push(PoolEntry {
                    pair_index,
                    prompt: prompt.clone(),
                    distribution: dist,
                    feature: features.as_mut().map(|f| std::mem::take(&mut f[li])),
                    patch: patches.as_mut().map(|p| std::mem::take(&mut p[li])),
                });
            }
        }
        Ok(Self { mode, m, per_patch })
    }

    /// Number of patches `L`.
    pub fn patch_count(&self) -> usize {
        self.per_patch.len()
    }

    /// Entries per patch.
    pub fn width(&self) -> usize {
        self.per_patch.first().map_or(0, Vec::len)
    }

    pub fn codebook_size(&self) -> usize {
        self.per_patch[0][0].distribution.len()
    }

    pub fn patch(&self, l: usize) -> &[PoolEntry] {
        &self.per_patch[l]
    }

    pub fn patches(&self) -> &[Vec<PoolEntry>] {
        &self.per_patch
    }

    /// Add the query prompt `[x_1, y_1, x_q, r]` as slot 1, completing a
    /// `Seq` or `Rand` pool.
    pub fn with_query_prompt(mut self, query: &ScoreGrid) -> Result<Self> {
        if query.len() != self.patch_count() {
            return Err(Error::dim("query grid patches", self.patch_count(), query.len()));
        }
        if self.per_patch[0].iter().any(|e| e.pair_index == 1) {
            return Err(Error::config("pool already holds slot 1"));
        }
        let prompt = query
            .prompt
            .clone()
            .ok_or_else(|| Error::config("query grid lacks prompt provenance"))?;
        for (l, entries) in self.per_patch.iter_mut().enumerate() {
            entries.insert(
                0,
                PoolEntry {
                    pair_index: 1,
                    prompt: prompt.clone(),
                    distribution: query.distributions[l].clone(),
                    feature: query.features.as_ref().map(|f| f[l].clone()),
                    patch: query.patches.as_ref().map(|p| p[l].clone()),
                },
            );
        }
        Ok(self)
    }
}

/// Prompts the pool is built from, as `(slot, prompt)` pairs.
pub fn pool_prompts(
    retrieved: &RetrievedSet,
    query: &ItemId,
    mode: PoolMode,
    grid: GridDims,
) -> Result<Vec<(usize, PromptSpec)>> {
    let m = retrieved.len();
    if m == 0 {
        return Err(Error::config("pool needs at least one retrieved pair"));
    }
    let ids: Vec<&ItemId> = retrieved.ids().collect();
    let top = ids[0];
    Ok(match mode {
        PoolMode::Q => ids
            .iter()
            .enumerate()
            .map(|(i, id)| (i + 1, PromptSpec::new(id, query, grid)))
            .collect(),
        PoolMode::SelfAnchor => ids
            .iter()
            .enumerate()
            .map(|(i, id)| (i + 1, PromptSpec::new(id, id, grid)))
            .collect(),
        PoolMode::Seq => {
            if m < 2 {
                return Err(Error::config("sequential pool needs m >= 2"));
            }
            ids.iter()
                .enumerate()
                .skip(1)
                .map(|(i, id)| (i + 1, PromptSpec::new(top, id, grid)))
                .collect()
        }
        PoolMode::Rand { seed } => {
            if m < 2 {
                return Err(Error::config("random-anchor pool needs m >= 2"));
            }
            let seed = seed.ok_or_else(|| Error::config("random-anchor pool needs a seed"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, m, m - 1)
                .into_iter()
                .enumerate()
                .map(|(slot, anchor)| (slot + 2, PromptSpec::new(top, ids[anchor], grid)))
                .collect()
        }
    })
}

/// Build the prompt pool for `query` from its retrieved pairs.
///
/// Prompts are scored in parallel; slot order is preserved.
pub fn build_pool<B: ScorerBackend + ?Sized>(
    backend: &B,
    retrieved: &RetrievedSet,
    query: &ItemId,
    mode: PoolMode,
) -> Result<PromptPool> {
    let prompts = pool_prompts(retrieved, query, mode, backend.grid())?;
    let slots = prompts
        .into_par_iter()
        .map(|(i, p)| score_prompt(backend, &p).map(|g| (i, g)))
        .collect::<Result<Vec<_>>>()?;
    PromptPool::from_grids(mode, retrieved.len(), slots)
}

/// One entry of the union of all patch pools.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatEntry {
    pub patch: usize,
    pub entry: PoolEntry,
}

/// The union `∪_l P_l`, ordered by patch then slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatPool {
    pub patch_count: usize,
    pub mode: PoolMode,
    pub m: usize,
    pub entries: Vec<FlatEntry>,
}

impl FlatPool {
    /// Inverse of [`merge_all_patches`].
    pub fn group_by_patch(self) -> PromptPool {
        let mut per_patch: Vec<Vec<PoolEntry>> = (0..self.patch_count).map(|_| Vec::new()).collect();
        for e in self.entries {
            per_patch[e.patch].push(e.entry);
        }
        PromptPool {
            mode: self.mode,
            m: self.m,
            per_patch,
        }
    }
}

pub fn merge_all_patches(pool: &PromptPool) -> FlatPool {
    FlatPool {
        patch_count: pool.patch_count(),
        mode: pool.mode,
        m: pool.m,
        entries: pool
            .per_patch
            .iter()
            .enumerate()
            .flat_map(|(l, es)| es.iter().map(move |e| FlatEntry { patch: l, entry: e.clone() }))
            .collect(),
    }
}

/// In-memory backend keyed by prompt, mostly for tests and cached pools.
#[derive(Debug, Clone, Default)]
pub struct TableScorer {
    grid: Option<GridDims>,
    codebook_size: usize,
    table: std::collections::HashMap<PromptSpec, ScoreGrid>,
}

impl TableScorer {
    pub fn new(grid: GridDims, codebook_size: usize) -> Self {
        Self {
            grid: Some(grid),
            codebook_size,
            table: Default::default(),
        }
    }

    pub fn insert(&mut self, prompt: PromptSpec, grid: ScoreGrid) {
        self.table.insert(prompt, grid);
    }
}

impl ScorerBackend for TableScorer {
    fn grid(&self) -> GridDims {
        self.grid.expect("TableScorer constructed via new")
    }

    fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    fn score(&self, prompt: &PromptSpec) -> Result<ScoreGrid> {
        self.table
            .get(prompt)
            .cloned()
            .ok_or_else(|| Error::MissingItem(prompt.file_stem()))
    }
}

/// Directory layout helper for exporters: where [`FileScorer`] looks.
pub fn export_path(dir: &Path, prompt: &PromptSpec) -> PathBuf {
    dir.join(format!("{}.pncl", prompt.file_stem()))
}
