//! End-to-end run: retrieve → pool → score the query prompt → smooth →
//! decode → evaluate, against either the synthetic world or exported tensors.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceKind;
use crate::error::{Error, Result, StageExt};
use crate::io::{read_features, read_token_grid, write_features, write_score_grid, write_token_grid};
use crate::metrics::{decode_argmax, foreground, iou, pixel_accuracy, EvalReport, ItemScore, PredictionGrid};
use crate::pool::{build_pool, export_path, pool_prompts, score_prompt, FileScorer, PoolMode, PromptPool, PromptSpec, ScoreGrid, ScorerBackend};
use crate::retriever::{flatten_normalize, top_m, FeatureVector, RetrievalIndex, RetrievedSet};
use crate::smoothing::{smooth_grid, Aggregation, KeyKind, Scope, SmoothedGrid, SmoothingConfig};
use crate::synthbench::{generate_world, sample_queries, BiasedScorerParams, SyntheticScorer, SyntheticWorld, WorldSpec, RNG_CONTRACT};
use crate::types::{GridDims, ItemId};

pub const PIPELINE_SCHEMA_VERSION: u32 = 1;

/// Smoothing parameters as written in a config file. `k` defaults to `min(5, m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingParams {
    pub k: Option<usize>,
    pub alpha: f64,
    pub tau: f64,
    pub divergence: DivergenceKind,
    pub key: KeyKind,
    pub aggregation: Aggregation,
    pub scope: Scope,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        let d = SmoothingConfig::defaults(1);
        Self {
            k: None,
            alpha: d.alpha,
            tau: d.tau,
            divergence: d.divergence,
            key: d.key,
            aggregation: d.aggregation,
            scope: d.scope,
        }
    }
}

impl SmoothingParams {
    pub fn resolve(&self, m: usize) -> SmoothingConfig {
        let d = SmoothingConfig::defaults(m);
        SmoothingConfig {
            k: self.k.unwrap_or(d.k),
            alpha: self.alpha,
            tau: self.tau,
            divergence: self.divergence,
            key: self.key,
            aggregation: self.aggregation,
            scope: self.scope,
            ..d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Synthetic {
        #[serde(default)]
        world: WorldSpec,
        #[serde(default = "BiasedScorerParams::moderate")]
        bias: BiasedScorerParams,
    },
    /// Score tensors exported from a real model, named by
    /// [`crate::pool::export_path`].
    File {
        grid: GridDims,
        codebook_size: usize,
        scores_dir: PathBuf,
        support_features: PathBuf,
        query_features: PathBuf,
        /// Directory of `<query>.pncl` u32 ground-truth token grids.
        #[serde(default)]
        gt_dir: Option<PathBuf>,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Synthetic {
            world: WorldSpec::default(),
            bias: BiasedScorerParams::moderate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backend: BackendConfig,
    pub m: usize,
    pub pool: PoolMode,
    pub smoothing: SmoothingParams,
    /// Seeds query sampling on the synthetic backend.
    pub seed: u64,
    /// Synthetic backend only; 0 means every query.
    pub n_queries: usize,
    /// Where predicted token grids are written, if anywhere.
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            m: 4,
            pool: PoolMode::Q,
            smoothing: SmoothingParams::default(),
            seed: 0,
            n_queries: 0,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_json(&text)
    }

    pub fn smoothing_config(&self) -> SmoothingConfig {
        self.smoothing.resolve(self.m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("m must be >= 1"));
        }
        if self.pool.needs_query_prompt() && self.m < 2 {
            return Err(Error::config("seq and rand pools need m >= 2"));
        }
        if let PoolMode::Rand { seed: None } = self.pool {
            return Err(Error::config("rand pool needs a seed"));
        }
        if let BackendConfig::File { grid, .. } = &self.backend {
            GridDims::new(grid.rows, grid.cols)?;
        }
        self.smoothing_config().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub id: ItemId,
    pub retrieved: Vec<ItemId>,
    pub baseline_tokens: Vec<u32>,
    pub smoothed_tokens: Vec<u32>,
    /// Patches where smoothing changed the decoded token.
    pub changed_patches: usize,
}

/// Metrics for one arm of the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub metrics: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub rng: String,
    /// The effective configuration, after defaults and overrides.
    pub config: PipelineConfig,
    pub smoothing: SmoothingConfig,
    /// The single-pair prediction (top retrieved pair, query anchor), then
    /// the smoothed one.
    pub arms: Vec<ArmReport>,
    pub items: Vec<ItemRow>,
}

impl PipelineReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == name)
    }

    pub fn mean(&self, arm: &str, metric: &str) -> Option<f64> {
        self.arm(arm)?.metrics.iter().find(|m| m.metric == metric).map(|m| m.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Wall time and resident memory after one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stage: String,
    pub seconds: f64,
    /// Peak resident set size in KiB, where the platform reports it.
    pub peak_rss_kib: Option<u64>,
}

/// Peak RSS of this process from `/proc/self/status`.
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

enum Source {
    Synthetic(SyntheticWorld, BiasedScorerParams),
    File {
        scorer: FileScorer,
        support: Vec<FeatureVector>,
        queries: Vec<FeatureVector>,
        gt_dir: Option<PathBuf>,
    },
}

struct Prepared<'a> {
    backend: Box<dyn ScorerBackend + 'a>,
    grid: GridDims,
    index: RetrievalIndex,
    queries: Vec<FeatureVector>,
    truth: Vec<Option<Vec<u32>>>,
}

fn load_source(config: &PipelineConfig) -> Result<Source> {
    match &config.backend {
        BackendConfig::Synthetic { world, bias } => Ok(Source::Synthetic(generate_world(*world)?, *bias)),
        BackendConfig::File {
            grid,
            codebook_size,
            scores_dir,
            support_features,
            query_features,
            gt_dir,
        } => {
            let norm = |maps: Vec<crate::retriever::FeatureMap>| -> Result<Vec<FeatureVector>> {
                maps.iter().map(flatten_normalize).collect()
            };
            Ok(Source::File {
                scorer: FileScorer::new(scores_dir, *grid, *codebook_size),
                support: norm(read_features(support_features)?)?,
                queries: norm(read_features(query_features)?)?,
                gt_dir: gt_dir.clone(),
            })
        }
    }
}

fn prepare<'a>(config: &PipelineConfig, source: &'a Source) -> Result<Prepared<'a>> {
    match source {
        Source::Synthetic(world, bias) => {
            let ids = sample_queries(world, config.n_queries, config.seed);
            let queries = ids
                .iter()
                .map(|id| flatten_normalize(&world.item(id)?.feature))
                .collect::<Result<Vec<_>>>()?;
            let truth = ids
                .iter()
                .map(|id| world.item(id).map(|it| Some(it.output.clone())))
                .collect::<Result<Vec<_>>>()?;
            Ok(Prepared {
                backend: Box::new(SyntheticScorer::new(world, *bias)?),
                grid: world.grid,
                index: world.support_index()?,
                queries,
                truth,
            })
        }
        Source::File {
            scorer,
            support,
            queries,
            gt_dir,
        } => {
            let truth = queries
                .iter()
                .map(|q| {
                    let Some(dir) = gt_dir else { return Ok(None) };
                    let path = dir.join(format!("{}.pncl", q.id));
                    if !path.exists() {
                        return Ok(None);
                    }
                    let g = read_token_grid(&path)?;
                    if g.grid != scorer.grid() {
                        return Err(Error::dim("ground-truth patches", scorer.grid().len(), g.grid.len()));
                    }
                    Ok(Some(g.tokens))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Prepared {
                backend: Box::new(scorer.clone()),
                grid: scorer.grid(),
                index: RetrievalIndex::from_vectors(support.iter().cloned())?,
                queries: queries.clone(),
                truth,
            })
        }
    }
}

/// Write a synthetic world in the layout a real-model exporter would produce:
/// support and query feature files, one score tensor (with key companions)
/// per prompt the pools of every query need, and ground-truth token grids.
/// Returns the matching file backend.
pub fn export_synthetic(
    world: &SyntheticWorld,
    params: &BiasedScorerParams,
    m: usize,
    pool: PoolMode,
    dir: &std::path::Path,
) -> Result<BackendConfig> {
    let scores_dir = dir.join("scores");
    let gt_dir = dir.join("gt");
    std::fs::create_dir_all(&scores_dir)?;
    std::fs::create_dir_all(&gt_dir)?;
    let maps = |ids: &[ItemId]| -> Result<Vec<crate::retriever::FeatureMap>> {
        ids.iter().map(|id| world.item(id).map(|it| it.feature.clone())).collect()
    };
    let support_features = dir.join("support.pncl");
    let query_features = dir.join("queries.pncl");
    write_features(&support_features, &maps(&world.support)?)?;
    write_features(&query_features, &maps(&world.queries)?)?;

    let scorer = SyntheticScorer::new(world, *params)?;
    let index = world.support_index()?;
    for q in &world.queries {
        let item = world.item(q)?;
        let r = top_m(&flatten_normalize(&item.feature)?, &index, m)?;
        let mut prompts: Vec<PromptSpec> = pool_prompts(&r, q, pool, world.grid)?.into_iter().map(|(_, p)| p).collect();
        prompts.push(PromptSpec::new(&r.items[0].id, q, world.grid));
        for p in prompts {
            let g = score_prompt(&scorer, &p)?;
            write_score_grid(export_path(&scores_dir, &p), world.grid, &g)?;
        }
        let gt = PredictionGrid { grid: world.grid, tokens: item.output.clone() };
        write_token_grid(gt_dir.join(format!("{q}.pncl")), Some(q), &gt)?;
    }
    Ok(BackendConfig::File {
        grid: world.grid,
        codebook_size: world.codebook.size(),
        scores_dir,
        support_features,
        query_features,
        gt_dir: Some(gt_dir),
    })
}

fn timed<T>(profile: &mut Vec<StageProfile>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    profile.push(StageProfile {
        stage: stage.into(),
        seconds: Duration::as_secs_f64(&start.elapsed()),
        peak_rss_kib: peak_rss_kib(),
    });
    Ok(out)
}

/// Query prompt `[x_1, y_1, x_q]` scored on its own.
fn query_grid(backend: &dyn ScorerBackend, r: &RetrievedSet, grid: GridDims) -> Result<ScoreGrid> {
    let top = &r
        .items
        .first()
        .ok_or_else(|| Error::config("retrieval returned no pairs"))?
        .id;
    score_prompt(backend, &PromptSpec::new(top, &r.query, grid))
}

fn item_metrics(
    arm: &str,
    rows: &[ItemRow],
    truth: &[Option<Vec<u32>>],
    pick: impl Fn(&ItemRow) -> &[u32],
) -> Result<ArmReport> {
    let mut acc = Vec::new();
    let mut ious = Vec::new();
    for (row, gt) in rows.iter().zip(truth) {
        let Some(gt) = gt else { continue };
        let pred = pick(row);
        acc.push(ItemScore {
            id: row.id.clone(),
            group: None,
            value: pixel_accuracy(pred, gt)?,
        });
        ious.push(ItemScore {
            id: row.id.clone(),
            group: None,
            value: iou(&foreground(pred), &foreground(gt))?,
        });
    }
    let metrics = if acc.is_empty() {
        Vec::new()
    } else {
        vec![EvalReport::new("pixel_accuracy", acc)?, EvalReport::new("miou", ious)?]
    };
    Ok(ArmReport { arm: arm.into(), metrics })
}

/// Run the pipeline and return the report with per-stage timings.
pub fn run_with_profile(config: &PipelineConfig) -> Result<(PipelineReport, Vec<StageProfile>)> {
    config.validate().stage("config")?;
    let smoothing = config.smoothing_config();
    let mut profile = Vec::new();

    let source = timed(&mut profile, "load", || load_source(config)).stage("load")?;
    let prep = prepare(config, &source).stage("load")?;
    let backend = prep.backend.as_ref();
    let grid = prep.grid;

    let retrieved: Vec<RetrievedSet> = timed(&mut profile, "retrieve", || {
        prep.queries.par_iter().map(|q| top_m(q, &prep.index, config.m)).collect()
    })
    .stage("retrieve")?;

    let pools: Vec<PromptPool> = timed(&mut profile, "pool", || {
        retrieved
            .par_iter()
            .map(|r| build_pool(backend, r, &r.query, config.pool))
            .collect()
    })
    .stage("pool")?;

    let query_grids: Vec<ScoreGrid> = timed(&mut profile, "score", || {
        retrieved.par_iter().map(|r| query_grid(backend, r, grid)).collect()
    })
    .stage("score")?;

    let smoothed: Vec<SmoothedGrid> = timed(&mut profile, "smooth", || {
        pools
            .into_par_iter()
            .zip(query_grids.par_iter())
            .map(|(pool, q)| {
                let pool = if config.pool.needs_query_prompt() { pool.with_query_prompt(q)? } else { pool };
                smooth_grid(q, &pool, &smoothing)
            })
            .collect()
    })
    .stage("smooth")?;

    let rows: Vec<ItemRow> = timed(&mut profile, "decode", || {
        retrieved
            .par_iter()
            .zip(query_grids.par_iter().zip(smoothed.par_iter()))
            .map(|(r, (q, s))| {
                let base = decode_argmax(grid, &q.distributions)?;
                let sm = decode_argmax(grid, &s.distributions)?;
                if let Some(dir) = &config.output_dir {
                    std::fs::create_dir_all(dir)?;
                    write_token_grid(dir.join(format!("{}.baseline.pncl", r.query)), Some(&r.query), &base)?;
                    write_token_grid(dir.join(format!("{}.smoothed.pncl", r.query)), Some(&r.query), &sm)?;
                }
                let changed = base.tokens.iter().zip(&sm.tokens).filter(|(a, b)| a != b).count();
                Ok(ItemRow {
                    id: r.query.clone(),
                    retrieved: r.ids().cloned().collect(),
                    baseline_tokens: base.tokens,
                    smoothed_tokens: sm.tokens,
                    changed_patches: changed,
                })
            })
            .collect()
    })
    .stage("decode")?;

    let arms = timed(&mut profile, "eval", || {
        Ok(vec![
            item_metrics("baseline", &rows, &prep.truth, |r| &r.baseline_tokens)?,
            item_metrics("smoothed", &rows, &prep.truth, |r| &r.smoothed_tokens)?,
        ])
    })
    .stage("eval")?;

    let report = PipelineReport {
        schema_version: PIPELINE_SCHEMA_VERSION,
        rng: RNG_CONTRACT.into(),
        config: config.clone(),
        smoothing,
        arms,
        items: rows,
    };
    Ok((report, profile))
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport> {
    run_with_profile(config).map(|(r, _)| r)
}
