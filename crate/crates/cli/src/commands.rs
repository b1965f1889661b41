use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use patchpool_core::io::{
    read_features, read_json, read_pool, read_score_grid, read_token_grid, write_json, write_pool,
    write_retrieved, write_score_grid, write_token_grid,
};
use patchpool_core::metrics::{foreground, Decoder, ItemScore, TokenDecoder};
use patchpool_core::pipeline::{run_with_profile, BackendConfig, StageProfile};
use patchpool_core::pool::{build_pool, FileScorer, PromptSpec};
use patchpool_core::synthbench::{fixed_seeds, run_bias_sweep, BiasedScorerParams};
use patchpool_core::tensor_file::write_atomic;
use patchpool_core::{
    decode_argmax, flatten_normalize, iou, mse, pixel_accuracy, recall_at_k, run_pipeline, smooth_grid, top_m,
    Error, EvalReport, GridDims, ItemId, PipelineConfig, PoolMode, RetrievalIndex, RetrievedSet,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::{
    BenchArgs, DecodeArgs, EvalArgs, PoolArgs, RetrieveArgs, RunArgs, SmoothArgs, SmoothingFlags, SynthArgs,
};

const CLI_SCHEMA_VERSION: u32 = 1;

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

/// Parse a lowercase enum name through its serde representation.
fn parse_name<T: DeserializeOwned>(what: &str, name: &str) -> Result<T> {
    serde_json::from_value(json!(name)).map_err(|_| config_error(format!("unknown {what} `{name}`")))
}

fn apply_smoothing(config: &mut PipelineConfig, flags: &SmoothingFlags) -> Result<()> {
    let s = &mut config.smoothing;
    if flags.k.is_some() {
        s.k = flags.k;
    }
    if let Some(a) = flags.alpha {
        s.alpha = a;
    }
    if let Some(t) = flags.tau {
        s.tau = t;
    }
    if let Some(d) = &flags.divergence {
        s.divergence = parse_name("divergence", d)?;
    }
    if let Some(k) = &flags.key {
        s.key = parse_name("key", k)?;
    }
    if let Some(a) = &flags.aggregation {
        s.aggregation = parse_name("aggregation", a)?;
    }
    if let Some(sc) = &flags.scope {
        s.scope = parse_name("scope", sc)?;
    }
    config.validate()?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(what: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| config_error(format!("bad {what} value `{p}`"))))
        .collect()
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_json(p, value)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn file_backend(config: &PipelineConfig) -> Option<(&GridDims, usize, &PathBuf, &PathBuf, &PathBuf)> {
    match &config.backend {
        BackendConfig::File {
            grid,
            codebook_size,
            scores_dir,
            support_features,
            query_features,
            ..
        } => Some((grid, *codebook_size, scores_dir, support_features, query_features)),
        BackendConfig::Synthetic { .. } => None,
    }
}

pub fn retrieve(args: RetrieveArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let from_config = file_backend(&config);
    let support = args
        .support
        .or_else(|| from_config.map(|f| f.3.clone()))
        .ok_or_else(|| config_error("--support is required without a file-backend config"))?;
    let queries = args
        .queries
        .or_else(|| from_config.map(|f| f.4.clone()))
        .ok_or_else(|| config_error("--queries is required without a file-backend config"))?;
    let m = args.m.unwrap_or(config.m);

    let support = read_features(&support)?;
    let index = RetrievalIndex::from_maps(&support)?;
    let sets = read_features(&queries)?
        .iter()
        .map(|q| top_m(&flatten_normalize(q)?, &index, m))
        .collect::<patchpool_core::Result<Vec<RetrievedSet>>>()?;

    if let Some(rel) = &args.relevant {
        let relevant: HashMap<ItemId, HashSet<ItemId>> = read_json(rel)?;
        let recall = recall_at_k(&sets, &relevant, args.recall_k)?;
        eprintln!("recall@{} = {recall:.6}", args.recall_k);
    }
    match &args.out {
        Some(p) => write_retrieved(p, &sets)?,
        None => println!("{}", serde_json::to_string_pretty(&sets)?),
    }
    Ok(())
}

pub fn pool(args: PoolArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let from_config = file_backend(&config);
    let rows = args.rows.or(from_config.map(|f| f.0.rows));
    let cols = args.cols.or(from_config.map(|f| f.0.cols));
    let (Some(rows), Some(cols)) = (rows, cols) else {
        return Err(config_error("--rows and --cols are required without a file-backend config"));
    };
    let grid = GridDims::new(rows, cols)?;
    let codebook = args
        .codebook
        .or(from_config.map(|f| f.1))
        .ok_or_else(|| config_error("--codebook is required without a file-backend config"))?;
    let scores_dir = args
        .scores_dir
        .or_else(|| from_config.map(|f| f.2.clone()))
        .ok_or_else(|| config_error("--scores-dir is required without a file-backend config"))?;
    let mode = match args.mode.as_deref() {
        None => config.pool,
        Some("q") => PoolMode::Q,
        Some("seq") => PoolMode::Seq,
        Some("self") => PoolMode::SelfAnchor,
        Some("rand") => PoolMode::Rand { seed: args.seed.or(Some(config.seed)) },
        Some(other) => return Err(config_error(format!("unknown pool mode `{other}`"))),
    };

    let scorer = FileScorer::new(scores_dir, grid, codebook);
    let sets: Vec<RetrievedSet> = read_json(&args.retrieved)?;
    std::fs::create_dir_all(&args.out_dir)?;
    for r in &sets {
        let pool = build_pool(&scorer, r, &r.query, mode).with_context(|| format!("pool for {}", r.query))?;
        write_pool(args.out_dir.join(format!("{}.pool.pncl", r.query)), grid, &pool)?;
        let top = &r.items[0].id;
        let query = patchpool_core::pool::score_prompt(&scorer, &PromptSpec::new(top, &r.query, grid))?;
        write_score_grid(args.out_dir.join(format!("{}.query.pncl", r.query)), grid, &query)?;
    }
    eprintln!("wrote {} pools to {}", sets.len(), args.out_dir.display());
    Ok(())
}

pub fn smooth(args: SmoothArgs) -> Result<()> {
    let (grid, pool) = read_pool(&args.pool)?;
    let (qgrid, query) = read_score_grid(&args.query)?;
    if qgrid != grid {
        return Err(Error::Dimension {
            context: "query grid patches",
            expected: grid.len(),
            actual: qgrid.len(),
        }
        .into());
    }
    let mut config = load_config(args.config.as_deref())?;
    config.m = pool.m;
    apply_smoothing(&mut config, &args.smoothing)?;
    let pool = if pool.mode.needs_query_prompt() { pool.with_query_prompt(&query)? } else { pool };
    let smoothed = smooth_grid(&query, &pool, &config.smoothing_config())?;
    let mut out = patchpool_core::ScoreGrid::new(smoothed.distributions.clone())?;
    out.prompt = query.prompt.clone();
    write_score_grid(&args.out, grid, &out)?;
    if let Some(p) = &args.diagnostics {
        write_json(p, &json!({ "smoothing": config.smoothing_config(), "patches": smoothed.diagnostics }))?;
    }
    Ok(())
}

pub fn decode(args: DecodeArgs) -> Result<()> {
    let _ = load_config(args.config.as_deref())?;
    let (grid, scores) = read_score_grid(&args.scores)?;
    let pred = decode_argmax(grid, &scores.distributions)?;
    let id = scores.prompt.as_ref().map(|p| p.anchor.clone());
    write_token_grid(&args.out, id.as_ref(), &pred)?;
    Ok(())
}

fn pairs_for_eval(pred: &Path, gt: &Path, suffix: &str) -> Result<Vec<(ItemId, PathBuf, PathBuf)>> {
    if !pred.is_dir() {
        let id = pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let gt_path = if gt.is_dir() { gt.join(format!("{id}.pncl")) } else { gt.to_path_buf() };
        return Ok(vec![(id.into(), pred.to_path_buf(), gt_path)]);
    }
    if !gt.is_dir() {
        return Err(config_error("--gt must be a directory when --pred is"));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(pred)? {
        let path = entry?.path();
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(id) = name.strip_suffix(suffix) {
            let gt_path = gt.join(format!("{id}.pncl"));
            if gt_path.exists() {
                out.push((ItemId::new(id), path, gt_path));
            }
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(config_error(format!("no predictions ending in `{suffix}` have ground truth")));
    }
    Ok(out)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let items = pairs_for_eval(&args.pred, &args.gt, &args.pred_suffix)?
        .into_iter()
        .map(|(id, p, g)| {
            let pred = read_token_grid(&p)?;
            let gt = read_token_grid(&g)?;
            let value = match args.metric.as_str() {
                "accuracy" => pixel_accuracy(&pred.tokens, &gt.tokens)?,
                "miou" => iou(&foreground(&pred.tokens), &foreground(&gt.tokens))?,
                "mse" => mse(&TokenDecoder.decode(&pred), &TokenDecoder.decode(&gt))?,
                other => return Err(config_error(format!("unknown metric `{other}`"))),
            };
            Ok(ItemScore { id, group: None, value })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::new(args.metric.clone(), items)?;
    eprintln!("{} = {:.6} over {} items", report.metric, report.mean, report.items.len());
    emit(
        &json!({ "schema_version": CLI_SCHEMA_VERSION, "config": config, "report": report }),
        args.out.as_deref(),
    )
}

pub fn synth_run(args: SynthArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    apply_smoothing(&mut config, &args.smoothing)?;
    let BackendConfig::Synthetic { mut world, mut bias } = config.backend.clone() else {
        return Err(config_error("synth-run needs a synthetic backend"));
    };
    if let Some(s) = args.seed {
        world.seed = s;
    }
    if let Some(r) = args.rows {
        world.rows = r;
    }
    if let Some(c) = args.cols {
        world.cols = c;
    }
    if let Some(v) = args.codebook {
        world.codebook_size = v;
    }
    if let Some(n) = args.items {
        world.n_items = n;
    }
    if let Some(b) = &args.bias {
        let v: Vec<f64> = parse_list("bias", b)?;
        let [bt, bp, eps] = v[..] else {
            return Err(config_error("--bias takes three comma-separated weights"));
        };
        bias = BiasedScorerParams { similarity_coupling: bias.similarity_coupling, ..BiasedScorerParams::new(bt, bp, eps) };
    }
    let ms: Vec<usize> = match &args.m {
        Some(list) => parse_list("m", list)?,
        None => vec![config.m],
    };
    let configs = ms
        .iter()
        .map(|&m| {
            let c = config.smoothing.resolve(m);
            c.validate().map(|_| c)
        })
        .collect::<patchpool_core::Result<Vec<_>>>()?;
    let seeds = if args.fixed_seeds { fixed_seeds() } else { vec![world.seed] };
    let n_queries = args.queries.unwrap_or(if config.n_queries == 0 { usize::MAX } else { config.n_queries });
    let report = run_bias_sweep(world, &bias, &configs, n_queries, &seeds)?;

    let mut table = String::from("m\tk\talpha\ttau\tsmoothed\tbaseline\tmargin\n");
    for row in &report.configs {
        let c = &row.config;
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:+.6}",
            c.m, c.k, c.alpha, c.tau, row.mean_accuracy, row.mean_baseline_accuracy, row.margin
        );
    }
    eprint!("{table}");
    emit(&report, args.report.as_deref())
}

#[derive(Serialize)]
struct BenchRow {
    m: usize,
    stages: Vec<StageProfile>,
    total_seconds: f64,
    peak_rss_kib: Option<u64>,
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let base = load_config(args.config.as_deref())?;
    let ms: Vec<usize> = parse_list("m", &args.m)?;
    let mut rows = Vec::new();
    for m in ms {
        let config = PipelineConfig { m, ..base.clone() };
        let mut best: Option<BenchRow> = None;
        for _ in 0..args.repeat.max(1) {
            let (_, stages) = run_with_profile(&config)?;
            let total: f64 = stages.iter().map(|s| s.seconds).sum();
            if best.as_ref().is_none_or(|b| total < b.total_seconds) {
                let peak = stages.iter().filter_map(|s| s.peak_rss_kib).max();
                best = Some(BenchRow { m, stages, total_seconds: total, peak_rss_kib: peak });
            }
        }
        let row = best.expect("at least one repetition");
        eprintln!("m={:<3} total {:.4}s peak rss {:?} KiB", row.m, row.total_seconds, row.peak_rss_kib);
        rows.push(row);
    }
    if let Some(p) = &args.csv {
        let mut csv = String::from("m,stage,seconds,peak_rss_kib\n");
        for r in &rows {
            for s in &r.stages {
                let rss = s.peak_rss_kib.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(csv, "{},{},{:.9},{}", r.m, s.stage, s.seconds, rss);
            }
        }
        write_atomic(p, csv.as_bytes())?;
    }
    emit(
        &json!({ "schema_version": CLI_SCHEMA_VERSION, "config": base, "rows": rows }),
        args.out.as_deref(),
    )
}

pub fn run(args: RunArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(m) = args.m {
        config.m = m;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(d) = args.output_dir {
        config.output_dir = Some(d);
    }
    apply_smoothing(&mut config, &args.smoothing)?;
    let report = run_pipeline(&config)?;
    for arm in &report.arms {
        for m in &arm.metrics {
            eprintln!("{:<9} {:<15} {:.6}", arm.arm, m.metric, m.mean);
        }
    }
    let text = report.to_json()?;
    match &args.report {
        Some(p) => write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
