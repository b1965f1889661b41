//! Reading and writing pipeline artifacts as PNCL tensors.
//!
//! | artifact     | dtype | shape                    | sidecar                              |
//! |--------------|-------|--------------------------|--------------------------------------|
//! | features     | f32   | (n, dim) or (n, C, H, W) | `{"ids": [...], "flatten_order"}`    |
//! | score grid   | f32   | (L, V)                   | `{"grid", "prompt"?}`                |
//! | prompt pool  | f32   | (m', L, V)               | `{"grid", "mode", "m", "slots"}`     |
//! | pool keys    | f32   | (m', L, D)               | none; `<pool>.feature.pncl` / `.patch.pncl` |
//! | token grid   | u32   | (rows, cols)             | optional `{"id"}`                    |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::divergence::CodebookDistribution;
use crate::error::{Error, Result};
use crate::metrics::PredictionGrid;
use crate::pool::{PoolMode, PromptPool, PromptSpec, ScoreGrid};
use crate::retriever::{FeatureMap, RetrievedSet, FLATTEN_ORDER};
use crate::tensor_file::{read_tensor, write_atomic, write_tensor, TensorFile};
use crate::types::{GridDims, ItemId};

fn f32_payload<'a>(t: &'a TensorFile, path: &Path) -> Result<&'a [f32]> {
    t.as_f32()
        .ok_or_else(|| Error::config(format!("{}: expected an f32 tensor", path.display())))
}

fn sidecar_field<T: for<'de> Deserialize<'de>>(t: &TensorFile, key: &str, path: &Path) -> Result<T> {
    let v = t
        .sidecar
        .as_ref()
        .and_then(|s| s.get(key))
        .ok_or_else(|| Error::config(format!("{}: sidecar lacks `{key}`", path.display())))?;
    Ok(serde_json::from_value(v.clone())?)
}

fn to_f32(values: impl IntoIterator<Item = f64>) -> Vec<f32> {
    values.into_iter().map(|x| x as f32).collect()
}

fn rows_to_dists(data: &[f32], v: usize) -> Result<Vec<CodebookDistribution>> {
    data.chunks(v)
        .map(|row| CodebookDistribution::from_weights(row.iter().map(|&x| f64::from(x)).collect()))
        .collect()
}

/// Sibling path `<stem>.<kind>.pncl` for a tensor at `<stem>.pncl`.
pub fn companion_path(path: &Path, kind: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{kind}.pncl"))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureMap>> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    let dims = t.dims().to_vec();
    let (c, h, w) = match dims.as_slice() {
        [_, d] => (1, 1, *d),
        [_, c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::config(format!(
                "{}: feature tensor must have rank 2 or 4, got {}",
                path.display(),
                dims.len()
            )))
        }
    };
    let ids: Vec<ItemId> = sidecar_field(&t, "ids", path)?;
    if ids.len() != dims[0] {
        return Err(Error::dim("feature ids", dims[0], ids.len()));
    }
    if let Some(order) = t.sidecar.as_ref().and_then(|s| s.get("flatten_order")).and_then(Value::as_str) {
        if order != FLATTEN_ORDER {
            return Err(Error::config(format!("unsupported flatten order `{order}`")));
        }
    }
    let data = f32_payload(&t, path)?;
    let per = c * h * w;
    ids.into_iter()
        .zip(data.chunks(per.max(1)))
        .map(|(id, row)| FeatureMap::new(id, (c, h, w), row.iter().map(|&x| f64::from(x)).collect()))
        .collect()
}

/// Write maps of one shape as `(n, C, H, W)`.
pub fn write_features(path: impl AsRef<Path>, maps: &[FeatureMap]) -> Result<()> {
    let first = maps.first().ok_or_else(|| Error::config("no feature maps to write"))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(maps.len() * c * h * w);
    for m in maps {
        if m.shape() != (c, h, w) {
            return Err(Error::dim("feature map size", c * h * w, m.values().len()));
        }
        data.extend(m.values().iter().map(|&x| x as f32));
    }
    let ids: Vec<&ItemId> = maps.iter().map(|m| &m.id).collect();
    let t = TensorFile::f32(vec![maps.len(), c, h, w], data)?
        .with_sidecar(json!({ "ids": ids, "flatten_order": FLATTEN_ORDER }));
    write_tensor(&t, path)
}

pub fn write_score_grid(path: impl AsRef<Path>, grid: GridDims, scores: &ScoreGrid) -> Result<()> {
    if scores.len() != grid.len() {
        return Err(Error::dim("score grid patches", grid.len(), scores.len()));
    }
    let v = scores.codebook_size();
    let data = to_f32(scores.distributions.iter().flat_map(|d| d.as_slice().iter().copied()));
    let t = TensorFile::f32(vec![grid.len(), v], data)?
        .with_sidecar(json!({ "grid": grid, "prompt": scores.prompt }));
    write_tensor(&t, path.as_ref())?;
    for (kind, keys) in [("feature", &scores.features), ("patch", &scores.patches)] {
        if let Some(keys) = keys {
            let d = keys.first().map_or(0, Vec::len);
            let t = TensorFile::f32(vec![keys.len(), d], to_f32(keys.iter().flatten().copied()))?;
            write_tensor(&t, companion_path(path.as_ref(), kind))?;
        }
    }
    Ok(())
}

fn read_keys(path: &Path, lead: &[usize]) -> Result<Option<Vec<Vec<f64>>>> {
    if !path.exists() {
        return Ok(None);
    }
    let t = read_tensor(path)?;
    let mut shape: Vec<Option<usize>> = lead.iter().copied().map(Some).collect();
    shape.push(None);
    t.expect_shape("key tensor", &shape)?;
    let d = *t.dims().last().expect("rank checked");
    Ok(Some(
        f32_payload(&t, path)?
            .chunks(d.max(1))
            .map(|r| r.iter().map(|&x| f64::from(x)).collect())
            .collect(),
    ))
}

/// Read an `(L, V)` score grid; the result is renormalized in f64.
pub fn read_score_grid(path: impl AsRef<Path>) -> Result<(GridDims, ScoreGrid)> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    let grid: GridDims = sidecar_field(&t, "grid", path)?;
    t.expect_shape("score grid", &[Some(grid.len()), None])?;
    let v = t.dims()[1];
    let mut scores = ScoreGrid::new(rows_to_dists(f32_payload(&t, path)?, v)?)?;
    scores.prompt = t
        .sidecar
        .as_ref()
        .and_then(|s| s.get("prompt"))
        .filter(|p| !p.is_null())
        .map(|p| serde_json::from_value(p.clone()))
        .transpose()?;
    if let Some(f) = read_keys(&companion_path(path, "feature"), &[grid.len()])? {
        scores = scores.with_features(f)?;
    }
    if let Some(p) = read_keys(&companion_path(path, "patch"), &[grid.len()])? {
        scores = scores.with_patches(p)?;
    }
    Ok((grid, scores))
}

#[derive(Serialize, Deserialize)]
struct SlotMeta {
    pair_index: usize,
    prompt: PromptSpec,
}

/// Write a pool as `(m', L, V)` where `m'` is the pool width, with key
/// companions when every entry carries keys.
pub fn write_pool(path: impl AsRef<Path>, grid: GridDims, pool: &PromptPool) -> Result<()> {
    let path = path.as_ref();
    if pool.patch_count() != grid.len() {
        return Err(Error::dim("pool patches", grid.len(), pool.patch_count()));
    }
    let width = pool.width();
    let v = pool.codebook_size();
    let mut data = Vec::with_capacity(width * grid.len() * v);
    for slot in 0..width {
        for l in 0..grid.len() {
            data.extend(pool.patch(l)[slot].distribution.as_slice().iter().map(|&x| x as f32));
        }
    }
    let slots: Vec<SlotMeta> = pool
        .patch(0)
        .iter()
        .map(|e| SlotMeta { pair_index: e.pair_index, prompt: e.prompt.clone() })
        .collect();
    let t = TensorFile::f32(vec![width, grid.len(), v], data)?
        .with_sidecar(json!({ "grid": grid, "mode": pool.mode, "m": pool.m, "slots": slots }));
    write_tensor(&t, path)?;

    type KeyOf = fn(&crate::pool::PoolEntry) -> Option<&Vec<f64>>;
    let key_sets: [(&str, KeyOf); 2] = [("feature", |e| e.feature.as_ref()), ("patch", |e| e.patch.as_ref())];
    for (kind, get) in key_sets {
        let mut rows = Vec::new();
        let complete = (0..width).all(|slot| {
            (0..grid.len()).all(|l| match get(&pool.patch(l)[slot]) {
                Some(k) => {
                    rows.push(k.clone());
                    true
                }
                None => false,
            })
        });
        if complete && !rows.is_empty() {
            let d = rows[0].len();
            let t = TensorFile::f32(vec![width, grid.len(), d], to_f32(rows.into_iter().flatten()))?;
            write_tensor(&t, companion_path(path, kind))?;
        }
    }
    Ok(())
}

pub fn read_pool(path: impl AsRef<Path>) -> Result<(GridDims, PromptPool)> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    let grid: GridDims = sidecar_field(&t, "grid", path)?;
    let mode: PoolMode = sidecar_field(&t, "mode", path)?;
    let m: usize = sidecar_field(&t, "m", path)?;
    let slots: Vec<SlotMeta> = sidecar_field(&t, "slots", path)?;
    t.expect_shape("prompt pool", &[Some(slots.len()), Some(grid.len()), None])?;
    let v = t.dims()[2];
    let dists = rows_to_dists(f32_payload(&t, path)?, v)?;
    let features = read_keys(&companion_path(path, "feature"), &[slots.len(), grid.len()])?;
    let patches = read_keys(&companion_path(path, "patch"), &[slots.len(), grid.len()])?;
    let l = grid.len();
    let grids = slots
        .into_iter()
        .enumerate()
        .map(|(i, meta)| {
            let mut g = ScoreGrid::new(dists[i * l..(i + 1) * l].to_vec())?;
            if let Some(f) = &features {
                g = g.with_features(f[i * l..(i + 1) * l].to_vec())?;
            }
            if let Some(p) = &patches {
                g = g.with_patches(p[i * l..(i + 1) * l].to_vec())?;
            }
            g.prompt = Some(meta.prompt);
            Ok((meta.pair_index, g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, PromptPool::from_grids(mode, m, grids)?))
}

pub fn write_token_grid(path: impl AsRef<Path>, id: Option<&ItemId>, prediction: &PredictionGrid) -> Result<()> {
    let mut t = TensorFile::u32(vec![prediction.grid.rows, prediction.grid.cols], prediction.tokens.clone())?;
    if let Some(id) = id {
        t = t.with_sidecar(json!({ "id": id }));
    }
    write_tensor(&t, path)
}

pub fn read_token_grid(path: impl AsRef<Path>) -> Result<PredictionGrid> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    t.expect_shape("token grid", &[None, None])?;
    let grid = GridDims::new(t.dims()[0], t.dims()[1])?;
    let tokens = t
        .as_u32()
        .ok_or_else(|| Error::config(format!("{}: expected a u32 tensor", path.display())))?
        .to_vec();
    Ok(PredictionGrid { grid, tokens })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let bytes = std::fs::read(path.as_ref())?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_retrieved(path: impl AsRef<Path>, sets: &[RetrievedSet]) -> Result<()> {
    write_json(path, &sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::{build_pool, TableScorer};
    use crate::retriever::Retrieved;

    fn grid() -> GridDims {
        GridDims::new(1, 2).unwrap()
    }

    fn sg(rows: &[[f64; 3]; 2], prompt: PromptSpec) -> ScoreGrid {
        let mut g = ScoreGrid::new(rows.iter().map(|r| CodebookDistribution::new(r.to_vec()).unwrap()).collect())
            .unwrap()
            .with_features(vec![vec![1.0, 2.0], vec![3.0, 4.0]])
            .unwrap();
        g.prompt = Some(prompt);
        g
    }

    #[test]
    fn features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let maps = vec![
            FeatureMap::new("a", (2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            FeatureMap::new("b", (2, 1, 2), vec![0.5, 0.0, 0.25, 1.0]).unwrap(),
        ];
        let p = dir.path().join("f.pncl");
        write_features(&p, &maps).unwrap();
        assert_eq!(read_features(&p).unwrap(), maps);
    }

    #[test]
    fn flat_features_need_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.pncl");
        write_tensor(&TensorFile::f32(vec![2, 3], vec![0.0; 6]).unwrap(), &p).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Config(_))));
        let t = TensorFile::f32(vec![2, 3], vec![1.0; 6]).unwrap().with_sidecar(json!({"ids": ["x", "y"]}));
        write_tensor(&t, &p).unwrap();
        let maps = read_features(&p).unwrap();
        assert_eq!(maps[1].id.as_str(), "y");
        assert_eq!(maps[1].shape(), (1, 1, 3));
    }

    #[test]
    fn score_grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.pncl");
        let g = sg(&[[0.5, 0.25, 0.25], [0.0, 1.0, 0.0]], PromptSpec::new(&"a".into(), &"q".into(), grid()));
        write_score_grid(&p, grid(), &g).unwrap();
        assert!(companion_path(&p, "feature").exists());
        let (gd, back) = read_score_grid(&p).unwrap();
        assert_eq!(gd, grid());
        assert_eq!(back, g);
    }

    #[test]
    fn pool_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut scorer = TableScorer::new(grid(), 3);
        let q: ItemId = "q".into();
        for (id, rows) in [("a", [[0.5, 0.25, 0.25], [0.0, 1.0, 0.0]]), ("b", [[0.25, 0.5, 0.25], [1.0, 0.0, 0.0]])] {
            let p = PromptSpec::new(&id.into(), &q, grid());
            scorer.insert(p.clone(), sg(&rows, p));
        }
        let r = RetrievedSet {
            query: q.clone(),
            items: vec![
                Retrieved { id: "a".into(), similarity: 0.9 },
                Retrieved { id: "b".into(), similarity: 0.5 },
            ],
        };
        let pool = build_pool(&scorer, &r, &q, PoolMode::Q).unwrap();
        let p = dir.path().join("pool.pncl");
        write_pool(&p, grid(), &pool).unwrap();
        let (gd, back) = read_pool(&p).unwrap();
        assert_eq!(gd, grid());
        assert_eq!(back, pool);
    }

    #[test]
    fn token_grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pncl");
        let pred = PredictionGrid { grid: GridDims::new(2, 2).unwrap(), tokens: vec![3, 1, 4, 1] };
        write_token_grid(&p, Some(&"q".into()), &pred).unwrap();
        assert_eq!(read_token_grid(&p).unwrap(), pred);
    }
}
