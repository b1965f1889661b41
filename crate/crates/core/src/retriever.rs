//! Pixel-level retrieval: flattened, ℓ2-normalized feature maps ranked by dot
//! similarity against the support set.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ItemId;

/// Flattening order used for every feature map: channel, then row, then column.
pub const FLATTEN_ORDER: &str = "channel-major,row,column";

/// A `(channels, height, width)` feature map, stored flat in [`FLATTEN_ORDER`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub id: ItemId,
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        id: impl Into<ItemId>,
        shape: (usize, usize, usize),
        values: Vec<f64>,
    ) -> Result<Self> {
        let (channels, height, width) = shape;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::config(format!(
                "feature map dimensions must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if values.len() != expected {
            return Err(Error::dim("feature map values", expected, values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("feature map entry {i} is not finite")));
        }
        Ok(Self {
            id: id.into(),
            channels,
            height,
            width,
            values,
        })
    }

    /// A flat vector viewed as a `(dim, 1, 1)` map.
    pub fn flat(id: impl Into<ItemId>, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(id, (n, 1, 1), values)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

/// A unit-norm flattened feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub id: ItemId,
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &FeatureVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::dim("feature dot product", self.len(), other.len()));
        }
        Ok(dot(&self.values, &other.values))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flatten a feature map channel-major and scale it to unit ℓ2 norm.
pub fn flatten_normalize(map: &FeatureMap) -> Result<FeatureVector> {
    let norm = map.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateFeature(map.id.to_string()));
    }
    Ok(FeatureVector {
        id: map.id.clone(),
        values: map.values.iter().map(|v| v / norm).collect(),
    })
}

/// Normalized support-set features, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct RetrievalIndex {
    dim: usize,
    ids: Vec<ItemId>,
    positions: HashMap<ItemId, usize>,
    data: Vec<f64>,
}

impl RetrievalIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_vectors(vectors: impl IntoIterator<Item = FeatureVector>) -> Result<Self> {
        let mut index = Self::new();
        for v in vectors {
            index.insert(v)?;
        }
        Ok(index)
    }

    pub fn from_maps<'a>(maps: impl IntoIterator<Item = &'a FeatureMap>) -> Result<Self> {
        let mut index = Self::new();
        for m in maps {
            index.insert(flatten_normalize(m)?)?;
        }
        Ok(index)
    }

    pub fn insert(&mut self, v: FeatureVector) -> Result<()> {
        if self.ids.is_empty() {
            self.dim = v.len();
        } else if v.len() != self.dim {
            return Err(Error::dim("index vector length", self.dim, v.len()));
        }
        if self.positions.contains_key(&v.id) {
            return Err(Error::config(format!("duplicate index id `{}`", v.id)));
        }
        self.positions.insert(v.id.clone(), self.ids.len());
        self.ids.push(v.id);
        self.data.extend_from_slice(&v.values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn vector(&self, position: usize) -> &[f64] {
        &self.data[position * self.dim..(position + 1) * self.dim]
    }

    pub fn position(&self, id: &ItemId) -> Option<usize> {
        self.positions.get(id).copied()
    }
}

/// One retrieved support item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub id: ItemId,
    pub similarity: f64,
}

/// Top-m support items for one query, most similar first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub query: ItemId,
    pub items: Vec<Retrieved>,
}

impl RetrievedSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ItemId> {
        self.items.iter().map(|r| &r.id)
    }
}

/// Return the `m` index entries with the largest `queryᵀx`.
///
/// Equal similarities keep index insertion order.
pub fn top_m(query: &FeatureVector, index: &RetrievalIndex, m: usize) -> Result<RetrievedSet> {
    if m == 0 {
        return Err(Error::config("m must be >= 1"));
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if query.len() != index.dim() {
        return Err(Error::dim("query feature length", index.dim(), query.len()));
    }
    let scores: Vec<f64> = index
        .data
        .par_chunks(index.dim)
        .map(|row| dot(query.values(), row))
        .collect();

    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let take = m.min(order.len());
    if take < order.len() {
        order.select_nth_unstable_by(take - 1, by_rank);
        order.truncate(take);
    }
    order.sort_unstable_by(by_rank);

    Ok(RetrievedSet {
        query: query.id.clone(),
        items: order
            .into_iter()
            .map(|i| Retrieved {
                id: index.ids[i].clone(),
                similarity: scores[i],
            })
            .collect(),
    })
}

/// Fraction of queries whose first `k` retrieved ids include a relevant one.
pub fn recall_at_k(
    retrievals: &[RetrievedSet],
    relevant: &HashMap<ItemId, HashSet<ItemId>>,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    if retrievals.is_empty() {
        return Err(Error::UndefinedMetric("recall over zero queries".into()));
    }
    let mut hits = 0usize;
    for r in retrievals {
        let rel = relevant
            .get(&r.query)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| {
                Error::UndefinedMetric(format!("query `{}` has no relevant set", r.query))
            })?;
        if r.ids().take(k).any(|id| rel.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / retrievals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(id: &str, v: &[f64]) -> FeatureVector {
        flatten_normalize(&FeatureMap::flat(id, v.to_vec()).unwrap()).unwrap()
    }

    fn abc_index() -> RetrievalIndex {
        RetrievalIndex::from_vectors([
            unit("A", &[1.0, 0.0]),
            unit("B", &[0.0, 1.0]),
            unit("C", &[0.6, 0.8]),
        ])
        .unwrap()
    }

    #[test]
    fn flatten_normalize_examples() {
        let v = unit("x", &[3.0, 4.0]);
        assert_eq!(v.values(), &[0.6, 0.8]);
        assert_eq!(unit("x", &[-5.0]).values(), &[-1.0]);
        let again = flatten_normalize(&FeatureMap::flat("x", v.values().to_vec()).unwrap()).unwrap();
        for (a, b) in again.values().iter().zip(v.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        let zero = FeatureMap::flat("z", vec![0.0; 4]).unwrap();
        assert!(matches!(flatten_normalize(&zero), Err(Error::DegenerateFeature(_))));
    }

    #[test]
    fn flatten_is_channel_major() {
        // 2 channels of 1x2: [[1,2]], [[3,4]]
        let map = FeatureMap::new("m", (2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = flatten_normalize(&map).unwrap();
        let n = 30f64.sqrt();
        assert_eq!(v.values(), &[1.0 / n, 2.0 / n, 3.0 / n, 4.0 / n]);
    }

    #[test]
    fn top_m_examples() {
        let index = abc_index();
        let got = top_m(&unit("q", &[1.0, 0.0]), &index, 2).unwrap();
        let ids: Vec<_> = got.ids().map(ItemId::as_str).collect();
        assert_eq!(ids, ["A", "C"]);
        assert_eq!(got.items[0].similarity, 1.0);
        assert!((got.items[1].similarity - 0.6).abs() < 1e-15);

        let all = top_m(&unit("q", &[0.0, 1.0]), &index, 10).unwrap();
        let ids: Vec<_> = all.ids().map(ItemId::as_str).collect();
        assert_eq!(ids, ["B", "C", "A"]);
    }

    #[test]
    fn top_m_ties_keep_insertion_order() {
        let index = RetrievalIndex::from_vectors([
            unit("z", &[0.0, 1.0]),
            unit("y", &[1.0, 0.0]),
            unit("x", &[0.0, 1.0]),
        ])
        .unwrap();
        let got = top_m(&unit("q", &[0.0, 1.0]), &index, 2).unwrap();
        let ids: Vec<_> = got.ids().map(ItemId::as_str).collect();
        assert_eq!(ids, ["z", "x"]);
    }

    #[test]
    fn top_m_errors() {
        assert!(matches!(
            top_m(&unit("q", &[1.0]), &RetrievalIndex::new(), 1),
            Err(Error::EmptyIndex)
        ));
        assert!(matches!(
            top_m(&unit("q", &[1.0, 0.0, 0.0]), &abc_index(), 1),
            Err(Error::Dimension { .. })
        ));
        assert!(top_m(&unit("q", &[1.0, 0.0]), &abc_index(), 0).is_err());
        let mut index = abc_index();
        assert!(index.insert(unit("A", &[1.0, 1.0])).is_err());
        assert!(index.insert(unit("D", &[1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn recall_examples() {
        let index = abc_index();
        let queries = [("q1", [1.0, 0.0]), ("q2", [0.0, 1.0]), ("q3", [0.6, 0.8])];
        let sets: Vec<_> = queries
            .iter()
            .map(|(id, v)| top_m(&unit(id, v), &index, 5).unwrap())
            .collect();
        let rel = |pairs: &[(&str, &str)]| -> HashMap<ItemId, HashSet<ItemId>> {
            pairs
                .iter()
                .map(|(q, r)| (ItemId::from(*q), HashSet::from([ItemId::from(*r)])))
                .collect()
        };
        let top1 = rel(&[("q1", "A"), ("q2", "B"), ("q3", "C")]);
        assert_eq!(recall_at_k(&sets, &top1, 1).unwrap(), 1.0);
        let none = rel(&[("q1", "Z"), ("q2", "Z"), ("q3", "Z")]);
        assert_eq!(recall_at_k(&sets, &none, 5).unwrap(), 0.0);
        let two = rel(&[("q1", "A"), ("q2", "Z"), ("q3", "B")]);
        assert!((recall_at_k(&sets, &two, 5).unwrap() - 2.0 / 3.0).abs() < 1e-9);
        assert!(recall_at_k(&[], &two, 5).is_err());
        assert!(recall_at_k(&sets, &HashMap::new(), 5).is_err());
    }
}
