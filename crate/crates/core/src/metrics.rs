//! Argmax decoding and evaluation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::divergence::CodebookDistribution;
use crate::error::{Error, Result};
use crate::types::{GridDims, ItemId};

/// Tolerance recorded in reports for `mean == Σ values / n`.
pub const MEAN_TOLERANCE: f64 = 1e-12;

/// Per-patch token ids `w*_l = argmax_v s_lv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionGrid {
    pub grid: GridDims,
    pub tokens: Vec<u32>,
}

/// Argmax of every patch distribution; ties go to the lowest token id.
pub fn decode_argmax(grid: GridDims, distributions: &[CodebookDistribution]) -> Result<PredictionGrid> {
    if distributions.len() != grid.len() {
        return Err(Error::dim("decoded patches", grid.len(), distributions.len()));
    }
    Ok(PredictionGrid {
        grid,
        tokens: distributions.iter().map(|d| d.argmax() as u32).collect(),
    })
}

/// Maps predicted tokens to an output array.
pub trait Decoder {
    fn decode(&self, prediction: &PredictionGrid) -> Vec<f64>;
}

/// Token id as output value (the synthetic world's outputs are token grids).
/// Real-model predictions are exported as token ids for an external decoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenDecoder;

impl Decoder for TokenDecoder {
    fn decode(&self, prediction: &PredictionGrid) -> Vec<f64> {
        prediction.tokens.iter().map(|&t| f64::from(t)).collect()
    }
}

fn same_len(context: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(context, a, b));
    }
    Ok(())
}

/// `|pred ∧ gt| / |pred ∨ gt|`; 1.0 when both masks are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    same_len("iou masks", gt.len(), pred.len())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Per-item mean of [`iou`].
pub fn mean_iou(pairs: &[(&[bool], &[bool])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("mean IoU over zero items".into()));
    }
    let values = pairs.iter().map(|(p, g)| iou(p, g)).collect::<Result<Vec<_>>>()?;
    Ok(mean(&values))
}

pub fn mse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len("mse grids", gt.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::UndefinedMetric("mse of empty grids".into()));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn pixel_accuracy(pred: &[u32], gt: &[u32]) -> Result<f64> {
    same_len("token grids", gt.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of empty grids".into()));
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Foreground mask of a token grid: every token other than 0.
pub fn foreground(tokens: &[u32]) -> Vec<bool> {
    tokens.iter().map(|&t| t != 0).collect()
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub id: ItemId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub value: f64,
}

/// One metric over a set of items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub items: Vec<ItemScore>,
    pub mean: f64,
    pub tolerance: f64,
}

impl EvalReport {
    pub fn new(metric: impl Into<String>, items: Vec<ItemScore>) -> Result<Self> {
        let metric = metric.into();
        if items.is_empty() {
            return Err(Error::UndefinedMetric(format!("{metric} over zero items")));
        }
        let values: Vec<f64> = items.iter().map(|i| i.value).collect();
        Ok(Self {
            metric,
            mean: mean(&values),
            items,
            tolerance: MEAN_TOLERANCE,
        })
    }

    /// Mean per group key, for class-wise folding. Items without a group
    /// are collected under `""`.
    pub fn group_means(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for it in &self.items {
            acc.entry(it.group.clone().unwrap_or_default())
                .or_default()
                .push(it.value);
        }
        acc.into_iter().map(|(k, v)| (k, mean(&v))).collect()
    }
}
