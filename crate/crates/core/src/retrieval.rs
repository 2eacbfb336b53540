//! Recall@K in both retrieval directions from a square score matrix whose
//! row `i` and column `i` form the matched pair.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToPoint,
    PointToText,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::TextToPoint => "text->point",
            Direction::PointToText => "point->text",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// `(k, percentage)` in increasing `k`.
    pub recall: Vec<(usize, f64)>,
    pub rsum: f64,
}

impl RetrievalReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// 0-based rank of the matched item in `scores`: how many gallery items beat
/// it, with ties going to the lower index.
pub fn rank_of<T: Real>(scores: &[T], gt: usize) -> usize {
    let s = scores[gt];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < gt))
        .count()
}

/// Recall@k (percent) of queries given by the rows of `sim`.
pub fn recall_at_k<T: Real>(sim: &Tensor<T>, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if sim.ndim() != 2 || sim.rows() != sim.cols() || sim.rows() == 0 {
        return Err(Error::Shape(format!(
            "recall needs a non-empty square score matrix, got {:?}",
            sim.shape()
        )));
    }
    if !sim.is_finite() {
        return Err(Error::NonFinite("score matrix".into()));
    }
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::Argument("recall cutoffs must be >= 1".into()));
    }
    let n = sim.rows();
    let ranks: Vec<usize> = (0..n).map(|i| rank_of(sim.row(i), i)).collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            (k, 100.0 * hits as f64 / n as f64)
        })
        .collect())
}

/// Reports for both directions (text queries are the rows of `sim`).
/// Cutoffs above the gallery size are kept but saturate; a warning is logged.
pub fn evaluate<T: Real>(sim: &Tensor<T>, ks: &[usize]) -> Result<[RetrievalReport; 2]> {
    if let Some(&k) = ks.iter().find(|&&k| k > sim.rows()) {
        log::warn!(
            "gallery of {} items is smaller than cutoff {k}; recall saturates",
            sim.rows()
        );
    }
    let make = |direction, m: &Tensor<T>| -> Result<RetrievalReport> {
        let recall = recall_at_k(m, ks)?;
        let rsum = recall.iter().map(|(_, v)| v).sum();
        Ok(RetrievalReport {
            direction,
            recall,
            rsum,
        })
    };
    Ok([
        make(Direction::TextToPoint, sim)?,
        make(Direction::PointToText, &sim.transpose())?,
    ])
}

/// Mean Rsum of the two directions.
pub fn mean_rsum(reports: &[RetrievalReport]) -> f64 {
    reports.iter().map(|r| r.rsum).sum::<f64>() / reports.len().max(1) as f64
}
