//! Evaluation metrics: Chamfer distance and F-score at `τ` and `2τ`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::dist2;
use crate::kdtree::KdTree;

pub use crate::loss::{chamfer, chamfer_brute};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricConfig {
    /// Threshold on squared nearest-neighbor distance.
    pub tau: f64,
    /// Points sampled from each predicted surface.
    pub samples: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { tau: 1e-4, samples: 10_000 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.samples == 0 {
            return Err(Error::Config(format!(
                "metric config needs tau > 0 and samples >= 1, got tau={} samples={}",
                self.tau, self.samples
            )));
        }
        Ok(())
    }
}

/// Percentages in `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FScore {
    pub f_tau: f64,
    pub f_2tau: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Squared distance from every query point to its nearest neighbor in `tree`.
pub fn nearest_sq_dists(query: &[[f64; 3]], tree: &KdTree) -> Vec<f64> {
    query.iter().map(|&q| tree.nearest(q).1).collect()
}

fn nearest_sq_dists_brute(query: &[[f64; 3]], target: &[[f64; 3]]) -> Vec<f64> {
    query
        .iter()
        .map(|&q| target.iter().map(|&t| dist2(q, t)).fold(f64::INFINITY, f64::min))
        .collect()
}

fn score(pred_d: &[f64], gt_d: &[f64], tau: f64) -> Result<FScore> {
    if pred_d.is_empty() || gt_d.is_empty() {
        return Err(Error::invalid("f-score: empty point cloud"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("f-score threshold must be positive, got {tau}")));
    }
    let pct = |d: &[f64], t: f64| 100.0 * d.iter().filter(|&&v| v < t).count() as f64 / d.len() as f64;
    let f = |p: f64, r: f64| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    let (p, r) = (pct(pred_d, tau), pct(gt_d, tau));
    let (p2, r2) = (pct(pred_d, 2.0 * tau), pct(gt_d, 2.0 * tau));
    Ok(FScore { f_tau: f(p, r), f_2tau: f(p2, r2), precision: p, recall: r })
}

pub fn f_score(pred: &[[f64; 3]], gt: &[[f64; 3]], tau: f64) -> Result<FScore> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::invalid("f-score: empty point cloud"));
    }
    let (tp, tg) = (KdTree::new(pred)?, KdTree::new(gt)?);
    score(&nearest_sq_dists(pred, &tg), &nearest_sq_dists(gt, &tp), tau)
}

/// [`f_score`] by exhaustive search.
pub fn f_score_brute(pred: &[[f64; 3]], gt: &[[f64; 3]], tau: f64) -> Result<FScore> {
    score(&nearest_sq_dists_brute(pred, gt), &nearest_sq_dists_brute(gt, pred), tau)
}
