//! Grounding metrics: `R@h, IoU@u` for `h ∈ {1, 5}`, `u ∈ {0.3, 0.5, 0.7}`,
//! and mean top-1 IoU, all in percent.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{iou, GroundingDataset, Moment};
use crate::error::{Error, Result};
use crate::proposals::QueryPrediction;

pub const RANKS: [usize; 2] = [1, 5];
pub const THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `recall[h][u]` indexed like [`RANKS`] and [`THRESHOLDS`].
    pub recall: [[f64; 3]; 2],
    pub miou: f64,
    pub num_queries: usize,
}

impl MetricReport {
    /// `R@h, IoU@u`; `None` for an unreported pair.
    pub fn recall_at(&self, h: usize, u: f64) -> Option<f64> {
        let hi = RANKS.iter().position(|&r| r == h)?;
        let ui = THRESHOLDS.iter().position(|&t| (t - u).abs() < 1e-12)?;
        Some(self.recall[hi][ui])
    }

    /// `(name, value)` in reporting order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::with_capacity(7);
        for (hi, h) in RANKS.iter().enumerate() {
            for (ui, u) in THRESHOLDS.iter().enumerate() {
                out.push((format!("R@{h}, IoU@{u}"), self.recall[hi][ui]));
            }
        }
        out.push(("mIoU".to_string(), self.miou));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (name, v) in self.entries() {
            let _ = writeln!(s, "\"{name}\",{v:.4}");
        }
        let _ = writeln!(s, "queries,{}", self.num_queries);
        s
    }

    pub fn to_table(&self) -> String {
        let entries = self.entries();
        let mut head = String::new();
        let mut vals = String::new();
        for (name, v) in &entries {
            let _ = write!(head, "{name:>14}");
            let _ = write!(vals, "{v:>14.2}");
        }
        format!("{head}\n{vals}\n({} queries)\n", self.num_queries)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores ranked predictions against the dataset's ground truth.
///
/// A query without a prediction counts as a miss with IoU 0. Predictions for
/// query ids absent from the dataset are rejected.
pub fn compute_metrics(preds: &[QueryPrediction], dataset: &GroundingDataset) -> Result<MetricReport> {
    let mut by_id: HashMap<&str, &QueryPrediction> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(p.query_id.as_str(), p).is_some() {
            return Err(Error::Input(format!("duplicate prediction for query {}", p.query_id)));
        }
    }
    let mut hits = [[0usize; 3]; 2];
    let mut top1 = Vec::with_capacity(dataset.num_queries());
    let mut seen = 0usize;
    for video in &dataset.videos {
        for q in &video.queries {
            let Some(pred) = by_id.get(q.query_id.as_str()) else {
                warn!("no prediction for query {}; counted as a miss", q.query_id);
                top1.push(0.0);
                continue;
            };
            seen += 1;
            if pred.proposals.is_empty() {
                warn!("empty prediction for query {}; counted as a miss", q.query_id);
            }
            let ious: Vec<f64> = pred
                .proposals
                .iter()
                .take(RANKS[RANKS.len() - 1])
                .map(|m| iou(&Moment { start: m.start, end: m.end }, &q.moment))
                .collect();
            top1.push(ious.first().copied().unwrap_or(0.0));
            for (hi, &h) in RANKS.iter().enumerate() {
                let best = ious.iter().take(h).copied().fold(0.0, f64::max);
                for (ui, &u) in THRESHOLDS.iter().enumerate() {
                    if best >= u {
                        hits[hi][ui] += 1;
                    }
                }
            }
        }
    }
    if seen != by_id.len() {
        let known: std::collections::HashSet<&str> = dataset
            .videos
            .iter()
            .flat_map(|v| v.queries.iter().map(|q| q.query_id.as_str()))
            .collect();
        let stray = by_id.keys().find(|k| !known.contains(*k)).expect("count mismatch");
        return Err(Error::Input(format!("prediction for unknown query {stray}")));
    }
    let n = top1.len();
    if n == 0 {
        return Err(Error::Input("dataset has no queries".into()));
    }
    // summation order fixed by value so the report ignores query order
    top1.sort_by(f64::total_cmp);
    let miou = 100.0 * top1.iter().sum::<f64>() / n as f64;
    let recall = hits.map(|row| row.map(|c| 100.0 * c as f64 / n as f64));
    Ok(MetricReport {
        recall,
        miou,
        num_queries: n,
    })
}
