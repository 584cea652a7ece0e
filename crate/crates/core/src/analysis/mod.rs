//! Relevance heatmaps, 2-D projections of embeddings and the number
//! embedding study.

mod relevance;
mod tsne;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use relevance::{line_vs_blank_ratio, overlay, relevance, relevance_with_model, RelevanceMap};
pub use tsne::{tsne, TsneConfig};

use crate::encoder::{Encoder, Representation};
use crate::error::{Error, Result};
use crate::representation::TextRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub label: i64,
    pub anchor: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Projection2D {
    pub points: Vec<ProjectedPoint>,
}

impl Projection2D {
    /// Largest extent of the point cloud along either axis.
    pub fn spread(&self) -> f64 {
        let extent = |f: fn(&ProjectedPoint) -> f64| {
            let lo = self.points.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = self.points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            (hi - lo).max(0.0)
        };
        extent(|p| p.x).max(extent(|p| p.y))
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.points[i], &self.points[j]);
        ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        for p in &self.points {
            w.serialize(p).map_err(|e| Error::Validation(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Projects embeddings to two dimensions, keeping each point's label and
/// anchor.
pub fn project_embeddings(
    embeddings: &[Vec<f32>],
    labels: &[i64],
    anchors: &[String],
    cfg: &TsneConfig,
) -> Result<Projection2D> {
    if embeddings.len() != labels.len() || embeddings.len() != anchors.len() {
        return Err(Error::Validation("embeddings, labels and anchors must align".into()));
    }
    let data: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let coords = tsne(&data, cfg)?;
    Ok(Projection2D {
        points: coords
            .into_iter()
            .zip(labels.iter().zip(anchors))
            .map(|([x, y], (&label, anchor))| ProjectedPoint {
                x,
                y,
                label,
                anchor: anchor.clone(),
            })
            .collect(),
    })
}

/// Intra- versus inter-group mean distance in a projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub n_groups: usize,
    pub mean_intra: f64,
    pub mean_inter: f64,
    /// Advisory: intra < inter.
    pub passed: bool,
}

/// Mean pairwise distance within and across label groups; `None` when
/// either kind of pair is missing.
pub fn cluster_summary(p: &Projection2D) -> Option<ClusterSummary> {
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    let n = p.points.len();
    for i in 0..n {
        for j in i + 1..n {
            let d = p.distance(i, j);
            if p.points[i].label == p.points[j].label {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return None;
    }
    let mut groups: Vec<i64> = p.points.iter().map(|q| q.label).collect();
    groups.sort_unstable();
    groups.dedup();
    let (mean_intra, mean_inter) = (intra / n_intra as f64, inter / n_inter as f64);
    Some(ClusterSummary {
        n_groups: groups.len(),
        mean_intra,
        mean_inter,
        passed: mean_intra < mean_inter,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumberStudy {
    pub projection: Projection2D,
    pub summary: Option<ClusterSummary>,
}

/// Hundred-sized bucket of `n` (1..=100 → 0, 101..=200 → 1, ...).
pub fn number_bucket(n: u64) -> i64 {
    ((n.max(1) - 1) / 100) as i64
}

/// Encodes the strings "1" to `range_end` with a text encoder, projects
/// them, and compares distances within and across hundred-sized buckets.
pub fn number_embedding_study(range_end: u64, encoder: &dyn Encoder, cfg: &TsneConfig) -> Result<NumberStudy> {
    let numbers: Vec<u64> = (1..=range_end).collect();
    let embeddings: Vec<Vec<f32>> = numbers
        .iter()
        .map(|n| {
            let rec = TextRecord { text: n.to_string() };
            encoder.encode(Representation::Text(&rec)).map(|e| e.vector)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<i64> = numbers.iter().map(|&n| number_bucket(n)).collect();
    let anchors: Vec<String> = numbers.iter().map(|n| n.to_string()).collect();
    if numbers.len() < 2 {
        let points = anchors
            .into_iter()
            .zip(labels)
            .map(|(anchor, label)| ProjectedPoint {
                x: 0.0,
                y: 0.0,
                label,
                anchor,
            })
            .collect();
        return Ok(NumberStudy {
            projection: Projection2D { points },
            summary: None,
        });
    }
    let projection = project_embeddings(&embeddings, &labels, &anchors, cfg)?;
    let summary = cluster_summary(&projection);
    Ok(NumberStudy { projection, summary })
}

/// Consecutive-point versus all-pairs mean distance of a time-ordered
/// projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub consecutive_mean: f64,
    pub random_pair_mean: f64,
    /// Advisory: consecutive < random pairs.
    pub passed: bool,
}

/// Points must be in time order.
pub fn trajectory_summary(p: &Projection2D) -> Option<TrajectorySummary> {
    let n = p.points.len();
    if n < 3 {
        return None;
    }
    let consecutive_mean = (1..n).map(|i| p.distance(i - 1, i)).sum::<f64>() / (n - 1) as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += p.distance(i, j);
        }
    }
    let random_pair_mean = total / (n * (n - 1) / 2) as f64;
    Some(TrajectorySummary {
        consecutive_mean,
        random_pair_mean,
        passed: consecutive_mean < random_pair_mean,
    })
}

/// Identifies what produced an analysis artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub seed: u64,
    pub config_hash: Option<String>,
}

/// `relevance_<anchor>.png`, with the anchor as `YYYYMMDDTHH`.
pub fn relevance_file_name(anchor: &chrono::NaiveDateTime) -> String {
    format!("relevance_{}.png", anchor.format("%Y%m%dT%H"))
}

/// Writes `{ "provenance": ..., "result": ... }` as pretty JSON.
pub fn write_artifact<T: Serialize>(path: &Path, provenance: &Provenance, result: &T) -> Result<()> {
    let doc = serde_json::json!({ "provenance": provenance, "result": result });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(path, e))
}
