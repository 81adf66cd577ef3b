//! Structural and heatmap average precision / F-score.
//!
//! Structural metrics follow the L-CNN convention: both lines are mapped to a 128 × 128 grid
//! and a detection is a true positive when the summed squared endpoint distance to a
//! still-unmatched ground truth is at most `τ`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{min_sq_endpoint_dist, LineSegment};

pub const STRUCTURAL_SCALE: f64 = 128.0;
pub const DEFAULT_RASTER: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub line: LineSegment,
    pub confidence: f64,
}

/// Detections and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub gt: Vec<LineSegment>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall after each detection in descending confidence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    /// Area under the precision envelope (all-point interpolation).
    pub fn average_precision(&self) -> f64 {
        let mut envelope: Vec<f64> = self.points.iter().map(|p| p.precision).collect();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for (p, env) in self.points.iter().zip(&envelope) {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
        ap
    }

    /// Best F1 over all points.
    pub fn max_f(&self) -> f64 {
        self.points
            .iter()
            .map(|p| {
                let s = p.precision + p.recall;
                if s > 0.0 {
                    2.0 * p.precision * p.recall / s
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.precision, p.recall);
        }
        s
    }
}

/// Indices of `dets` ordered by descending confidence, ties kept in input order.
pub fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    idx
}

/// TP/FP flags for detections taken in the given order.
///
/// Each detection claims the nearest ground truth not yet claimed; it is a true positive when
/// that distance is within `tau` squared pixels at `scale`.
pub fn greedy_match_structural(dets: &[Detection], gts: &[LineSegment], tau: f64, scale: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(g, _)| !taken[*g])
                .map(|(g, l)| (g, min_sq_endpoint_dist(&d.line, l, scale)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((g, dist)) if dist <= tau => {
                    taken[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

fn total_gt(images: &[ImageResult]) -> Result<usize> {
    let n: usize = images.iter().map(|im| im.gt.len()).sum();
    if n == 0 {
        return Err(Error::Evaluation("no ground-truth lines in the evaluation set".into()));
    }
    Ok(n)
}

/// Dataset-level structural PR curve.
pub fn structural_pr_curve(images: &[ImageResult], tau: f64) -> Result<PrCurve> {
    let n_gt = total_gt(images)? as f64;
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for im in images {
        let order = confidence_order(&im.detections);
        let sorted: Vec<Detection> = order.iter().map(|&i| im.detections[i]).collect();
        let flags = greedy_match_structural(&sorted, &im.gt, tau, STRUCTURAL_SCALE);
        scored.extend(sorted.iter().map(|d| d.confidence).zip(flags));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let points = scored
        .iter()
        .enumerate()
        .map(|(k, &(conf, hit))| {
            tp += usize::from(hit);
            PrPoint {
                threshold: conf,
                precision: tp as f64 / (k + 1) as f64,
                recall: tp as f64 / n_gt,
            }
        })
        .collect();
    Ok(PrCurve { points })
}

pub fn structural_ap(images: &[ImageResult], tau: f64) -> Result<f64> {
    Ok(structural_pr_curve(images, tau)?.average_precision())
}

pub fn structural_f(images: &[ImageResult], tau: f64) -> Result<f64> {
    Ok(structural_pr_curve(images, tau)?.max_f())
}

/// Pixel cells visited by a 4-connected line between two grid cells.
pub fn raster_line_cells(x0: i64, y0: i64, x1: i64, y1: i64) -> Vec<(i64, i64)> {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x, y));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 - dy > dx - e2 {
            err += dy;
            x += sx;
        } else {
            err += dx;
            y += sy;
        }
    }
    out
}

fn to_cell(v: f64, raster: usize) -> i64 {
    ((v * raster as f64).floor() as i64).clamp(0, raster as i64 - 1)
}

/// Marks `line` on a `raster × raster` grid stored row-major.
pub fn rasterize(line: &LineSegment, raster: usize, grid: &mut [bool]) {
    let cells = raster_line_cells(
        to_cell(line.x1, raster),
        to_cell(line.y1, raster),
        to_cell(line.x2, raster),
        to_cell(line.y2, raster),
    );
    for (x, y) in cells {
        grid[y as usize * raster + x as usize] = true;
    }
}

/// Pixel-level PR curve swept over `thresholds` (descending; defaults to every distinct
/// detection confidence), pooled over images.
pub fn heatmap_pr_curve(images: &[ImageResult], raster: usize, thresholds: Option<&[f64]>) -> Result<PrCurve> {
    if raster == 0 {
        return Err(Error::arg("raster size must be positive"));
    }
    let mut sweep: Vec<f64> = match thresholds {
        Some(t) => t.to_vec(),
        None => images
            .iter()
            .flat_map(|im| im.detections.iter().map(|d| d.confidence))
            .collect(),
    };
    sweep.sort_by(|a, b| b.total_cmp(a));
    sweep.dedup();
    let cells = raster * raster;
    let gt_grids: Vec<Vec<bool>> = images
        .iter()
        .map(|im| {
            let mut g = vec![false; cells];
            for l in &im.gt {
                rasterize(l, raster, &mut g);
            }
            g
        })
        .collect();
    let gt_pixels: usize = gt_grids.iter().map(|g| g.iter().filter(|&&b| b).count()).sum();
    if gt_pixels == 0 {
        return Ok(PrCurve::default());
    }
    // Predictions are added incrementally as the threshold falls.
    let mut order: Vec<(usize, Detection)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| im.detections.iter().map(move |d| (i, *d)))
        .collect();
    order.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    let mut pred_grids = vec![vec![false; cells]; images.len()];
    let mut next = 0;
    let mut points = Vec::with_capacity(sweep.len());
    for &t in &sweep {
        while next < order.len() && order[next].1.confidence >= t {
            let (i, d) = order[next];
            rasterize(&d.line, raster, &mut pred_grids[i]);
            next += 1;
        }
        let (mut hit, mut pred) = (0usize, 0usize);
        for (p, g) in pred_grids.iter().zip(&gt_grids) {
            for (&pp, &gg) in p.iter().zip(g) {
                pred += usize::from(pp);
                hit += usize::from(pp && gg);
            }
        }
        if pred == 0 {
            continue;
        }
        points.push(PrPoint {
            threshold: t,
            precision: hit as f64 / pred as f64,
            recall: hit as f64 / gt_pixels as f64,
        });
    }
    Ok(PrCurve { points })
}

/// `(AP^H, F^H)`.
pub fn heatmap_ap_f(images: &[ImageResult], raster: usize, thresholds: Option<&[f64]>) -> Result<(f64, f64)> {
    let c = heatmap_pr_curve(images, raster, thresholds)?;
    Ok((c.average_precision(), c.max_f()))
}

/// Aggregate metrics, values in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "sAP")]
    pub sap: BTreeMap<String, f64>,
    #[serde(rename = "sF")]
    pub sf: BTreeMap<String, f64>,
    #[serde(rename = "APH")]
    pub aph: f64,
    #[serde(rename = "FH")]
    pub fh: f64,
    /// Per-image sAP at each threshold; `None` for images without ground truth.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_image: Vec<BTreeMap<String, Option<f64>>>,
}

fn tau_key(tau: f64) -> String {
    if tau.fract() == 0.0 {
        format!("{}", tau as i64)
    } else {
        format!("{tau}")
    }
}

impl MetricReport {
    pub fn sap_at(&self, tau: f64) -> Option<f64> {
        self.sap.get(&tau_key(tau)).copied()
    }

    pub fn sf_at(&self, tau: f64) -> Option<f64> {
        self.sf.get(&tau_key(tau)).copied()
    }
}

/// Structural metrics at every `tau` plus heatmap metrics.
pub fn evaluate_detections(images: &[ImageResult], taus: &[f64]) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for &tau in taus {
        let curve = structural_pr_curve(images, tau)?;
        report.sap.insert(tau_key(tau), curve.average_precision());
        report.sf.insert(tau_key(tau), curve.max_f());
    }
    let (aph, fh) = heatmap_ap_f(images, DEFAULT_RASTER, None)?;
    report.aph = aph;
    report.fh = fh;
    report.per_image = images
        .iter()
        .map(|im| {
            taus.iter()
                .map(|&tau| (tau_key(tau), structural_ap(std::slice::from_ref(im), tau).ok()))
                .collect()
        })
        .collect();
    Ok(report)
}
