//! Distorted-region IoU and localization error metrics.
//!
//! A 3D box projects to an image region bounded by the four conic arcs of
//! its edges. IoU between two such regions is computed in pixel coordinates
//! by polygon clipping on the dense arc polylines.

use crate::camera::{project_pixel, CameraIntrinsics, PixelPoint};
use crate::conic::{segment_curve_with_gap, ConicError, DEFAULT_MAX_GAP_PX};
use crate::env::CylBox;
use geo::{Area, BooleanOps, LineString, Polygon};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("box does not project to a usable region: {0}")]
    Unprojectable(#[from] ConicError),
    #[error("region boundary degenerate ({0} usable points)")]
    Degenerate(usize),
    #[error("metrics require at least one record")]
    EmptyRecords,
    #[error("csv error: {0}")]
    Csv(String),
}

/// Axis-aligned pixel rectangle, inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl PixelRect {
    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a PixelPoint>) -> Option<Self> {
        let mut it = pts.into_iter();
        let first = it.next()?;
        let mut r = PixelRect {
            u_min: first.u,
            v_min: first.v,
            u_max: first.u,
            v_max: first.v,
        };
        for p in it {
            r.u_min = r.u_min.min(p.u);
            r.v_min = r.v_min.min(p.v);
            r.u_max = r.u_max.max(p.u);
            r.v_max = r.v_max.max(p.v);
        }
        Some(r)
    }

    pub fn intersect(&self, o: &PixelRect) -> Option<PixelRect> {
        let r = PixelRect {
            u_min: self.u_min.max(o.u_min),
            v_min: self.v_min.max(o.v_min),
            u_max: self.u_max.min(o.u_max),
            v_max: self.v_max.min(o.v_max),
        };
        (r.u_min < r.u_max && r.v_min < r.v_max).then_some(r)
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }
}

/// Image region bounded by the four projected box edges: a closed pixel
/// polyline (first point repeated at the end) plus its bounding envelope.
#[derive(Debug, Clone)]
pub struct DistortedRegion {
    pub boundary: Vec<PixelPoint>,
    pub envelope: PixelRect,
    /// Set when part of the box fell outside the field of view and the
    /// boundary was built from the projectable samples only.
    pub clipped: bool,
}

impl DistortedRegion {
    pub fn from_closed_polyline(boundary: Vec<PixelPoint>, clipped: bool) -> Option<Self> {
        if boundary.len() < 4 {
            return None;
        }
        let envelope = PixelRect::from_points(&boundary)?;
        Some(Self {
            boundary,
            envelope,
            clipped,
        })
    }

    /// Signed shoelace area of the boundary polyline, in px^2.
    pub fn area(&self) -> f64 {
        let b = &self.boundary;
        let mut acc = 0.0;
        for w in b.windows(2) {
            acc += w[0].u * w[1].v - w[1].u * w[0].v;
        }
        (acc * 0.5).abs()
    }
}

/// Projects the four edges of a box and assembles the closed boundary, at
/// sub-pixel arc density.
pub fn region_from_box(b: &CylBox, cam: &CameraIntrinsics) -> Result<DistortedRegion, RegionError> {
    region_from_box_with_gap(b, cam, DEFAULT_MAX_GAP_PX)
}

/// As [`region_from_box`] with an explicit arc-sampling pixel gap.
pub fn region_from_box_with_gap(
    b: &CylBox,
    cam: &CameraIntrinsics,
    max_gap_px: f64,
) -> Result<DistortedRegion, RegionError> {
    let c = b.corners();
    // Boundary cycle: bottom 1->2, right 2->4, top 4->3, left 3->1.
    let cycle = [(0usize, 1usize), (1, 3), (3, 2), (2, 0)];
    let mut boundary: Vec<PixelPoint> = Vec::new();
    let mut clipped = false;
    let mut first_err = None;
    for (i, j) in cycle {
        match segment_curve_with_gap(&c[i], &c[j], cam, 16, max_gap_px) {
            Ok(seg) => {
                let px = seg.pixel_polyline(cam);
                let skip = usize::from(!boundary.is_empty());
                boundary.extend_from_slice(&px[skip.min(px.len())..]);
            }
            Err(e) => {
                clipped = true;
                if first_err.is_none() {
                    first_err = Some(e);
                }
                // Keep whatever corners still project.
                for p in [&c[i], &c[j]] {
                    if let Ok(px) = project_pixel(p, cam) {
                        if boundary.last().map(|l| *l != px).unwrap_or(true) {
                            boundary.push(px);
                        }
                    }
                }
            }
        }
    }
    if boundary.len() >= 4 {
        if boundary.first() != boundary.last() {
            let f = boundary[0];
            boundary.push(f);
        }
        DistortedRegion::from_closed_polyline(boundary, clipped)
            .ok_or(RegionError::Degenerate(0))
    } else if let Some(e) = first_err {
        Err(RegionError::Unprojectable(e))
    } else {
        Err(RegionError::Degenerate(boundary.len()))
    }
}

const DEGENERATE_AREA_PX2: f64 = 1e-9;

fn to_polygon(r: &DistortedRegion) -> Polygon<f64> {
    let coords: Vec<(f64, f64)> = r.boundary.iter().map(|p| (p.u, p.v)).collect();
    Polygon::new(LineString::from(coords), vec![])
}

fn boundaries_equal(a: &DistortedRegion, b: &DistortedRegion) -> bool {
    a.boundary.len() == b.boundary.len()
        && a.boundary
            .iter()
            .zip(&b.boundary)
            .all(|(p, q)| p.u == q.u && p.v == q.v)
}

/// Intersection-over-union of two distorted regions by polygon clipping.
///
/// Degenerate (zero-area) regions score 0 against anything and 1 against an
/// identical copy of themselves. Arguments are ordered canonically before
/// clipping so the result is exactly symmetric.
pub fn distorted_iou(a: &DistortedRegion, b: &DistortedRegion) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    let a_deg = aa < DEGENERATE_AREA_PX2;
    let b_deg = ab < DEGENERATE_AREA_PX2;
    if a_deg || b_deg {
        return if a_deg && b_deg && boundaries_equal(a, b) {
            1.0
        } else {
            0.0
        };
    }
    // Canonical argument order for bit-exact symmetry.
    let key = |r: &DistortedRegion| {
        r.boundary
            .iter()
            .map(|p| (p.u, p.v))
            .fold((f64::INFINITY, f64::INFINITY), |acc, p| {
                if p < acc {
                    p
                } else {
                    acc
                }
            })
    };
    let (first, second) = if key(a) <= key(b) { (a, b) } else { (b, a) };
    let p = to_polygon(first);
    let q = to_polygon(second);
    let inter = p.intersection(&q).unsigned_area();
    let union = p.union(&q).unsigned_area();
    if union <= DEGENERATE_AREA_PX2 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Outcome of one evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub steps: u32,
    pub final_iou: f64,
    pub triggered_correct: bool,
    pub rho_error: f64,
    pub beta_error: f64,
}

/// Aggregate metrics over a set of evaluation records.
///
/// `correct_pct` is the fraction of records with a correct trigger, over all
/// records. The remaining statistics describe the correctly-triggered subset
/// (they are NaN when that subset is empty): localization RMSE and error
/// standard deviation for rho and beta, plus average steps and IoU. Beta
/// errors are wrapped to the shortest signed arc in [-pi, pi] before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n_records: usize,
    pub n_correct: usize,
    pub correct_pct: f64,
    pub avg_steps: f64,
    pub avg_iou: f64,
    pub rmse_rho: f64,
    pub rmse_beta: f64,
    pub std_rho: f64,
    pub std_beta: f64,
}

/// Wraps an angle to the shortest signed arc in `[-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(std::f64::consts::TAU);
    if w > std::f64::consts::PI {
        w -= std::f64::consts::TAU;
    }
    w
}

fn rmse(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Summarizes evaluation records (RMSE rho/beta, std devs, average steps,
/// average IoU, correct percentage).
pub fn summarize(records: &[EvalRecord]) -> Result<MetricsSummary, RegionError> {
    if records.is_empty() {
        return Err(RegionError::EmptyRecords);
    }
    let correct: Vec<&EvalRecord> = records.iter().filter(|r| r.triggered_correct).collect();
    let n_correct = correct.len();
    let (avg_steps, avg_iou, rmse_rho, rmse_beta, std_rho, std_beta) = if n_correct > 0 {
        let rho_errs: Vec<f64> = correct.iter().map(|r| r.rho_error).collect();
        let beta_errs: Vec<f64> = correct.iter().map(|r| wrap_angle(r.beta_error)).collect();
        (
            correct.iter().map(|r| r.steps as f64).sum::<f64>() / n_correct as f64,
            correct.iter().map(|r| r.final_iou).sum::<f64>() / n_correct as f64,
            rmse(&rho_errs),
            rmse(&beta_errs),
            sample_std(&rho_errs),
            sample_std(&beta_errs),
        )
    } else {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(MetricsSummary {
        n_records: records.len(),
        n_correct,
        correct_pct: n_correct as f64 / records.len() as f64,
        avg_steps,
        avg_iou,
        rmse_rho,
        rmse_beta,
        std_rho,
        std_beta,
    })
}

/// Writes one CSV row per episode plus a final summary row. Columns are
/// fixed: `steps, final_iou, correct, rho_err, beta_err`; in the summary row
/// they carry average steps, average IoU, the correct fraction and the two
/// RMSE values.
pub fn write_eval_csv(
    path: &Path,
    records: &[EvalRecord],
    summary: &MetricsSummary,
) -> Result<(), RegionError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RegionError::Csv(e.to_string()))?;
    w.write_record(["steps", "final_iou", "correct", "rho_err", "beta_err"])
        .map_err(|e| RegionError::Csv(e.to_string()))?;
    for r in records {
        w.write_record([
            r.steps.to_string(),
            format!("{:.6}", r.final_iou),
            (r.triggered_correct as u8).to_string(),
            format!("{:.6}", r.rho_error),
            format!("{:.6}", r.beta_error),
        ])
        .map_err(|e| RegionError::Csv(e.to_string()))?;
    }
    w.write_record([
        format!("{:.4}", summary.avg_steps),
        format!("{:.6}", summary.avg_iou),
        format!("{:.6}", summary.correct_pct),
        format!("{:.6}", summary.rmse_rho),
        format!("{:.6}", summary.rmse_beta),
    ])
    .map_err(|e| RegionError::Csv(e.to_string()))?;
    w.flush().map_err(|e| RegionError::Csv(e.to_string()))
}

/// Reads back the per-episode rows written by [`write_eval_csv`] (the summary
/// row is dropped).
pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRecord>, RegionError> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| RegionError::Csv(e.to_string()))?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| RegionError::Csv(e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    // Last row is the summary.
    rows.pop();
    rows.into_iter()
        .map(|r| {
            let parse = |s: &str| s.parse::<f64>().map_err(|e| RegionError::Csv(e.to_string()));
            Ok(EvalRecord {
                steps: parse(&r[0])? as u32,
                final_iou: parse(&r[1])?,
                triggered_correct: parse(&r[2])? != 0.0,
                rho_error: parse(&r[3])?,
                beta_error: parse(&r[4])?,
            })
        })
        .collect()
}
