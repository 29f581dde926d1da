//! Conic images of 3D straight lines under the sphere model.
//!
//! A central catadioptric camera maps a 3D line to a conic curve on the
//! normalized plane. The line is represented by its moment `l = x1 x x2`
//! (normal of the interpretation plane through the projection center); the
//! conic matrix is built from `l` and `xi`. Segment images are sampled by
//! interpolating the 3D segment and projecting each point, which selects the
//! arc belonging to the segment rather than its complement and is robust to
//! arcs that are not monotone in image coordinates.

use crate::camera::{
    normalized_to_pixel, project_normalized, CameraError, CameraIntrinsics, NormalizedPoint,
    PixelPoint, Point3,
};
use thiserror::Error;

/// Default number of samples for a segment curve before adaptive refinement.
pub const DEFAULT_SEGMENT_SAMPLES: usize = 64;
/// Default maximum pixel gap between consecutive curve samples.
pub const DEFAULT_MAX_GAP_PX: f64 = 1.0;
/// Hard cap on adaptive refinement.
const MAX_SEGMENT_SAMPLES: usize = 1 << 14;

#[derive(Debug, Error, PartialEq)]
pub enum ConicError {
    #[error("line moment has zero norm")]
    ZeroMoment,
    #[error("segment endpoints are collinear with the projection center")]
    DegenerateSegment,
    #[error("segment projection failed: {0}")]
    Projection(#[from] CameraError),
}

/// Moment vector `l = x1 x x2` of a 3D line; perpendicular to the
/// interpretation plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineMoment {
    pub vec: Point3,
}

impl LineMoment {
    pub fn new(vec: Point3) -> Result<Self, ConicError> {
        if vec.norm() <= 0.0 || !vec.is_finite() {
            return Err(ConicError::ZeroMoment);
        }
        Ok(Self { vec })
    }

    /// Builds the moment from two points on the line.
    pub fn from_points(x1: &Point3, x2: &Point3) -> Result<Self, ConicError> {
        Self::new(x1.cross(x2)).map_err(|_| ConicError::DegenerateSegment)
    }

    /// Signed incidence `l . x`; zero (up to rounding) for points on the line's
    /// interpretation plane.
    pub fn incidence(&self, x: &Point3) -> f64 {
        self.vec.dot(x)
    }
}

/// Symmetric 3x3 conic matrix of a line's image on the normalized plane,
/// scaled so the largest entry magnitude is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LineConic {
    m: [[f64; 3]; 3],
}

impl LineConic {
    pub fn entries(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    /// Evaluates `[x y 1] C [x y 1]^T`; zero for points on the conic.
    pub fn residual(&self, p: &NormalizedPoint) -> f64 {
        let v = [p.x, p.y, 1.0];
        let mut acc = 0.0;
        for (i, row) in self.m.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                acc += v[i] * c * v[j];
            }
        }
        acc
    }
}

/// Builds the conic matrix of a 3D line's image.
///
/// Lines coplanar with the optical axis (`l3 = 0`) project to the straight
/// line `l1*x + l2*y = 0` for every `xi`; they are emitted as the rank-1
/// conic of that line, which coincides with the general form after
/// normalization wherever both are defined.
pub fn line_conic(l: &LineMoment, cam: &CameraIntrinsics) -> LineConic {
    let (l1, l2, l3) = (l.vec.x, l.vec.y, l.vec.z);
    let m = if l3 == 0.0 {
        [
            [l1 * l1, l1 * l2, 0.0],
            [l1 * l2, l2 * l2, 0.0],
            [0.0, 0.0, 0.0],
        ]
    } else {
        let xi2 = cam.xi * cam.xi;
        let a = 1.0 - xi2;
        [
            [l1 * l1 * a - l3 * l3 * xi2, l1 * l2 * a, l1 * l3],
            [l1 * l2 * a, l2 * l2 * a - l3 * l3 * xi2, l2 * l3],
            [l1 * l3, l2 * l3, l3 * l3],
        ]
    };
    let mut peak = 0.0_f64;
    for row in &m {
        for c in row {
            peak = peak.max(c.abs());
        }
    }
    let inv = 1.0 / peak;
    let mut n = m;
    for row in &mut n {
        for c in row.iter_mut() {
            *c *= inv;
        }
    }
    LineConic { m: n }
}

/// Sampled image of a 3D line segment: ordered points on the conic arc that
/// corresponds to the segment, endpoints included.
#[derive(Debug, Clone)]
pub struct CurveSegment {
    pub samples: Vec<NormalizedPoint>,
    pub endpoints: (NormalizedPoint, NormalizedPoint),
}

impl CurveSegment {
    /// The samples mapped through the camera matrix.
    pub fn pixel_polyline(&self, cam: &CameraIntrinsics) -> Vec<PixelPoint> {
        self.samples
            .iter()
            .map(|p| normalized_to_pixel(p, cam))
            .collect()
    }
}

/// Samples the image of the 3D segment `x1 -> x2` with at least `n_samples`
/// points, then doubles the density until consecutive samples are less than
/// [`DEFAULT_MAX_GAP_PX`] apart in pixel coordinates.
pub fn segment_curve(
    x1: &Point3,
    x2: &Point3,
    cam: &CameraIntrinsics,
    n_samples: usize,
) -> Result<CurveSegment, ConicError> {
    segment_curve_with_gap(x1, x2, cam, n_samples, DEFAULT_MAX_GAP_PX)
}

/// As [`segment_curve`] with an explicit pixel-gap target; coarser gaps keep
/// downstream polygon work cheap when sub-pixel fidelity is not needed.
pub fn segment_curve_with_gap(
    x1: &Point3,
    x2: &Point3,
    cam: &CameraIntrinsics,
    n_samples: usize,
    max_gap_px: f64,
) -> Result<CurveSegment, ConicError> {
    LineMoment::from_points(x1, x2)?;
    let mut n = n_samples.max(2);
    loop {
        let mut samples = Vec::with_capacity(n);
        let mut px_prev: Option<PixelPoint> = None;
        let mut max_gap = 0.0_f64;
        for i in 0..n {
            let t = i as f64 / (n - 1) as f64;
            let p = Point3::new(
                x1.x + t * (x2.x - x1.x),
                x1.y + t * (x2.y - x1.y),
                x1.z + t * (x2.z - x1.z),
            );
            let m = project_normalized(&p, cam)?;
            let px = normalized_to_pixel(&m, cam);
            if let Some(prev) = px_prev {
                let gap = ((px.u - prev.u).powi(2) + (px.v - prev.v).powi(2)).sqrt();
                max_gap = max_gap.max(gap);
            }
            px_prev = Some(px);
            samples.push(m);
        }
        if max_gap < max_gap_px || n >= MAX_SEGMENT_SAMPLES {
            let endpoints = (samples[0], samples[n - 1]);
            return Ok(CurveSegment { samples, endpoints });
        }
        n *= 2;
    }
}
