//! Unified sphere model for central catadioptric / fisheye cameras.
//!
//! A 3D point is first projected onto a unit sphere centered at the mirror
//! frame origin, then re-projected from a center shifted by `xi` along the
//! optical axis onto the normalized plane `z = 1`, and finally mapped to
//! pixels by the generalized camera matrix. `xi = 0` reduces the model to an
//! ordinary pinhole camera; `xi = 1` corresponds to a parabolic mirror.
//!
//! All geometry is double precision; the functions here are pure and safe to
//! call concurrently.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Threshold on the sphere-point z component below which a projection is
/// treated as "at infinity" (the normalized-plane division blows up).
pub const AT_INFINITY_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("cannot project a zero-norm point")]
    ZeroNorm,
    #[error("point projects to infinity under the sphere model")]
    AtInfinity,
    #[error("pixel has no real viewing ray under the sphere model")]
    OutOfFov,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("calibration file error: {0}")]
    CalibrationFile(String),
}

/// Intrinsic parameters of the unified sphere model.
///
/// `xi` is the unitless mirror parameter, `eta` the distance from the sphere
/// center to the image plane; `f1`, `f2` are focal lengths in pixels, `skew`
/// the unitless skew factor and `(u0, v0)` the principal point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub xi: f64,
    pub eta: f64,
    pub f1: f64,
    pub f2: f64,
    pub skew: f64,
    pub u0: f64,
    pub v0: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(0.0..=1.0).contains(&self.xi) || !self.xi.is_finite() {
            return Err(CameraError::InvalidIntrinsics(format!(
                "xi must lie in [0, 1], got {}",
                self.xi
            )));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(CameraError::InvalidIntrinsics(format!(
                "eta must be > 0, got {}",
                self.eta
            )));
        }
        if !(self.f1 > 0.0) || !(self.f2 > 0.0) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be > 0, got f1={} f2={}",
                self.f1, self.f2
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::InvalidIntrinsics(
                "image size must be nonzero".into(),
            ));
        }
        for (name, v) in [("skew", self.skew), ("u0", self.u0), ("v0", self.v0)] {
            if !v.is_finite() {
                return Err(CameraError::InvalidIntrinsics(format!(
                    "{name} must be finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Loads intrinsics from a calibration file with keys
    /// `xi, eta, f1, f2, skew, u0, v0, width, height`. Unknown keys are
    /// rejected.
    pub fn from_toml_file(path: &Path) -> Result<Self, CameraError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CameraError::CalibrationFile(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CameraError> {
        let cam: CameraIntrinsics =
            toml::from_str(text).map_err(|e| CameraError::CalibrationFile(e.to_string()))?;
        cam.validate()?;
        Ok(cam)
    }

    pub fn to_toml_file(&self, path: &Path) -> Result<(), CameraError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CameraError::CalibrationFile(e.to_string()))?;
        std::fs::write(path, text)
            .map_err(|e| CameraError::CalibrationFile(format!("{}: {e}", path.display())))
    }

    /// Combined focal scale `f * eta` applied on the normalized plane.
    #[inline]
    pub fn gamma1(&self) -> f64 {
        self.f1 * self.eta
    }

    #[inline]
    pub fn gamma2(&self) -> f64 {
        self.f2 * self.eta
    }
}

/// A 3D point or direction in the camera/world frame (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    #[inline]
    pub fn dot(&self, o: &Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(&self, o: &Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn scale(&self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }

    #[inline]
    pub fn add(&self, o: &Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    #[inline]
    pub fn sub(&self, o: &Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn normalized(&self) -> Point3 {
        let n = self.norm();
        self.scale(1.0 / n)
    }

    /// Rotates the point about the z (optical) axis by `theta` radians.
    pub fn rotate_z(&self, theta: f64) -> Point3 {
        let (s, c) = theta.sin_cos();
        Point3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// A point on the normalized image plane `z = 1` (unitless).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
}

impl NormalizedPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// A point in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn in_bounds(&self, cam: &CameraIntrinsics) -> bool {
        self.u >= 0.0 && self.v >= 0.0 && self.u < cam.width as f64 && self.v < cam.height as f64
    }
}

/// Projects a 3D point onto the unit sphere and shifts the frame to the
/// re-projection center: returns `(x/r, y/r, z/r + xi)` with `r = ||p||`.
/// The antipodal point closer to `p` is always the one kept.
pub fn lift_to_sphere(p: &Point3, cam: &CameraIntrinsics) -> Result<Point3, CameraError> {
    let r = p.norm();
    if r <= 0.0 || !r.is_finite() {
        return Err(CameraError::ZeroNorm);
    }
    Ok(Point3::new(p.x / r, p.y / r, p.z / r + cam.xi))
}

/// Projects a 3D point to the normalized image plane through the sphere.
pub fn project_normalized(
    p: &Point3,
    cam: &CameraIntrinsics,
) -> Result<NormalizedPoint, CameraError> {
    let n = lift_to_sphere(p, cam)?;
    if n.z <= AT_INFINITY_EPS {
        return Err(CameraError::AtInfinity);
    }
    Ok(NormalizedPoint::new(n.x / n.z, n.y / n.z))
}

/// Applies the generalized camera matrix to a normalized-plane point:
/// `u = f1*eta*x + f1*eta*skew*y + u0`, `v = f2*eta*y + v0`.
pub fn normalized_to_pixel(p: &NormalizedPoint, cam: &CameraIntrinsics) -> PixelPoint {
    let g1 = cam.gamma1();
    let g2 = cam.gamma2();
    PixelPoint::new(g1 * p.x + g1 * cam.skew * p.y + cam.u0, g2 * p.y + cam.v0)
}

/// Full projection from world point to pixel coordinates.
pub fn project_pixel(p: &Point3, cam: &CameraIntrinsics) -> Result<PixelPoint, CameraError> {
    Ok(normalized_to_pixel(&project_normalized(p, cam)?, cam))
}

/// Inverse mapping from a pixel to the unit viewing ray in the camera frame.
///
/// For every direction `d` returned here and any `t > 0`,
/// `project_pixel(t * d)` reproduces the pixel to well below 1e-9 px.
pub fn pixel_to_ray(px: &PixelPoint, cam: &CameraIntrinsics) -> Result<Point3, CameraError> {
    let my = (px.v - cam.v0) / cam.gamma2();
    let mx = (px.u - cam.u0) / cam.gamma1() - cam.skew * my;
    let r2 = mx * mx + my * my;
    // Solve for the sphere point whose shifted projection is (mx, my): with
    // t = n_z + xi, unit norm gives t^2 (r2 + 1) - 2 xi t + xi^2 - 1 = 0.
    let disc = 1.0 + r2 * (1.0 - cam.xi * cam.xi);
    if disc < 0.0 {
        return Err(CameraError::OutOfFov);
    }
    let t = (cam.xi + disc.sqrt()) / (r2 + 1.0);
    if t <= AT_INFINITY_EPS {
        return Err(CameraError::OutOfFov);
    }
    // (mx*t, my*t, t - xi) is already unit by construction.
    Ok(Point3::new(mx * t, my * t, t - cam.xi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_cam(xi: f64) -> CameraIntrinsics {
        CameraIntrinsics {
            xi,
            eta: 1.0,
            f1: 200.0,
            f2: 200.0,
            skew: 0.0,
            u0: 512.0,
            v0: 512.0,
            width: 1024,
            height: 1024,
        }
    }

    #[test]
    fn lift_optical_axis_point() {
        let cam = test_cam(0.5);
        let n = lift_to_sphere(&Point3::new(0.0, 0.0, 1.0), &cam).unwrap();
        assert_eq!(n, Point3::new(0.0, 0.0, 1.5));
    }

    #[test]
    fn lift_pinhole_reduction() {
        let cam = test_cam(0.0);
        let n = lift_to_sphere(&Point3::new(3.0, 0.0, 4.0), &cam).unwrap();
        assert_relative_eq!(n.x, 0.6, max_relative = 1e-15);
        assert_relative_eq!(n.z, 0.8, max_relative = 1e-15);
    }

    #[test]
    fn lift_parabolic_derived() {
        // Independent scalar arithmetic: r = sqrt(2), third component 1/sqrt(2) + 1.
        let cam = test_cam(1.0);
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        let n = lift_to_sphere(&Point3::new(1.0, 0.0, 1.0), &cam).unwrap();
        assert_relative_eq!(n.x, inv_sqrt2, max_relative = 1e-14);
        assert_relative_eq!(n.y, 0.0);
        assert_relative_eq!(n.z, inv_sqrt2 + 1.0, max_relative = 1e-14);
    }

    #[test]
    fn lift_stays_on_unit_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for xi in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let cam = test_cam(xi);
            for _ in 0..200 {
                let p = Point3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                );
                if p.norm() < 1e-3 {
                    continue;
                }
                let n = lift_to_sphere(&p, &cam).unwrap();
                let resid = (n.x * n.x + n.y * n.y + (n.z - xi) * (n.z - xi) - 1.0).abs();
                assert!(resid < 1e-12, "sphere residual {resid}");
            }
        }
    }

    #[test]
    fn lift_rejects_zero_norm() {
        let cam = test_cam(0.5);
        assert_eq!(
            lift_to_sphere(&Point3::new(0.0, 0.0, 0.0), &cam),
            Err(CameraError::ZeroNorm)
        );
    }

    #[test]
    fn project_on_axis() {
        for xi in [0.0, 0.3, 1.0] {
            let cam = test_cam(xi);
            let m = project_normalized(&Point3::new(0.0, 0.0, 5.0), &cam).unwrap();
            assert_eq!(m, NormalizedPoint::new(0.0, 0.0));
        }
    }

    #[test]
    fn project_pinhole_case() {
        let cam = test_cam(0.0);
        let m = project_normalized(&Point3::new(2.0, 0.0, 2.0), &cam).unwrap();
        assert_relative_eq!(m.x, 1.0, max_relative = 1e-15);
        assert_relative_eq!(m.y, 0.0);
    }

    #[test]
    fn project_parabolic_derived() {
        // Chain of the lift and plane division by hand:
        // (1/sqrt(2)) / (1/sqrt(2) + 1) = sqrt(2) - 1.
        let cam = test_cam(1.0);
        let m = project_normalized(&Point3::new(1.0, 0.0, 1.0), &cam).unwrap();
        let expect = 2.0_f64.sqrt() - 1.0;
        assert_relative_eq!(m.x, expect, max_relative = 1e-14);
        assert_relative_eq!(m.y, 0.0);
    }

    #[test]
    fn project_behind_camera_is_at_infinity() {
        let cam = test_cam(0.0);
        assert_eq!(
            project_normalized(&Point3::new(0.0, 0.0, -1.0), &cam),
            Err(CameraError::AtInfinity)
        );
    }

    #[test]
    fn pinhole_degeneracy_exact() {
        let cam = test_cam(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = Point3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(0.05..10.0),
            );
            let m = project_normalized(&p, &cam).unwrap();
            assert_relative_eq!(m.x, p.x / p.z, max_relative = 1e-15);
            assert_relative_eq!(m.y, p.y / p.z, max_relative = 1e-15);
        }
    }

    #[test]
    fn pixel_mapping_principal_point() {
        let cam = CameraIntrinsics {
            u0: 320.0,
            v0: 240.0,
            ..test_cam(0.5)
        };
        let px = normalized_to_pixel(&NormalizedPoint::new(0.0, 0.0), &cam);
        assert_eq!(px, PixelPoint::new(320.0, 240.0));
    }

    #[test]
    fn pixel_mapping_unit_focal() {
        let cam = CameraIntrinsics {
            f1: 100.0,
            f2: 100.0,
            u0: 0.0,
            v0: 0.0,
            ..test_cam(0.5)
        };
        let px = normalized_to_pixel(&NormalizedPoint::new(1.0, 0.0), &cam);
        assert_relative_eq!(px.u, 100.0);
        assert_relative_eq!(px.v, 0.0);
    }

    #[test]
    fn pixel_mapping_composed_derived() {
        // Composing the parabolic case with the camera matrix by hand:
        // 200 * (sqrt(2) - 1) + 512.
        let cam = test_cam(1.0);
        let px = project_pixel(&Point3::new(1.0, 0.0, 1.0), &cam).unwrap();
        let expect = 200.0 * (2.0_f64.sqrt() - 1.0) + 512.0;
        assert_relative_eq!(px.u, expect, max_relative = 1e-13);
        assert_relative_eq!(px.v, 512.0);
        assert_relative_eq!(px.u, 594.84, epsilon = 0.005);
    }

    #[test]
    fn ray_at_principal_point_is_axis() {
        for xi in [0.0, 0.5, 1.0] {
            let cam = test_cam(xi);
            let d = pixel_to_ray(&PixelPoint::new(512.0, 512.0), &cam).unwrap();
            assert_relative_eq!(d.x, 0.0);
            assert_relative_eq!(d.y, 0.0);
            assert_relative_eq!(d.z, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn ray_pinhole_back_projection() {
        let cam = test_cam(0.0);
        let px = PixelPoint::new(700.0, 400.0);
        let d = pixel_to_ray(&px, &cam).unwrap();
        let expect = Point3::new(
            (px.u - cam.u0) / cam.gamma1(),
            (px.v - cam.v0) / cam.gamma2(),
            1.0,
        )
        .normalized();
        assert_relative_eq!(d.x, expect.x, max_relative = 1e-12);
        assert_relative_eq!(d.y, expect.y, max_relative = 1e-12);
        assert_relative_eq!(d.z, expect.z, max_relative = 1e-12);
    }

    #[test]
    fn round_trip_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for xi in [0.0, 0.25, 0.5, 0.75, 1.0] {
            for skew in [0.0, 0.01] {
                let cam = CameraIntrinsics {
                    skew,
                    ..test_cam(xi)
                };
                let mut checked = 0;
                while checked < 200 {
                    let p = Point3::new(
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    );
                    if p.norm() < 0.1 {
                        continue;
                    }
                    let px = match project_pixel(&p, &cam) {
                        Ok(px) if px.in_bounds(&cam) => px,
                        _ => continue,
                    };
                    let d = pixel_to_ray(&px, &cam).unwrap();
                    // Direction parallel to the original point.
                    let cos = d.dot(&p) / p.norm();
                    assert!(
                        (1.0 - cos).abs() < 1e-9,
                        "angle error at xi={xi}: 1-cos={}",
                        1.0 - cos
                    );
                    // Pixel round trip below 1e-9 px.
                    let px2 = project_pixel(&d, &cam).unwrap();
                    assert!((px2.u - px.u).abs() < 1e-9 && (px2.v - px.v).abs() < 1e-9);
                    checked += 1;
                }
            }
        }
    }

    #[test]
    fn radial_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for xi in [0.0, 0.5, 1.0] {
            let cam = test_cam(xi);
            for _ in 0..200 {
                let p = Point3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(0.2..5.0),
                );
                let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let m = match project_normalized(&p, &cam) {
                    Ok(m) => m,
                    Err(_) => continue,
                };
                let mr = match project_normalized(&p.rotate_z(theta), &cam) {
                    Ok(m) => m,
                    Err(_) => continue,
                };
                let (s, c) = theta.sin_cos();
                let expect = NormalizedPoint::new(c * m.x - s * m.y, s * m.x + c * m.y);
                assert!(
                    (mr.x - expect.x).abs() < 1e-12 && (mr.y - expect.y).abs() < 1e-12,
                    "rotation mismatch"
                );
                let n0 = (m.x * m.x + m.y * m.y).sqrt();
                let n1 = (mr.x * mr.x + mr.y * mr.y).sqrt();
                assert!((n0 - n1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn calibration_round_trip() {
        let cam = test_cam(0.9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calibration.toml");
        cam.to_toml_file(&path).unwrap();
        let loaded = CameraIntrinsics::from_toml_file(&path).unwrap();
        assert_eq!(cam, loaded);
    }

    #[test]
    fn calibration_rejects_unknown_keys() {
        let text = "xi=0.9\neta=1.0\nf1=100.0\nf2=100.0\nskew=0.0\nu0=512.0\nv0=512.0\nwidth=1024\nheight=1024\nbogus=1\n";
        assert!(matches!(
            CameraIntrinsics::from_toml_str(text),
            Err(CameraError::CalibrationFile(_))
        ));
    }

    #[test]
    fn calibration_rejects_invalid_values() {
        let text = "xi=1.5\neta=1.0\nf1=100.0\nf2=100.0\nskew=0.0\nu0=512.0\nv0=512.0\nwidth=1024\nheight=1024\n";
        assert!(matches!(
            CameraIntrinsics::from_toml_str(text),
            Err(CameraError::InvalidIntrinsics(_))
        ));
    }
}
