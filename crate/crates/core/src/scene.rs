//! Synthetic omnidirectional scenes with a single pedestrian proxy.
//!
//! Stands in for a physical catadioptric dataset: a textured floor, a
//! cylindrical wall and a ceiling viewed by a camera at the origin with the
//! optical axis pointing up, plus an optional textured vertical box as the
//! pedestrian. Images are ray-cast per pixel through the inverse sphere
//! model, so rendered geometry and projected ground truth agree by
//! construction. Rendering is deterministic and embarrassingly parallel over
//! pixels.

use crate::camera::{pixel_to_ray, CameraIntrinsics, PixelPoint, Point3};
use crate::env::CylBox;
use crate::parallel::{map_range, ExecMode};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene has no pedestrian")]
    NoPedestrian,
    #[error("image i/o error: {0}")]
    ImageIo(String),
    #[error("index file error: {0}")]
    IndexFile(String),
}

/// 8-bit grayscale omnidirectional image.
#[derive(Debug, Clone, PartialEq)]
pub struct OmniImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl OmniImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), (width * height) as usize);
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[(y * self.width + x) as usize]
    }

    /// Bilinear sample at continuous pixel coordinates; pixel centers sit at
    /// integer + 0.5. Clamps at the border.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> f64 {
        let x = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as u32;
        let y0 = y.floor() as u32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p00 = self.get(x0, y0) as f64;
        let p10 = self.get(x1, y0) as f64;
        let p01 = self.get(x0, y1) as f64;
        let p11 = self.get(x1, y1) as f64;
        p00 * (1.0 - fx) * (1.0 - fy)
            + p10 * fx * (1.0 - fy)
            + p01 * (1.0 - fx) * fy
            + p11 * fx * fy
    }

    pub fn save_png(&self, path: &Path) -> Result<(), SceneError> {
        let img = image::GrayImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer size matches dimensions");
        img.save(path)
            .map_err(|e| SceneError::ImageIo(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self, SceneError> {
        let img = image::open(path)
            .map_err(|e| SceneError::ImageIo(format!("{}: {e}", path.display())))?
            .to_luma8();
        Ok(Self {
            width: img.width(),
            height: img.height(),
            data: img.into_raw(),
        })
    }
}

/// Textured vertical box standing on the floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedestrianProxy {
    /// Radial distance of the proxy center.
    pub rho: f64,
    pub beta: f64,
    pub width: f64,
    pub depth: f64,
    pub height: f64,
}

/// One synthetic scene. All azimuthal texture content is keyed to
/// `azimuth_offset`, so rotating the offset together with the pedestrian
/// rotates the whole world rigidly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub pedestrian: Option<PedestrianProxy>,
    /// Floor plane height (camera sits at the origin, so this is minus the
    /// mounting height).
    pub floor_z: f64,
    pub ceiling_z: f64,
    pub wall_radius: f64,
    pub light: f64,
    pub azimuth_offset: f64,
    pub floor_ring_scale: f64,
    pub floor_sectors: u32,
    pub wall_stripes: u32,
    pub torso_shade: u8,
}

impl Scene {
    pub fn without_pedestrian(&self) -> Scene {
        Scene {
            pedestrian: None,
            ..self.clone()
        }
    }

    /// Rotates the whole world (textures and pedestrian) by `theta`.
    pub fn rotated(&self, theta: f64) -> Scene {
        let mut s = self.clone();
        s.azimuth_offset = (s.azimuth_offset + theta).rem_euclid(TAU);
        if let Some(p) = &mut s.pedestrian {
            p.beta = (p.beta + theta).rem_euclid(TAU);
        }
        s
    }

    /// The cylindrical box exactly enclosing the proxy: the billboard through
    /// the proxy's near face, which bounds the silhouette both in azimuth and
    /// radially (the proxy top must sit above the camera for the radial
    /// argument to hold; the generator enforces that).
    pub fn gt_box(&self) -> Result<CylBox, SceneError> {
        let p = self.pedestrian.as_ref().ok_or(SceneError::NoPedestrian)?;
        Ok(CylBox::new(
            p.rho - 0.5 * p.depth,
            p.beta,
            self.floor_z,
            p.width,
            p.height,
        ))
    }

    fn shade_floor(&self, x: f64, y: f64) -> f64 {
        let rho = x.hypot(y);
        let phi = (y.atan2(x) - self.azimuth_offset).rem_euclid(TAU);
        let ring = (rho / self.floor_ring_scale).floor() as i64;
        let sector = (phi / (TAU / self.floor_sectors as f64)).floor() as i64;
        if (ring + sector).rem_euclid(2) == 0 {
            92.0
        } else {
            142.0
        }
    }

    fn shade_wall(&self, x: f64, y: f64, z: f64) -> f64 {
        let phi = (y.atan2(x) - self.azimuth_offset).rem_euclid(TAU);
        let stripe = (phi / (TAU / self.wall_stripes as f64)).floor() as i64;
        let base = if stripe.rem_euclid(2) == 0 { 62.0 } else { 105.0 };
        // A lighter band near the top third of the wall.
        let frac = (z - self.floor_z) / (self.ceiling_z - self.floor_z);
        if frac > 0.7 {
            base + 22.0
        } else {
            base
        }
    }

    fn shade_proxy(&self, y_local: f64, z_hit: f64, p: &PedestrianProxy) -> f64 {
        let zf = ((z_hit - self.floor_z) / p.height).clamp(0.0, 1.0);
        let yf = y_local / (0.5 * p.width); // -1 .. 1 across the width
        if zf < 0.45 {
            // Two dark legs with a lighter gap between them.
            if yf.abs() > 0.15 && yf.abs() < 0.85 {
                42.0
            } else {
                70.0
            }
        } else if zf < 0.8 {
            let base = self.torso_shade as f64;
            if yf.abs() < 0.12 {
                base - 45.0
            } else {
                base
            }
        } else if yf.abs() < 0.55 {
            160.0
        } else {
            58.0
        }
    }

    /// Shades the nearest hit along the ray `d` from the origin.
    pub fn shade_ray(&self, d: &Point3) -> u8 {
        let mut best_t = f64::INFINITY;
        let mut shade = 8.0;

        if d.z < -1e-12 {
            let t = self.floor_z / d.z;
            if t < best_t {
                best_t = t;
                shade = self.shade_floor(t * d.x, t * d.y);
            }
        }
        if d.z > 1e-12 {
            let t = self.ceiling_z / d.z;
            if t < best_t {
                best_t = t;
                shade = 124.0;
            }
        }
        let dxy = d.x.hypot(d.y);
        if dxy > 1e-12 {
            let t = self.wall_radius / dxy;
            if t < best_t {
                best_t = t;
                shade = self.shade_wall(t * d.x, t * d.y, t * d.z);
            }
        }
        if let Some(p) = &self.pedestrian {
            // Slab test in the proxy frame (rotated so the proxy faces +x).
            let dl = d.rotate_z(-p.beta);
            let x_range = (p.rho - 0.5 * p.depth, p.rho + 0.5 * p.depth);
            let y_range = (-0.5 * p.width, 0.5 * p.width);
            let z_range = (self.floor_z, self.floor_z + p.height);
            let mut t_enter = 0.0_f64;
            let mut t_exit = f64::INFINITY;
            let mut ok = true;
            for (dir, (lo, hi)) in [
                (dl.x, x_range),
                (dl.y, y_range),
                (dl.z, z_range),
            ] {
                if dir.abs() < 1e-15 {
                    if 0.0 < lo || 0.0 > hi {
                        ok = false;
                        break;
                    }
                } else {
                    let (t0, t1) = ((lo / dir).min(hi / dir), (lo / dir).max(hi / dir));
                    t_enter = t_enter.max(t0);
                    t_exit = t_exit.min(t1);
                    if t_enter > t_exit {
                        ok = false;
                        break;
                    }
                }
            }
            if ok && t_enter > 1e-9 && t_enter < best_t {
                let hit = dl.scale(t_enter);
                shade = self.shade_proxy(hit.y, hit.z, p);
            }
        }
        (shade * self.light).round().clamp(0.0, 255.0) as u8
    }
}

/// Renders the scene with the default execution mode.
pub fn render_scene(scene: &Scene, cam: &CameraIntrinsics) -> OmniImage {
    render_scene_mode(scene, cam, ExecMode::default())
}

/// Renders the scene, ray-casting one viewing ray per pixel center.
pub fn render_scene_mode(scene: &Scene, cam: &CameraIntrinsics, mode: ExecMode) -> OmniImage {
    let (w, h) = (cam.width, cam.height);
    let rows = map_range(h as usize, mode, |j| {
        let mut row = vec![0u8; w as usize];
        for (i, px) in row.iter_mut().enumerate() {
            let p = PixelPoint::new(i as f64 + 0.5, j as f64 + 0.5);
            *px = match pixel_to_ray(&p, cam) {
                Ok(d) => scene.shade_ray(&d),
                Err(_) => 0,
            };
        }
        row
    });
    OmniImage::new(w, h, rows.concat())
}

/// Scene randomization ranges for dataset generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGenConfig {
    pub cam_height: f64,
    pub ceiling_above: f64,
    pub wall_radius: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub ped_width: f64,
    pub ped_width_jitter: f64,
    pub ped_height: f64,
    pub ped_height_jitter: f64,
    pub ped_depth: f64,
    pub negative_fraction: f64,
    pub light_min: f64,
    pub light_max: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            cam_height: 1.5,
            ceiling_above: 1.0,
            wall_radius: 5.0,
            rho_min: 1.5,
            rho_max: 3.5,
            ped_width: 0.5,
            ped_width_jitter: 0.06,
            ped_height: 1.7,
            ped_height_jitter: 0.1,
            ped_depth: 0.1,
            negative_fraction: 0.15,
            light_min: 0.78,
            light_max: 1.0,
        }
    }
}

impl SceneGenConfig {
    /// The radial enclosure argument for [`Scene::gt_box`] needs the proxy
    /// top above the camera.
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.ped_height - self.ped_height_jitter <= self.cam_height + 0.05 {
            return Err(SceneError::IndexFile(
                "pedestrian height range must clear the camera height".into(),
            ));
        }
        Ok(())
    }
}

/// Samples one randomized scene; `force_positive` overrides the negative
/// fraction (used when ground truth is required).
pub fn sample_scene<R: Rng>(cfg: &SceneGenConfig, force_positive: bool, rng: &mut R) -> Scene {
    let negative = !force_positive && rng.gen::<f64>() < cfg.negative_fraction;
    let pedestrian = if negative {
        None
    } else {
        Some(PedestrianProxy {
            rho: rng.gen_range(cfg.rho_min..=cfg.rho_max),
            beta: rng.gen_range(0.0..TAU),
            width: cfg.ped_width + rng.gen_range(-1.0..=1.0) * cfg.ped_width_jitter,
            depth: cfg.ped_depth,
            height: cfg.ped_height + rng.gen_range(-1.0..=1.0) * cfg.ped_height_jitter,
        })
    };
    Scene {
        pedestrian,
        floor_z: -cfg.cam_height,
        ceiling_z: cfg.ceiling_above,
        wall_radius: cfg.wall_radius,
        light: rng.gen_range(cfg.light_min..=cfg.light_max),
        azimuth_offset: rng.gen_range(0.0..TAU),
        floor_ring_scale: rng.gen_range(0.45..0.85),
        floor_sectors: rng.gen_range(8..16),
        wall_stripes: rng.gen_range(10..22),
        torso_shade: rng.gen_range(175..=235),
    }
}

/// Dataset split tag; train and test derive disjoint per-scene seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Deterministic per-scene seed; splitmix64 over (master, split, index)
/// keeps the two splits disjoint.
pub fn scene_seed(master: u64, split: Split, index: u32) -> u64 {
    let tag = match split {
        Split::Train => 0x9e37_79b9_u64,
        Split::Test => 0x85eb_ca6b_u64,
    };
    let mut z = master
        .wrapping_add(tag.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add((index as u64).wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates `n` scenes for one split, deterministically per seed.
pub fn generate_split_scenes(
    n: usize,
    split: Split,
    cfg: &SceneGenConfig,
    master_seed: u64,
) -> Vec<Scene> {
    use rand::SeedableRng;
    (0..n)
        .map(|i| {
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(scene_seed(master_seed, split, i as u32));
            sample_scene(cfg, false, &mut rng)
        })
        .collect()
}

/// One dataset entry as stored in the index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    /// Image path relative to the index file.
    pub image: String,
    /// 1 when a pedestrian is present.
    pub label: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt: Option<CylBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub records: Vec<DatasetRecord>,
}

impl DatasetIndex {
    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        let text =
            toml::to_string_pretty(self).map_err(|e| SceneError::IndexFile(e.to_string()))?;
        std::fs::write(path, text)
            .map_err(|e| SceneError::IndexFile(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SceneError::IndexFile(format!("{}: {e}", path.display())))?;
        let idx: DatasetIndex =
            toml::from_str(&text).map_err(|e| SceneError::IndexFile(e.to_string()))?;
        for r in &idx.records {
            if (r.label == 1) != r.gt.is_some() {
                return Err(SceneError::IndexFile(format!(
                    "record {}: label and ground truth disagree",
                    r.image
                )));
            }
        }
        Ok(idx)
    }
}
