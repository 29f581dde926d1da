//! RL environment: a 3D bounding box in cylindrical world coordinates acting
//! on an omnidirectional image.
//!
//! The agent moves the box with eight position/dimension actions plus a
//! terminal trigger. States are the image cropped to the pixel envelope of
//! the box's four projected (distorted) edges; rewards follow the
//! sign-of-IoU-change scheme with a +-alpha trigger bonus.

use crate::camera::{project_pixel, CameraError, CameraIntrinsics};
use crate::conic::segment_curve_with_gap;
use crate::region::{
    distorted_iou, region_from_box_with_gap, DistortedRegion, PixelRect, RegionError,
};
use crate::scene::OmniImage;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("box envelope does not intersect the image")]
    EmptyEnvelope,
}

/// Box parameters live on a fixed 1e-9 grid so that action/inverse-action
/// pairs cancel exactly instead of accumulating float dust.
fn quantize(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

fn wrap_tau(beta: f64) -> f64 {
    let w = beta.rem_euclid(TAU);
    if w == TAU {
        0.0
    } else {
        w
    }
}

/// 3D bounding box in cylindrical world coordinates: radial distance `rho`,
/// azimuth `beta` (wrapped to `[0, 2pi)`), base height `z` (fixed per scene),
/// metric width `w` and height `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylBox {
    pub rho: f64,
    pub beta: f64,
    pub z: f64,
    pub w: f64,
    pub h: f64,
}

impl CylBox {
    pub fn new(rho: f64, beta: f64, z: f64, w: f64, h: f64) -> Self {
        Self {
            rho: quantize(rho),
            beta: quantize(wrap_tau(beta)),
            z: quantize(z),
            w: quantize(w),
            h: quantize(h),
        }
    }

    /// The four corners of the vertical planar rectangle: centered at
    /// `(rho cos b, rho sin b, z + h/2)`, perpendicular to the radial
    /// direction, spanning `w` along the horizontal tangent and `h`
    /// vertically. Order: bottom-left, bottom-right, top-left, top-right,
    /// so the edge cycle is (0,1), (1,3), (3,2), (2,0).
    pub fn corners(&self) -> [crate::camera::Point3; 4] {
        use crate::camera::Point3;
        let (sb, cb) = self.beta.sin_cos();
        let cx = self.rho * cb;
        let cy = self.rho * sb;
        let (tx, ty) = (-sb, cb);
        let hw = 0.5 * self.w;
        let zb = self.z;
        let zt = self.z + self.h;
        [
            Point3::new(cx - hw * tx, cy - hw * ty, zb),
            Point3::new(cx + hw * tx, cy + hw * ty, zb),
            Point3::new(cx - hw * tx, cy - hw * ty, zt),
            Point3::new(cx + hw * tx, cy + hw * ty, zt),
        ]
    }
}

/// The nine agent actions. Variant order fixes the Q-value output indexing
/// and the greedy tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    RhoInc,
    RhoDec,
    BetaInc,
    BetaDec,
    WidthInc,
    WidthDec,
    HeightInc,
    HeightDec,
    Trigger,
}

impl Action {
    pub const ALL: [Action; 9] = [
        Action::RhoInc,
        Action::RhoDec,
        Action::BetaInc,
        Action::BetaDec,
        Action::WidthInc,
        Action::WidthDec,
        Action::HeightInc,
        Action::HeightDec,
        Action::Trigger,
    ];

    pub const COUNT: usize = 9;

    pub fn index(&self) -> usize {
        Action::ALL.iter().position(|a| a == self).unwrap()
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    pub fn is_trigger(&self) -> bool {
        matches!(self, Action::Trigger)
    }
}

/// Per-action parameter increments.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSteps {
    pub rho: f64,
    pub beta: f64,
    pub w: f64,
    pub h: f64,
}

impl Default for ActionSteps {
    fn default() -> Self {
        Self {
            rho: 0.1,
            beta: 0.05,
            w: 0.05,
            h: 0.05,
        }
    }
}

/// Allowed parameter ranges; actions exceeding them clamp instead of failing.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvBounds {
    pub rho_min: f64,
    pub rho_max: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub h_min: f64,
    pub h_max: f64,
}

impl Default for EnvBounds {
    fn default() -> Self {
        Self {
            rho_min: 1.0,
            rho_max: 4.5,
            w_min: 0.2,
            w_max: 1.4,
            h_min: 0.8,
            h_max: 2.4,
        }
    }
}

impl EnvBounds {
    pub fn clamp_box(&self, b: CylBox) -> CylBox {
        CylBox {
            rho: b.rho.clamp(self.rho_min, self.rho_max),
            beta: b.beta,
            z: b.z,
            w: b.w.clamp(self.w_min, self.w_max),
            h: b.h.clamp(self.h_min, self.h_max),
        }
    }
}

/// Applies one movement action: exactly one parameter changes by its step
/// size (clamped to bounds); `z` never changes.
///
/// Panics if called with the trigger action, which is not a box update.
pub fn apply_action(b: &CylBox, a: Action, steps: &ActionSteps, bounds: &EnvBounds) -> CylBox {
    assert!(!a.is_trigger(), "apply_action called with the trigger");
    let mut nb = *b;
    match a {
        Action::RhoInc => nb.rho = quantize(b.rho + steps.rho),
        Action::RhoDec => nb.rho = quantize(b.rho - steps.rho),
        Action::BetaInc => nb.beta = quantize(wrap_tau(b.beta + steps.beta)),
        Action::BetaDec => nb.beta = quantize(wrap_tau(b.beta - steps.beta)),
        Action::WidthInc => nb.w = quantize(b.w + steps.w),
        Action::WidthDec => nb.w = quantize(b.w - steps.w),
        Action::HeightInc => nb.h = quantize(b.h + steps.h),
        Action::HeightDec => nb.h = quantize(b.h - steps.h),
        Action::Trigger => unreachable!(),
    }
    bounds.clamp_box(nb)
}

/// Initialization protocol parameters (training perturbations and the
/// fixed-rho/dim0 test candidates).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Fixed starting radial distance, chosen close to the camera.
    pub rho0: f64,
    /// Fixed starting dimensions, relatively large.
    pub w0: f64,
    pub h0: f64,
    /// Number of azimuth candidates covering the image in test mode.
    pub n_candidates: usize,
    /// Fraction of training episodes initialized near the ground truth (the
    /// rest use the fixed-rho protocol with a fully random azimuth).
    pub near_fraction: f64,
    pub perturb_rho: f64,
    pub perturb_beta: f64,
    pub perturb_w: f64,
    pub perturb_h: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            rho0: 1.5,
            w0: 1.2,
            h0: 2.2,
            n_candidates: 6,
            near_fraction: 0.7,
            perturb_rho: 0.55,
            perturb_beta: 0.4,
            perturb_w: 0.3,
            perturb_h: 0.35,
        }
    }
}

fn default_envelope_gap() -> f64 {
    2.0
}

fn default_iou_gap() -> f64 {
    2.0
}

fn default_input_size() -> u32 {
    64
}

fn default_max_steps() -> u32 {
    100
}

fn default_tau() -> f64 {
    0.6
}

fn default_alpha() -> f64 {
    10.0
}

/// Environment configuration block: bounds, step sizes, trigger threshold
/// and reward, step cap and the network input resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default)]
    pub bounds: EnvBounds,
    #[serde(default)]
    pub steps: ActionSteps,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_alpha")]
    pub alpha_trigger: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    #[serde(default = "default_input_size")]
    pub input_size: u32,
    /// Rasterize the projected box outline into the state crop.
    #[serde(default)]
    pub draw_outline: bool,
    /// Arc sampling density (px) for the state envelope.
    #[serde(default = "default_envelope_gap")]
    pub envelope_gap_px: f64,
    /// Arc sampling density (px) for reward IoU regions.
    #[serde(default = "default_iou_gap")]
    pub iou_gap_px: f64,
    #[serde(default)]
    pub init: InitConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

/// Grayscale state crop at the configured network input resolution, stored
/// as 8-bit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateCrop {
    pub size: u32,
    pub data: Vec<u8>,
}

impl StateCrop {
    /// Pixels normalized to [0, 1] for the network.
    pub fn features(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }
}

/// Observation handed to the agent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxState {
    pub crop: StateCrop,
    pub cylbox: CylBox,
    pub step_index: u32,
    /// Part of the box fell outside the field of view; the crop came from
    /// the clipped envelope.
    pub degraded: bool,
}

/// Result of one environment transition.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next_state: BoxState,
    pub reward: f64,
    pub terminal: bool,
    /// Diagnostic IoU of the outcome state against the ground truth.
    pub iou: f64,
}

/// Bilinear crop-and-resize of an image rectangle to `size x size`. Pixel
/// centers sit at integer+0.5 coordinates.
pub fn crop_resize(image: &OmniImage, rect: &PixelRect, size: u32) -> Vec<u8> {
    let n = size as usize;
    let mut out = vec![0u8; n * n];
    for j in 0..n {
        let v = rect.v_min + (j as f64 + 0.5) / size as f64 * rect.height();
        for i in 0..n {
            let u = rect.u_min + (i as f64 + 0.5) / size as f64 * rect.width();
            out[j * n + i] = image.sample_bilinear(u, v).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Projects the box's four edges, takes the clipped pixel envelope of the
/// arcs, and crops/resizes the image to the configured input resolution.
pub fn render_state(
    b: &CylBox,
    image: &OmniImage,
    cam: &CameraIntrinsics,
    cfg: &EnvConfig,
    step_index: u32,
) -> Result<BoxState, EnvError> {
    let corners = b.corners();
    let cycle = [(0usize, 1usize), (1, 3), (3, 2), (2, 0)];
    let mut samples = Vec::new();
    let mut degraded = false;
    for (i, j) in cycle {
        match segment_curve_with_gap(&corners[i], &corners[j], cam, 16, cfg.envelope_gap_px) {
            Ok(seg) => samples.extend(seg.pixel_polyline(cam)),
            Err(_) => {
                degraded = true;
                for p in [&corners[i], &corners[j]] {
                    if let Ok(px) = project_pixel(p, cam) {
                        samples.push(px);
                    }
                }
            }
        }
    }
    let envelope = PixelRect::from_points(&samples).ok_or(EnvError::EmptyEnvelope)?;
    let image_rect = PixelRect {
        u_min: 0.0,
        v_min: 0.0,
        u_max: image.width as f64,
        v_max: image.height as f64,
    };
    let crop_rect = match envelope.intersect(&image_rect) {
        Some(r) => r,
        None => return Err(EnvError::EmptyEnvelope),
    };
    if crop_rect.width() < envelope.width() - 1e-9 || crop_rect.height() < envelope.height() - 1e-9
    {
        degraded = true;
    }
    let mut data = crop_resize(image, &crop_rect, cfg.input_size);
    if cfg.draw_outline {
        let n = cfg.input_size as i64;
        for p in &samples {
            let cx = ((p.u - crop_rect.u_min) / crop_rect.width() * n as f64) as i64;
            let cy = ((p.v - crop_rect.v_min) / crop_rect.height() * n as f64) as i64;
            if (0..n).contains(&cx) && (0..n).contains(&cy) {
                data[(cy * n + cx) as usize] = 255;
            }
        }
    }
    Ok(BoxState {
        crop: StateCrop {
            size: cfg.input_size,
            data,
        },
        cylbox: *b,
        step_index,
        degraded,
    })
}

/// One episode of the localization environment. A single instance must be
/// stepped from one logical thread; independent instances may run in
/// parallel.
pub struct BoxEnv<'a> {
    pub cam: &'a CameraIntrinsics,
    pub image: &'a OmniImage,
    pub cfg: &'a EnvConfig,
    gt: CylBox,
    gt_region: DistortedRegion,
    state: BoxState,
    iou: f64,
    terminal: bool,
}

impl<'a> BoxEnv<'a> {
    pub fn new(
        cam: &'a CameraIntrinsics,
        image: &'a OmniImage,
        cfg: &'a EnvConfig,
        gt: CylBox,
        init: CylBox,
    ) -> Result<Self, EnvError> {
        let gt_region = region_from_box_with_gap(&gt, cam, cfg.iou_gap_px)?;
        let state = render_state(&init, image, cam, cfg, 0)?;
        let region = region_from_box_with_gap(&init, cam, cfg.iou_gap_px)?;
        let iou = distorted_iou(&region, &gt_region);
        Ok(Self {
            cam,
            image,
            cfg,
            gt,
            gt_region,
            state,
            iou,
            terminal: false,
        })
    }

    pub fn state(&self) -> &BoxState {
        &self.state
    }

    pub fn gt(&self) -> &CylBox {
        &self.gt
    }

    pub fn current_iou(&self) -> f64 {
        self.iou
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Replaces the box outright (ground-truth oracles, debugging); the step
    /// counter is unchanged.
    pub fn teleport(&mut self, b: CylBox) -> Result<(), EnvError> {
        let state = render_state(&b, self.image, self.cam, self.cfg, self.state.step_index)?;
        let region = region_from_box_with_gap(&b, self.cam, self.cfg.iou_gap_px)?;
        self.iou = distorted_iou(&region, &self.gt_region);
        self.state = state;
        Ok(())
    }

    /// Applies one action. Movement rewards are the sign of the IoU change
    /// (with sign(0) = -1); the trigger ends the episode with +-alpha
    /// depending on whether the current IoU clears tau. The episode also
    /// ends when the step cap is reached.
    ///
    /// Panics if the episode is already terminal.
    pub fn step(&mut self, a: Action) -> Result<StepOutcome, EnvError> {
        assert!(!self.terminal, "step on a terminal episode");
        let next_index = self.state.step_index + 1;
        if a.is_trigger() {
            let reward = if self.iou >= self.cfg.tau {
                self.cfg.alpha_trigger
            } else {
                -self.cfg.alpha_trigger
            };
            self.terminal = true;
            self.state.step_index = next_index;
            return Ok(StepOutcome {
                next_state: self.state.clone(),
                reward,
                terminal: true,
                iou: self.iou,
            });
        }
        let nb = apply_action(&self.state.cylbox, a, &self.cfg.steps, &self.cfg.bounds);
        let next_state = render_state(&nb, self.image, self.cam, self.cfg, next_index)?;
        let region = region_from_box_with_gap(&nb, self.cam, self.cfg.iou_gap_px)?;
        let next_iou = distorted_iou(&region, &self.gt_region);
        let reward = if next_iou > self.iou { 1.0 } else { -1.0 };
        self.iou = next_iou;
        self.state = next_state;
        if next_index >= self.cfg.max_steps {
            self.terminal = true;
        }
        Ok(StepOutcome {
            next_state: self.state.clone(),
            reward,
            terminal: self.terminal,
            iou: next_iou,
        })
    }
}

/// Training initialization: near-ground-truth perturbation with probability
/// `near_fraction`, otherwise the fixed-rho protocol box at a fully random
/// azimuth.
pub fn train_init_box<R: Rng>(gt: &CylBox, cfg: &EnvConfig, rng: &mut R) -> CylBox {
    let ic = &cfg.init;
    let b = if rng.gen::<f64>() < ic.near_fraction {
        CylBox::new(
            gt.rho + rng.gen_range(-ic.perturb_rho..=ic.perturb_rho),
            gt.beta + rng.gen_range(-ic.perturb_beta..=ic.perturb_beta),
            gt.z,
            gt.w + rng.gen_range(-ic.perturb_w..=ic.perturb_w),
            gt.h + rng.gen_range(-ic.perturb_h..=ic.perturb_h),
        )
    } else {
        CylBox::new(
            ic.rho0,
            rng.gen_range(0.0..TAU),
            gt.z,
            ic.w0,
            ic.h0,
        )
    };
    cfg.bounds.clamp_box(b)
}

/// Test initialization: `n_candidates` azimuths, equally spaced with jitter
/// small enough that any two stay at least a half spacing apart, all at the
/// fixed rho0/dim0 start.
pub fn test_candidates<R: Rng>(floor_z: f64, cfg: &EnvConfig, rng: &mut R) -> Vec<CylBox> {
    let ic = &cfg.init;
    let n = ic.n_candidates.max(1);
    let spacing = TAU / n as f64;
    let jitter = 0.45 * spacing;
    let phase = rng.gen_range(0.0..TAU);
    (0..n)
        .map(|k| {
            let beta = phase + k as f64 * spacing + rng.gen_range(-0.5..=0.5) * jitter;
            cfg.bounds
                .clamp_box(CylBox::new(ic.rho0, beta, floor_z, ic.w0, ic.h0))
        })
        .collect()
}
