//! Camera poses, ray generation, expected depth and cross-view warping.
//!
//! Cameras are pinholes with square pixels, `y` up, looking at the world
//! origin from a point on a sphere parameterised by `(yaw, pitch, radius)`.
//! `fov` is the vertical field of view. Pixel `(i, j)` (row, column) has its
//! center at continuous image coordinates `(j + 0.5, i + 0.5)`.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::SamplePlan;
use crate::tensor::Tensor;

/// Weight-sum threshold below which a ray counts as empty.
pub const DEPTH_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub yaw: f64,
    pub pitch: f64,
    pub radius: f64,
    pub fov: f64,
    pub near: f64,
    pub far: f64,
}

impl CameraPose {
    pub fn frontal() -> Self {
        Self::default()
    }

    pub fn with_angles(self, yaw: f64, pitch: f64) -> Self {
        Self { yaw, pitch, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.yaw, self.pitch, self.radius, self.fov, self.near, self.far]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Argument("camera pose has non-finite fields".into()));
        }
        if !(self.near < self.far) {
            return Err(Error::Argument(format!(
                "camera near {} must be below far {}",
                self.near, self.far
            )));
        }
        if !(self.fov > 0.0 && self.fov < core::f64::consts::PI) {
            return Err(Error::Argument(format!("fov {} outside (0, pi)", self.fov)));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Argument(format!("radius {} must be positive", self.radius)));
        }
        if libm::fabs(self.pitch) >= FRAC_PI_2 {
            return Err(Error::Argument(format!("pitch {} must lie inside (-pi/2, pi/2)", self.pitch)));
        }
        Ok(())
    }

    /// Component-wise linear interpolation.
    pub fn lerp(&self, other: &CameraPose, t: f64) -> CameraPose {
        let l = |a: f64, b: f64| (1.0 - t) * a + t * b;
        CameraPose {
            yaw: l(self.yaw, other.yaw),
            pitch: l(self.pitch, other.pitch),
            radius: l(self.radius, other.radius),
            fov: l(self.fov, other.fov),
            near: l(self.near, other.near),
            far: l(self.far, other.far),
        }
    }

    pub fn camera(&self) -> PinholeCamera {
        let (sy, cy) = (crate::math::sin(self.yaw), crate::math::cos(self.yaw));
        let (sp, cp) = (crate::math::sin(self.pitch), crate::math::cos(self.pitch));
        let position = Vector3::new(sy * cp, sp, cy * cp) * self.radius;
        PinholeCamera::look_at(position, Vector3::zeros(), self.fov)
    }
}

impl Default for CameraPose {
    /// Frontal view with a 12° vertical field of view, matching the default
    /// pose distribution.
    fn default() -> Self {
        PoseDistribution::default().center()
    }
}

/// Extrinsics plus vertical field of view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinholeCamera {
    pub position: Vector3<f64>,
    pub right: Vector3<f64>,
    pub up: Vector3<f64>,
    pub forward: Vector3<f64>,
    pub fov: f64,
}

impl PinholeCamera {
    pub fn look_at(position: Vector3<f64>, target: Vector3<f64>, fov: f64) -> Self {
        let forward = (target - position).normalize();
        let right = forward.cross(&Vector3::y()).normalize();
        let up = right.cross(&forward);
        Self {
            position,
            right,
            up,
            forward,
            fov,
        }
    }

    /// Same orientation, shifted position.
    pub fn translated(&self, offset: Vector3<f64>) -> Self {
        Self {
            position: self.position + offset,
            ..*self
        }
    }

    pub fn tan_half_fov(&self) -> f64 {
        libm::tan(0.5 * self.fov)
    }

    /// Focal length in pixels for an image of height `h`.
    pub fn focal_px(&self, h: usize) -> f64 {
        0.5 * h as f64 / self.tan_half_fov()
    }

    /// Unit direction of the ray through the center of pixel `(i, j)`.
    pub fn ray_direction(&self, i: usize, j: usize, h: usize, w: usize) -> Vector3<f64> {
        let t = self.tan_half_fov();
        let aspect = w as f64 / h as f64;
        let u = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
        let v = 1.0 - 2.0 * (i as f64 + 0.5) / h as f64;
        (self.forward + self.right * (u * t * aspect) + self.up * (v * t)).normalize()
    }

    /// Continuous image coordinates `(x, y)` and camera-space depth of a world
    /// point; `None` if the point is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>, h: usize, w: usize) -> Option<(f64, f64, f64)> {
        let d = p - self.position;
        let z = d.dot(&self.forward);
        if z <= 1e-9 {
            return None;
        }
        let f = self.focal_px(h);
        let x = 0.5 * w as f64 + f * d.dot(&self.right) / z;
        let y = 0.5 * h as f64 - f * d.dot(&self.up) / z;
        Some((x, y, z))
    }
}

/// Prior over viewpoints. Angles outside the hard bounds are rejected and
/// redrawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution {
    pub kind: PoseKind,
    pub yaw_mean: f64,
    pub pitch_mean: f64,
    /// Standard deviation (gaussian) or half-width (uniform).
    pub yaw_spread: f64,
    pub pitch_spread: f64,
    pub yaw_bounds: (f64, f64),
    pub pitch_bounds: (f64, f64),
    pub radius: f64,
    pub fov: f64,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseKind {
    Gaussian,
    Uniform,
}

impl Default for PoseDistribution {
    fn default() -> Self {
        // Slightly inside ±π/2 so the look-at frame never degenerates.
        let lim = FRAC_PI_2 - 1e-3;
        Self {
            kind: PoseKind::Gaussian,
            yaw_mean: 0.0,
            pitch_mean: 0.0,
            yaw_spread: 0.3,
            pitch_spread: 0.15,
            yaw_bounds: (-lim, lim),
            pitch_bounds: (-lim, lim),
            radius: 1.0,
            fov: 12f64.to_radians(),
            near: 0.88,
            far: 1.12,
        }
    }
}

impl PoseDistribution {
    pub fn validate(&self) -> Result<()> {
        if !(self.yaw_bounds.0 <= self.yaw_bounds.1) || !(self.pitch_bounds.0 <= self.pitch_bounds.1) {
            return Err(Error::Config("pose bounds are inverted".into()));
        }
        if !(self.yaw_spread >= 0.0 && self.pitch_spread >= 0.0) {
            return Err(Error::Config("pose spreads must be non-negative".into()));
        }
        let inside = |x: f64, b: (f64, f64)| x >= b.0 && x <= b.1;
        if !inside(self.yaw_mean, self.yaw_bounds) || !inside(self.pitch_mean, self.pitch_bounds) {
            return Err(Error::Config("pose mean lies outside its bounds".into()));
        }
        if self.pitch_bounds.0 <= -FRAC_PI_2 || self.pitch_bounds.1 >= FRAC_PI_2 {
            return Err(Error::Config("pitch bounds must lie inside (-pi/2, pi/2)".into()));
        }
        self.center().validate().map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn center(&self) -> CameraPose {
        CameraPose {
            yaw: self.yaw_mean,
            pitch: self.pitch_mean,
            radius: self.radius,
            fov: self.fov,
            near: self.near,
            far: self.far,
        }
    }

    /// `k` poses with yaws evenly spaced across the yaw bounds at the mean
    /// pitch; a single pose is the center.
    pub fn yaw_sweep(&self, k: usize) -> Vec<CameraPose> {
        let c = self.center();
        if k == 1 {
            return alloc::vec![c];
        }
        let (lo, hi) = self.yaw_bounds;
        (0..k)
            .map(|i| {
                let t = i as f64 / (k - 1) as f64;
                c.with_angles(lo * (1.0 - t) + hi * t, self.pitch_mean)
            })
            .collect()
    }

    pub fn in_bounds(&self, yaw: f64, pitch: f64) -> bool {
        yaw >= self.yaw_bounds.0 && yaw <= self.yaw_bounds.1 && pitch >= self.pitch_bounds.0 && pitch <= self.pitch_bounds.1
    }
}

fn draw_angle<R: Rng + ?Sized>(kind: PoseKind, mean: f64, spread: f64, bounds: (f64, f64), rng: &mut R) -> f64 {
    if spread == 0.0 {
        return mean;
    }
    // Rejection keeps the draw a deterministic function of the stream.
    for _ in 0..1000 {
        let x = match kind {
            PoseKind::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                mean + spread * z
            }
            PoseKind::Uniform => mean + spread * (2.0 * rng.random::<f64>() - 1.0),
        };
        if x >= bounds.0 && x <= bounds.1 {
            return x;
        }
    }
    mean.clamp(bounds.0, bounds.1)
}

/// Draw a viewpoint from the prior.
pub fn sample_viewpoint<R: Rng + ?Sized>(rng: &mut R, dist: &PoseDistribution) -> Result<CameraPose> {
    dist.validate()?;
    let yaw = draw_angle(dist.kind, dist.yaw_mean, dist.yaw_spread, dist.yaw_bounds, rng);
    let pitch = draw_angle(dist.kind, dist.pitch_mean, dist.pitch_spread, dist.pitch_bounds, rng);
    Ok(dist.center().with_angles(yaw, pitch))
}

/// Per-pixel rays, `[H, W, 3]` origins and unit directions.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBundle {
    pub origins: Tensor,
    pub directions: Tensor,
    pub resolution: (usize, usize),
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.resolution.0 * self.resolution.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn direction(&self, ray: usize) -> [f64; 3] {
        let d = self.directions.data();
        [d[3 * ray], d[3 * ray + 1], d[3 * ray + 2]]
    }

    pub fn origin(&self, ray: usize) -> [f64; 3] {
        let o = self.origins.data();
        [o[3 * ray], o[3 * ray + 1], o[3 * ray + 2]]
    }
}

pub fn generate_rays(pose: &CameraPose, resolution: (usize, usize)) -> Result<RayBundle> {
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::Argument("ray resolution must be at least 1x1".into()));
    }
    pose.validate()?;
    Ok(rays_for_camera(&pose.camera(), resolution))
}

pub fn rays_for_camera(cam: &PinholeCamera, (h, w): (usize, usize)) -> RayBundle {
    let mut origins = Vec::with_capacity(h * w * 3);
    let mut dirs = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            let d = cam.ray_direction(i, j, h, w);
            origins.extend_from_slice(cam.position.as_slice());
            dirs.extend_from_slice(d.as_slice());
        }
    }
    RayBundle {
        origins: Tensor::from_vec(&[h, w, 3], origins),
        directions: Tensor::from_vec(&[h, w, 3], dirs),
        resolution: (h, w),
    }
}

/// `Σ w_i d_i / Σ w_i` along the last axis; rays with `Σ w_i < ε` get `far`.
/// The output has the leading shape of `weights`.
pub fn expected_depth(weights: &Tensor, sample_depths: &Tensor, far: f64) -> Result<Tensor> {
    if weights.shape() != sample_depths.shape() || weights.ndim() == 0 {
        return Err(shape_err("expected_depth", weights.shape(), sample_depths.shape()));
    }
    let n = *weights.shape().last().unwrap();
    let lead = &weights.shape()[..weights.ndim() - 1];
    let out: Vec<f64> = weights
        .data()
        .chunks(n)
        .zip(sample_depths.data().chunks(n))
        .map(|(w, d)| {
            let total: f64 = w.iter().sum();
            if total < DEPTH_EPS {
                far
            } else {
                w.iter().zip(d).map(|(a, b)| a * b).sum::<f64>() / total.max(DEPTH_EPS)
            }
        })
        .collect();
    let lead = if lead.is_empty() { &[1usize][..] } else { lead };
    Tensor::new(lead, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub warped: Tensor,
    pub validity_mask: Vec<bool>,
}

/// Positional tolerance (pixels) for samples at the border of the frame.
const EDGE_TOL: f64 = 1e-6;

fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> Option<[(u32, f64); 4]> {
    // continuous coords -> index space where pixel centers are integers
    let (fx, fy) = (x - 0.5, y - 0.5);
    if !(fx >= -EDGE_TOL && fy >= -EDGE_TOL && fx <= (w - 1) as f64 + EDGE_TOL && fy <= (h - 1) as f64 + EDGE_TOL) {
        return None;
    }
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let x0 = (libm::floor(fx) as usize).min(w.saturating_sub(2));
    let y0 = (libm::floor(fy) as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    let idx = |yy: usize, xx: usize| (yy * w + xx) as u32;
    Some([
        (idx(y0, x0), (1.0 - ax) * (1.0 - ay)),
        (idx(y0, x1), if x1 == x0 { 0.0 } else { ax * (1.0 - ay) }),
        (idx(y1, x0), if y1 == y0 { 0.0 } else { (1.0 - ax) * ay }),
        (idx(y1, x1), if x1 == x0 || y1 == y0 { 0.0 } else { ax * ay }),
    ])
}

/// Backward-warp taps: every destination pixel is unprojected along its own
/// ray using `dst_depth` (distance along the unit ray, `[H, W]`), reprojected
/// into the source camera and sampled bilinearly there.
///
/// Returns the taps and the validity mask. Non-positive or non-finite depths,
/// points behind the source camera and reprojections outside the source frame
/// are invalid.
pub fn warp_taps(
    dst_depth: &[f64],
    dst: &PinholeCamera,
    src: &PinholeCamera,
    dst_hw: (usize, usize),
    src_hw: (usize, usize),
) -> (Vec<[(u32, f64); 4]>, Vec<bool>) {
    let (dh, dw) = dst_hw;
    let (sh, sw) = src_hw;
    let mut taps = Vec::with_capacity(dh * dw);
    let mut mask = Vec::with_capacity(dh * dw);
    for i in 0..dh {
        for j in 0..dw {
            let t = dst_depth[i * dw + j];
            let tap = if t > 0.0 && t.is_finite() {
                let p = dst.position + dst.ray_direction(i, j, dh, dw) * t;
                src.project(&p, sh, sw).and_then(|(x, y, _)| bilinear_taps(x, y, sh, sw))
            } else {
                None
            };
            match tap {
                Some(t) => {
                    taps.push(t);
                    mask.push(true);
                }
                None => {
                    taps.push([(0, 0.0); 4]);
                    mask.push(false);
                }
            }
        }
    }
    (taps, mask)
}

/// Resample `source [C, H, W]` (image or feature grid) rendered from `src`
/// into the view of `dst`, using the per-pixel ray depth of the destination
/// view.
pub fn warp_to_primary(
    source: &Tensor,
    dst_depth: &Tensor,
    src: &PinholeCamera,
    dst: &PinholeCamera,
) -> Result<WarpResult> {
    if source.ndim() != 3 {
        return Err(shape_err("warp_to_primary", &[0, 0, 0], source.shape()));
    }
    let (c, h, w) = (source.shape()[0], source.shape()[1], source.shape()[2]);
    if dst_depth.shape() != [h, w] {
        return Err(shape_err("warp_to_primary depth", &[h, w], dst_depth.shape()));
    }
    let (taps, mask) = warp_taps(dst_depth.data(), dst, src, (h, w), (h, w));
    let plan = Arc::new(SamplePlan {
        batch: 1,
        src_hw: (h, w),
        dst_hw: (h, w),
        taps,
    });
    let mut g = crate::graph::Graph::detached();
    let s = g.constant(source.clone().reshape(&[1, c, h, w])?);
    let out = g.gather_bilinear(s, plan);
    let warped = g.value(out).clone().reshape(&[c, h, w])?;
    Ok(WarpResult {
        warped,
        validity_mask: mask,
    })
}

/// Ray depth map of a fronto-parallel plane at camera-space depth `z`.
pub fn plane_ray_depth(cam: &PinholeCamera, z: f64, (h, w): (usize, usize)) -> Tensor {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = z / cam.ray_direction(i, j, h, w).dot(&cam.forward);
        }
    }
    Tensor::from_vec(&[h, w], out)
}
