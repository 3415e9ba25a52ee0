//! Discrete volume rendering of color and expected depth along camera rays.
//!
//! `render_ray` fills a [`RayWorkspace`] holding every per-sample quantity
//! (distance, spacing, density, color, transmittance, weight, cell location)
//! so that both gradient paths can reuse the forward pass exactly, including
//! its early-termination point.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{generate_ray, CameraIntrinsics, Pose, Ray};
use crate::grid::{CellPoint, VoxelGrid};
use crate::sh::{color_from_basis, sh_basis, ShBasis};
use crate::{Result, SH_COEFFS};

pub const DEFAULT_T_NEAR: f64 = 0.05;
pub const DEFAULT_EARLY_TERMINATION: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    /// Sample spacing along the ray, meters.
    pub step: f64,
    pub t_near: f64,
    pub t_far: f64,
    /// Marching stops once transmittance drops below this.
    pub early_termination: f64,
}

impl RenderSettings {
    /// Half-voxel steps, `t_near = 0.05 m`, `t_far` = grid diagonal.
    pub fn for_grid(grid: &VoxelGrid) -> Self {
        let g = grid.geometry();
        Self {
            step: g.voxel_size * 0.5,
            t_near: DEFAULT_T_NEAR,
            t_far: g.diagonal(),
            early_termination: DEFAULT_EARLY_TERMINATION,
        }
    }

    pub fn without_early_termination(mut self) -> Self {
        self.early_termination = 0.0;
        self
    }
}

/// One sample of the marching schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub t: f64,
    pub delta: f64,
    pub loc: CellPoint,
}

/// Uniform samples `t_near + (k + ½)·step`; the final interval is truncated
/// at `t_far` (its sample sits at the midpoint of what remains). Samples
/// outside the grid or inside inactive cells are dropped.
pub fn sample_ray(grid: &VoxelGrid, ray: &Ray, settings: &RenderSettings, out: &mut Vec<RaySample>) {
    out.clear();
    let RenderSettings {
        step,
        t_near,
        t_far,
        ..
    } = *settings;
    debug_assert!(step > 0.0 && t_near >= 0.0 && t_near < t_far);
    let geo = grid.geometry();
    let Some((t0, t1)) = geo.ray_interval(&ray.origin, &ray.direction) else {
        return;
    };
    let lo = t0.max(t_near);
    let hi = t1.min(t_far);
    if lo > hi {
        return;
    }
    let k_start = (((lo - t_near) / step).floor() as i64 - 1).max(0) as u64;
    let k_end = ((hi - t_near) / step).ceil() as u64 + 1;
    let min_len = step * 1e-9;
    for k in k_start..=k_end {
        let a = t_near + k as f64 * step;
        if a >= t_far - min_len {
            break;
        }
        let b = (a + step).min(t_far);
        let (t, delta) = if b < a + step {
            (0.5 * (a + b), b - a)
        } else {
            (t_near + (k as f64 + 0.5) * step, step)
        };
        let p = ray.at(t);
        if let Some(loc) = geo.locate(&p) {
            if grid.is_cell_active(loc.cell) {
                out.push(RaySample { t, delta, loc });
            }
        }
    }
}

/// Per-ray forward state shared by the map and pose gradient paths.
#[derive(Clone, Debug, Default)]
pub struct RayWorkspace {
    pub samples: Vec<RaySample>,
    /// SH basis used for every sample's color (the ray's view direction unless overridden).
    pub basis: ShBasis,
    /// Effective density `max(σ, 0)`.
    pub sigma: Vec<f64>,
    /// Whether the raw interpolated density was positive.
    pub sigma_live: Vec<bool>,
    pub color: Vec<[f64; 3]>,
    /// Whether each color channel is inside the unclamped range.
    pub color_live: Vec<[bool; 3]>,
    /// `T_1 ..= T_{N+1}`; one more entry than processed samples.
    pub transmittance: Vec<f64>,
    pub weight: Vec<f64>,
    pub color_hat: [f64; 3],
    pub depth_hat: f64,
    /// Set when marching stopped early; samples past `len()` were skipped.
    pub terminated_early: bool,
}

impl RayWorkspace {
    /// Number of samples that contributed (after early termination).
    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    /// A ray with no active samples renders background and is excluded from losses.
    pub fn hit(&self) -> bool {
        !self.weight.is_empty()
    }

    pub fn terminal_transmittance(&self) -> f64 {
        self.transmittance.last().copied().unwrap_or(1.0)
    }

    pub fn t(&self, i: usize) -> f64 {
        self.samples[i].t
    }

    pub fn delta(&self, i: usize) -> f64 {
        self.samples[i].delta
    }

    fn clear(&mut self) {
        self.samples.clear();
        self.sigma.clear();
        self.sigma_live.clear();
        self.color.clear();
        self.color_live.clear();
        self.transmittance.clear();
        self.weight.clear();
        self.color_hat = [0.0; 3];
        self.depth_hat = 0.0;
        self.terminated_early = false;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayRender {
    pub color: [f64; 3],
    pub depth: f64,
    pub hit: bool,
}

/// Samples and renders `ray`, leaving the full forward state in `ws`.
pub fn render_ray(
    grid: &VoxelGrid,
    ray: &Ray,
    settings: &RenderSettings,
    ws: &mut RayWorkspace,
) -> RayRender {
    render_ray_with_basis(grid, ray, settings, &sh_basis(&ray.direction), ws)
}

/// As [`render_ray`], evaluating color with a caller-supplied SH basis.
pub fn render_ray_with_basis(
    grid: &VoxelGrid,
    ray: &Ray,
    settings: &RenderSettings,
    basis: &ShBasis,
    ws: &mut RayWorkspace,
) -> RayRender {
    let mut samples = std::mem::take(&mut ws.samples);
    sample_ray(grid, ray, settings, &mut samples);
    ws.clear();
    ws.samples = samples;
    ws.basis = *basis;
    composite(grid, settings.early_termination, ws)
}

fn composite(grid: &VoxelGrid, early_termination: f64, ws: &mut RayWorkspace) -> RayRender {
    let mut trans = 1.0;
    ws.transmittance.push(trans);
    let mut color_hat = [0.0; 3];
    let mut depth_hat = 0.0;
    for i in 0..ws.samples.len() {
        if trans < early_termination {
            ws.terminated_early = true;
            break;
        }
        let s = ws.samples[i];
        let v = grid.interpolate(&s.loc);
        let raw_sigma = v[0];
        let sigma = raw_sigma.max(0.0);
        let mut sh = [[0.0; SH_COEFFS]; 3];
        for (ch, coeffs) in sh.iter_mut().enumerate() {
            coeffs.copy_from_slice(&v[1 + ch * SH_COEFFS..1 + (ch + 1) * SH_COEFFS]);
        }
        let (rgb, live) = color_from_basis(&sh, &ws.basis);
        let decay = (-sigma * s.delta).exp();
        let w = trans * (1.0 - decay);
        for ch in 0..3 {
            color_hat[ch] += w * rgb[ch];
        }
        depth_hat += w * s.t;
        trans *= decay;

        ws.sigma.push(sigma);
        ws.sigma_live.push(raw_sigma > 0.0);
        ws.color.push(rgb);
        ws.color_live.push(live);
        ws.weight.push(w);
        ws.transmittance.push(trans);
    }
    ws.samples.truncate(ws.weight.len());
    ws.color_hat = color_hat;
    ws.depth_hat = depth_hat;
    RayRender {
        color: color_hat,
        depth: depth_hat,
        hit: ws.hit(),
    }
}

/// Color, depth and hit mask rendered at every `stride`-th pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: u32,
    pub height: u32,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub hit: Vec<bool>,
}

impl RenderedImage {
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }
}

pub fn render_image(
    grid: &VoxelGrid,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    stride: u32,
    settings: &RenderSettings,
) -> Result<RenderedImage> {
    let stride = stride.max(1);
    let width = intrinsics.width.div_ceil(stride);
    let height = intrinsics.height.div_ceil(stride);
    let rows: Vec<Result<Vec<RayRender>>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut ws = RayWorkspace::default();
            (0..width)
                .map(|x| {
                    let ray = generate_ray(
                        intrinsics,
                        pose,
                        (x * stride) as f64,
                        (y * stride) as f64,
                    )?;
                    Ok(render_ray(grid, &ray, settings, &mut ws))
                })
                .collect()
        })
        .collect();
    let n = width as usize * height as usize;
    let mut img = RenderedImage {
        width,
        height,
        color: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        hit: Vec::with_capacity(n),
    };
    for row in rows {
        for r in row? {
            img.color.push(r.color);
            img.depth.push(r.depth);
            img.hit.push(r.hit);
        }
    }
    Ok(img)
}

/// Renders a single pixel of a full-resolution image.
pub fn render_pixel(
    grid: &VoxelGrid,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    u: f64,
    v: f64,
    settings: &RenderSettings,
) -> Result<RayRender> {
    let ray = generate_ray(intrinsics, pose, u, v)?;
    let mut ws = RayWorkspace::default();
    Ok(render_ray(grid, &ray, settings, &mut ws))
}

/// `o + t d` for every processed sample.
pub fn sample_positions(ray: &Ray, ws: &RayWorkspace) -> Vec<Vector3<f64>> {
    ws.samples.iter().map(|s| ray.at(s.t)).collect()
}
