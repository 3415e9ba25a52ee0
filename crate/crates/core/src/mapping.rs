//! Offline map optimization from posed RGB-D frames.
//!
//! Each step draws random `(keyframe, pixel)` pairs, renders them, and
//! minimizes `L = L_p + λ_d L_g` (mean squared color error plus weighted
//! mean squared depth error) with RMSProp over the vertices the batch
//! touched. Stages run coarse to fine: between stages the grid is pruned and
//! its resolution doubled.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{generate_ray, CameraIntrinsics};
use crate::dataset::{Dataset, Frame};
use crate::eval::psnr_from_mse;
use crate::gradients::{backprop_to_vertices, sample_contributions, GradientBuffer};
use crate::grid::{GridGeometry, VertexPayload, VoxelGrid};
use crate::parallel::{map_chunks, RAY_CHUNK};
use crate::render::{render_ray, RayWorkspace, RenderSettings};
use crate::{Error, Result, PARAMS_PER_VERTEX};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    /// Weight of the depth term.
    pub lambda_d: f64,
    pub rays_per_batch: usize,
    pub iterations_per_stage: usize,
    /// Learning rate of the density channel.
    pub lr_sigma: f64,
    /// Learning rate of the SH coefficients.
    pub lr_sh: f64,
    /// Learning-rate multiplier reached at the end of each stage
    /// (exponential schedule; 1 keeps it constant).
    pub lr_final_factor: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    /// Every n-th frame is used for mapping.
    pub keyframe_stride: usize,
    /// Raw density every vertex starts with, 1/m.
    pub init_sigma: f64,
    /// Cells along the longest axis at the final stage.
    pub resolution: usize,
    /// Number of resolution doublings; the first stage runs at
    /// `resolution / 2^upsample_levels`.
    pub upsample_levels: usize,
    pub max_resolution: usize,
    /// Grid bounds; derived from cameras and back-projected depth when absent.
    pub bounds_min: Option<[f64; 3]>,
    pub bounds_max: Option<[f64; 3]>,
    /// Padding added on each side, as a fraction of the extent.
    pub bounds_margin: f64,
    /// Cells whose largest corner density stays below this are deactivated
    /// between stages; `None` disables pruning.
    pub prune_threshold: Option<f64>,
    /// Sample spacing as a fraction of the voxel size.
    pub step_fraction: f64,
    pub seed: u64,
    /// Write a log row every n iterations (the last one is always written).
    pub log_every: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            rays_per_batch: 4096,
            iterations_per_stage: 2000,
            lr_sigma: 30.0,
            lr_sh: 1e-2,
            lr_final_factor: 1.0,
            rmsprop_decay: 0.95,
            rmsprop_epsilon: 1e-8,
            keyframe_stride: 10,
            init_sigma: 0.1,
            resolution: 128,
            upsample_levels: 2,
            max_resolution: 512,
            bounds_min: None,
            bounds_max: None,
            bounds_margin: 0.05,
            prune_threshold: Some(crate::grid::DEFAULT_PRUNE_THRESHOLD),
            step_fraction: 0.5,
            seed: 0,
            log_every: 10,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_d >= 0.0) {
            return fail("lambda_d must be non-negative");
        }
        if self.rays_per_batch == 0 || self.keyframe_stride == 0 {
            return fail("rays_per_batch and keyframe_stride must be at least 1");
        }
        if !(self.lr_sigma >= 0.0 && self.lr_sh >= 0.0 && self.lr_final_factor > 0.0) {
            return fail("learning rates must be non-negative and lr_final_factor positive");
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) || !(self.rmsprop_epsilon > 0.0) {
            return fail("rmsprop_decay must be in [0, 1) and rmsprop_epsilon positive");
        }
        if !self.resolution.is_multiple_of(1 << self.upsample_levels) || (self.resolution >> self.upsample_levels) < 2 {
            return fail("resolution must be divisible by 2^upsample_levels with at least 2 coarse cells");
        }
        if self.resolution > self.max_resolution {
            return Err(Error::ResolutionOverflow {
                requested: self.resolution,
                max: self.max_resolution,
            });
        }
        if !(self.step_fraction > 0.0) {
            return fail("step_fraction must be positive");
        }
        Ok(())
    }
}

/// Running mean of squared gradients, one entry per grid parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct RmspropState {
    pub mean_square: Vec<f64>,
    pub decay: f64,
    pub epsilon: f64,
}

impl RmspropState {
    pub fn new(params: usize, decay: f64, epsilon: f64) -> Self {
        Self {
            mean_square: vec![0.0; params],
            decay,
            epsilon,
        }
    }

    /// Updates the vertices present in `grad` (ascending order). Parameters
    /// of untouched vertices and their running means are left as they are.
    pub fn apply(&mut self, params: &mut [f64], grad: &GradientBuffer, lr_sigma: f64, lr_sh: f64) {
        let (rho, eps) = (self.decay, self.epsilon);
        for (v, g) in grad.sorted_entries() {
            let base = v * PARAMS_PER_VERTEX;
            for (k, &gk) in g.iter().enumerate() {
                let i = base + k;
                let ms = rho * self.mean_square[i] + (1.0 - rho) * gk * gk;
                self.mean_square[i] = ms;
                let lr = if k == 0 { lr_sigma } else { lr_sh };
                params[i] -= lr * gk / (ms + eps).sqrt();
            }
        }
    }
}

/// `(1/M) Σ |Ĉ − C|²` over `(rendered, reference)` pairs.
pub fn photometric_loss(pairs: &[([f64; 3], [f64; 3])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let sum: f64 = pairs
        .iter()
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricLoss {
    pub value: f64,
    pub count: usize,
    /// Set when no pair carried valid depth; `value` is then 0.
    pub empty: bool,
}

/// `(1/M) Σ (D̂ − D)²` over pairs whose reference depth is valid (> 0).
pub fn geometric_loss(rendered: &[f64], reference: &[f64]) -> GeometricLoss {
    let (mut sum, mut count) = (0.0, 0usize);
    for (a, b) in rendered.iter().zip(reference) {
        if *b > 0.0 {
            sum += (a - b).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return GeometricLoss {
            value: 0.0,
            count: 0,
            empty: true,
        };
    }
    GeometricLoss {
        value: sum / count as f64,
        count,
        empty: false,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub photometric: f64,
    pub geometric: f64,
    pub total: f64,
    /// Rays that entered the loss (valid depth and at least one sample).
    pub rays_used: usize,
    pub touched_vertices: usize,
}

struct ChunkResult {
    grad: GradientBuffer,
    sum_color: f64,
    sum_depth: f64,
    count: usize,
    non_finite: Option<usize>,
}

/// Loss and parameter gradient of one batch of `(frame, pixel)` rays. The
/// returned buffer holds `∂L/∂θ` for every touched vertex.
pub fn batch_gradient(
    grid: &VoxelGrid,
    frames: &[&Frame],
    intrinsics: &CameraIntrinsics,
    rays: &[(usize, usize)],
    lambda_d: f64,
    settings: &RenderSettings,
) -> Result<(StepStats, GradientBuffer)> {
    let chunks = map_chunks(rays, RAY_CHUNK, |ci, chunk| {
        let mut out = ChunkResult {
            grad: GradientBuffer::new(),
            sum_color: 0.0,
            sum_depth: 0.0,
            count: 0,
            non_finite: None,
        };
        let mut ws = RayWorkspace::default();
        for (k, &(fi, pi)) in chunk.iter().enumerate() {
            let frame = frames[fi];
            if !frame.depth_valid(pi) {
                continue;
            }
            let pose = frame.gt_pose.expect("mapping frames carry poses");
            let (x, y) = (pi % frame.width as usize, pi / frame.width as usize);
            let Ok(ray) = generate_ray(intrinsics, &pose, x as f64, y as f64) else {
                continue;
            };
            let r = render_ray(grid, &ray, settings, &mut ws);
            if !r.hit {
                continue;
            }
            let target = frame.color[pi];
            let res_c = [0, 1, 2].map(|c| r.color[c] - target[c]);
            let res_d = r.depth - frame.depth[pi];
            let sq_c: f64 = res_c.iter().map(|v| v * v).sum();
            if !(sq_c.is_finite() && res_d.is_finite()) {
                out.non_finite.get_or_insert(ci * RAY_CHUNK + k);
                continue;
            }
            out.sum_color += sq_c;
            out.sum_depth += res_d * res_d;
            out.count += 1;
            let contrib = sample_contributions(&ws, res_c.map(|v| 2.0 * v), 2.0 * lambda_d * res_d);
            backprop_to_vertices(grid, &ws, &contrib, &mut out.grad);
        }
        out
    });
    let mut grad = GradientBuffer::new();
    let (mut sc, mut sd, mut m) = (0.0, 0.0, 0usize);
    for c in &chunks {
        if let Some(ray) = c.non_finite {
            return Err(Error::NonFiniteLoss { ray });
        }
        grad.merge(&c.grad);
        sc += c.sum_color;
        sd += c.sum_depth;
        m += c.count;
    }
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    grad.scale(1.0 / m as f64);
    let (lp, lg) = (sc / m as f64, sd / m as f64);
    let stats = StepStats {
        photometric: lp,
        geometric: lg,
        total: lp + lambda_d * lg,
        rays_used: m,
        touched_vertices: grad.len(),
    };
    Ok((stats, grad))
}

/// Draws `count` uniform `(frame, pixel)` pairs.
pub fn sample_rays(rng: &mut impl Rng, frames: &[&Frame], count: usize) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| {
            let f = rng.random_range(0..frames.len());
            (f, rng.random_range(0..frames[f].pixel_count()))
        })
        .collect()
}

/// One optimization step; `lr_scale` multiplies both learning rates.
#[allow(clippy::too_many_arguments)]
pub fn mapping_step(
    grid: &mut VoxelGrid,
    frames: &[&Frame],
    intrinsics: &CameraIntrinsics,
    config: &MappingConfig,
    state: &mut RmspropState,
    rng: &mut ChaCha8Rng,
    settings: &RenderSettings,
    lr_scale: f64,
) -> Result<StepStats> {
    let rays = sample_rays(rng, frames, config.rays_per_batch);
    let (stats, grad) = batch_gradient(grid, frames, intrinsics, &rays, config.lambda_d, settings)?;
    state.apply(
        grid.params_mut(),
        &grad,
        config.lr_sigma * lr_scale,
        config.lr_sh * lr_scale,
    );
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: usize,
    pub photometric: f64,
    pub geometric: f64,
    pub total: f64,
    pub psnr_estimate: f64,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    /// Effective configuration, echoed into the CSV header.
    pub config_echo: String,
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for line in self.config_echo.lines() {
            let _ = writeln!(s, "# {line}");
        }
        s.push_str("iteration,L_p,L_g,L,psnr_estimate,elapsed_ms\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.9e},{:.9e},{:.9e},{:.4},{:.1}",
                r.iteration, r.photometric, r.geometric, r.total, r.psnr_estimate, r.elapsed_ms
            );
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct MappingResult {
    pub grid: VoxelGrid,
    pub log: TrainingLog,
}

/// Axis-aligned box around the keyframe camera centers and their
/// back-projected valid depth (every 4th pixel).
pub fn scene_bounds(frames: &[&Frame], intrinsics: &CameraIntrinsics) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for f in frames {
        let pose = f.gt_pose.ok_or_else(|| Error::Dataset("mapping needs poses".into()))?;
        lo = lo.inf(&pose.translation);
        hi = hi.sup(&pose.translation);
        for y in (0..f.height).step_by(4) {
            for x in (0..f.width).step_by(4) {
                let i = f.index(x, y);
                if f.depth_valid(i) {
                    let ray = generate_ray(intrinsics, &pose, x as f64, y as f64)?;
                    let p = ray.at(f.depth[i]);
                    lo = lo.inf(&p);
                    hi = hi.sup(&p);
                }
            }
        }
    }
    if !(lo.iter().all(|v| v.is_finite())) || (0..3).any(|a| !(hi[a] > lo[a])) {
        return Err(Error::DegenerateScene("keyframes do not span a 3D volume".into()));
    }
    Ok((lo, hi))
}

/// Geometry of the first (coarsest) stage.
pub fn initial_geometry(config: &MappingConfig, frames: &[&Frame], intrinsics: &CameraIntrinsics) -> Result<GridGeometry> {
    let (lo, hi) = match (config.bounds_min, config.bounds_max) {
        (Some(a), Some(b)) => (Vector3::from(a), Vector3::from(b)),
        (None, None) => scene_bounds(frames, intrinsics)?,
        _ => return Err(Error::Config("bounds_min and bounds_max must be given together".into())),
    };
    GridGeometry::from_bounds(lo, hi, config.resolution >> config.upsample_levels, config.bounds_margin)
}

pub fn map_scene(dataset: &Dataset, config: &MappingConfig) -> Result<MappingResult> {
    map_scene_with(dataset, config, None)
}

/// As [`map_scene`]; `observer` sees every step's statistics.
pub fn map_scene_with(
    dataset: &Dataset,
    config: &MappingConfig,
    mut observer: Option<&mut dyn FnMut(usize, &StepStats)>,
) -> Result<MappingResult> {
    config.validate()?;
    if dataset.frames.is_empty() {
        return Err(Error::Dataset("dataset has no frames".into()));
    }
    if !dataset.has_poses() {
        return Err(Error::Dataset("mapping needs a pose for every frame".into()));
    }
    let frames = dataset.keyframes(config.keyframe_stride);
    let k = &dataset.intrinsics;
    let geometry = initial_geometry(config, &frames, k)?;
    let mut grid = VoxelGrid::filled(
        geometry,
        &VertexPayload {
            sigma: config.init_sigma,
            sh: [[0.0; 9]; 3],
        },
    );
    let mut log = TrainingLog {
        config_echo: format!(
            "mapping config: {}",
            serde_json::to_string(config).expect("config serializes")
        ),
        rows: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = Instant::now();
    let mut iteration = 0;
    for stage in 0..=config.upsample_levels {
        if stage > 0 {
            if let Some(t) = config.prune_threshold {
                grid.prune(t);
            }
            grid = grid.upsample(config.max_resolution)?;
        }
        let mut settings = RenderSettings::for_grid(&grid);
        settings.step = grid.geometry().voxel_size * config.step_fraction;
        let mut state = RmspropState::new(grid.params().len(), config.rmsprop_decay, config.rmsprop_epsilon);
        let n = config.iterations_per_stage;
        for it in 0..n {
            let lr_scale = config.lr_final_factor.powf(it as f64 / n.max(2).saturating_sub(1) as f64);
            let stats = mapping_step(&mut grid, &frames, k, config, &mut state, &mut rng, &settings, lr_scale)?;
            if let Some(obs) = observer.as_mut() {
                obs(iteration, &stats);
            }
            if it % config.log_every.max(1) == 0 || it + 1 == n {
                log.rows.push(LogRow {
                    iteration,
                    stage,
                    photometric: stats.photometric,
                    geometric: stats.geometric,
                    total: stats.total,
                    psnr_estimate: psnr_from_mse(stats.photometric / 3.0),
                    elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
                });
            }
            iteration += 1;
        }
    }
    if config.iterations_per_stage > 0 {
        if let Some(t) = config.prune_threshold {
            grid.prune(t);
        }
    }
    Ok(MappingResult { grid, log })
}
