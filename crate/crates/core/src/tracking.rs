//! Frame-to-model camera tracking against a frozen grid.
//!
//! Each iteration renders a fresh random set of valid-depth pixels, forms
//! `L = w_c L_p + λ_d L_g`, and maps the per-ray origin/direction gradients
//! onto the pose chart: a world translation `τ` moves every ray origin
//! (`∂L/∂τ = Σ ∂L/∂o`) and a rotation `ω` about the camera center turns every
//! direction (`∂L/∂ω = Σ d × ∂L/∂d`). Adam drives the update.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{generate_ray, CameraIntrinsics, Pose, PosePerturbation};
use crate::dataset::{Dataset, Frame};
use crate::eval::Trajectory;
use crate::gradients::{grad_direction_via_basis, grad_wrt_ray, sample_contributions};
use crate::grid::VoxelGrid;
use crate::parallel::{map_chunks, RAY_CHUNK};
use crate::render::{render_ray, render_ray_with_basis, RayWorkspace, RenderSettings};
use crate::sh::ShBasis;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    PreviousPose,
    ConstantVelocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    pub rays_per_iteration: usize,
    pub iterations: usize,
    /// Adam step size for the rotation, radians.
    pub lr_rotation: f64,
    /// Adam step size for the translation, meters.
    pub lr_translation: f64,
    /// Learning-rate multiplier reached at the last iteration (exponential).
    pub lr_final_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lambda_d: f64,
    /// Weight of the color term; 0 tracks on depth alone.
    pub color_weight: f64,
    pub init: InitPolicy,
    /// Stop once a step moves the pose by less than this (radians + meters);
    /// 0 always runs every iteration.
    pub convergence_threshold: f64,
    /// A frame fails when its loss exceeds `divergence_factor` × the initial
    /// loss for `divergence_patience` consecutive iterations.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
    /// Keep the SH basis fixed with respect to the ray direction.
    pub frozen_sh_basis: bool,
    /// Sample spacing as a fraction of the voxel size.
    pub step_fraction: f64,
    pub seed: u64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            rays_per_iteration: 2048,
            iterations: 40,
            lr_rotation: 1e-3,
            lr_translation: 1e-3,
            lr_final_factor: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lambda_d: 1.0,
            color_weight: 1.0,
            init: InitPolicy::PreviousPose,
            convergence_threshold: 0.0,
            divergence_factor: 10.0,
            divergence_patience: 20,
            frozen_sh_basis: true,
            step_fraction: 0.5,
            seed: 0,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rays_per_iteration > 0
            && self.lr_rotation > 0.0
            && self.lr_translation > 0.0
            && self.lr_final_factor > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.lambda_d >= 0.0
            && self.color_weight >= 0.0
            && self.lambda_d + self.color_weight > 0.0
            && self.step_fraction > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid tracking config {self:?}")))
        }
    }

    pub fn render_settings(&self, grid: &VoxelGrid) -> RenderSettings {
        let mut s = RenderSettings::for_grid(grid);
        s.step = grid.geometry().voxel_size * self.step_fraction;
        s
    }
}

/// Loss and its gradient on the pose chart `[ω; τ]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseGradient {
    pub d_rotation: Vector3<f64>,
    pub d_translation: Vector3<f64>,
    pub loss: f64,
    pub rays_used: usize,
}

impl PoseGradient {
    pub fn as_array(&self) -> [f64; 6] {
        PosePerturbation::new(self.d_rotation, self.d_translation).as_array()
    }

    pub fn norm(&self) -> f64 {
        (self.d_rotation.norm_squared() + self.d_translation.norm_squared()).sqrt()
    }
}

#[derive(Default)]
struct ChunkSum {
    d_rotation: Vector3<f64>,
    d_translation: Vector3<f64>,
    loss: f64,
    count: usize,
}

/// Indices of the pixels with valid depth.
pub fn valid_pixels(frame: &Frame) -> Vec<usize> {
    (0..frame.pixel_count()).filter(|&i| frame.depth_valid(i)).collect()
}

fn evaluate(
    grid: &VoxelGrid,
    frame: &Frame,
    k: &CameraIntrinsics,
    pose: &Pose,
    pixels: &[usize],
    config: &TrackingConfig,
    settings: &RenderSettings,
    bases: Option<&[ShBasis]>,
    with_gradient: bool,
) -> Result<PoseGradient> {
    let chunks = map_chunks(pixels, RAY_CHUNK, |ci, chunk| {
        let mut out = ChunkSum::default();
        let mut ws = RayWorkspace::default();
        for (j, &pi) in chunk.iter().enumerate() {
            if !frame.depth_valid(pi) {
                continue;
            }
            let (x, y) = (pi % frame.width as usize, pi / frame.width as usize);
            let Ok(ray) = generate_ray(k, pose, x as f64, y as f64) else {
                continue;
            };
            let r = match bases {
                Some(b) => render_ray_with_basis(grid, &ray, settings, &b[ci * RAY_CHUNK + j], &mut ws),
                None => render_ray(grid, &ray, settings, &mut ws),
            };
            if !r.hit {
                continue;
            }
            let target = frame.color[pi];
            let res_c = [0, 1, 2].map(|c| r.color[c] - target[c]);
            let res_d = r.depth - frame.depth[pi];
            out.loss += config.color_weight * res_c.iter().map(|v| v * v).sum::<f64>()
                + config.lambda_d * res_d * res_d;
            out.count += 1;
            if !with_gradient {
                continue;
            }
            let contrib = sample_contributions(
                &ws,
                res_c.map(|v| 2.0 * config.color_weight * v),
                2.0 * config.lambda_d * res_d,
            );
            let mut g = grad_wrt_ray(grid, &ws, &contrib);
            if !config.frozen_sh_basis {
                g.d_direction += grad_direction_via_basis(grid, &ws, &contrib, &ray.direction);
            }
            let d = ray.direction;
            out.d_translation += g.d_origin;
            out.d_rotation += d.cross(&g.tangent_direction(&d));
        }
        out
    });
    let mut total = ChunkSum::default();
    for c in chunks {
        total.d_rotation += c.d_rotation;
        total.d_translation += c.d_translation;
        total.loss += c.loss;
        total.count += c.count;
    }
    if total.count == 0 {
        return Err(Error::UntrackableFrame);
    }
    let m = total.count as f64;
    let out = PoseGradient {
        d_rotation: total.d_rotation / m,
        d_translation: total.d_translation / m,
        loss: total.loss / m,
        rays_used: total.count,
    };
    if !out.loss.is_finite() {
        return Err(Error::NonFiniteLoss { ray: 0 });
    }
    Ok(out)
}

/// Loss and pose-chart gradient over `pixels` (indices into the frame).
/// Pixels with invalid depth or whose rays hit nothing are skipped.
pub fn pose_gradient(
    grid: &VoxelGrid,
    frame: &Frame,
    k: &CameraIntrinsics,
    pose: &Pose,
    pixels: &[usize],
    config: &TrackingConfig,
) -> Result<PoseGradient> {
    evaluate(grid, frame, k, pose, pixels, config, &config.render_settings(grid), None, true)
}

/// Loss only; with `bases` every pixel's color uses the given SH basis
/// instead of the one of its current ray direction.
pub fn pose_loss(
    grid: &VoxelGrid,
    frame: &Frame,
    k: &CameraIntrinsics,
    pose: &Pose,
    pixels: &[usize],
    config: &TrackingConfig,
    bases: Option<&[ShBasis]>,
) -> Result<f64> {
    if let Some(b) = bases {
        assert_eq!(b.len(), pixels.len());
    }
    evaluate(grid, frame, k, pose, pixels, config, &config.render_settings(grid), bases, false).map(|g| g.loss)
}

#[derive(Clone, Copy, Debug, Default)]
struct Adam {
    m: [f64; 6],
    v: [f64; 6],
    t: i32,
}

impl Adam {
    fn step(&mut self, g: &[f64; 6], lr: [f64; 6], c: &TrackingConfig) -> [f64; 6] {
        self.t += 1;
        let b1 = 1.0 - c.beta1.powi(self.t);
        let b2 = 1.0 - c.beta2.powi(self.t);
        let mut delta = [0.0; 6];
        for i in 0..6 {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g[i] * g[i];
            delta[i] = -lr[i] * (self.m[i] / b1) / ((self.v[i] / b2).sqrt() + c.epsilon);
        }
        delta
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub pose: Pose,
    /// Mini-batch loss at every iteration, before that iteration's update.
    pub losses: Vec<f64>,
    pub iterations: usize,
    /// Set when the optimization diverged; `pose` is then the initial pose.
    pub failed: bool,
    pub elapsed_ms: f64,
}

impl TrackResult {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Aligns `init` to `frame`, returning the pose with the lowest observed
/// mini-batch loss.
pub fn track_frame(
    grid: &VoxelGrid,
    frame: &Frame,
    k: &CameraIntrinsics,
    init: &Pose,
    config: &TrackingConfig,
    rng: &mut impl Rng,
) -> Result<TrackResult> {
    config.validate()?;
    let start = Instant::now();
    let settings = config.render_settings(grid);
    let valid = valid_pixels(frame);
    if valid.is_empty() {
        return Err(Error::UntrackableFrame);
    }
    let mut pose = *init;
    let mut best = (f64::INFINITY, *init);
    let mut adam = Adam::default();
    let mut losses = Vec::with_capacity(config.iterations);
    let mut over = 0usize;
    let mut pixels = Vec::with_capacity(config.rays_per_iteration);
    let n = config.iterations;
    for it in 0..n {
        pixels.clear();
        if config.rays_per_iteration >= valid.len() {
            pixels.extend_from_slice(&valid);
        } else {
            pixels.extend((0..config.rays_per_iteration).map(|_| valid[rng.random_range(0..valid.len())]));
        }
        let g = evaluate(grid, frame, k, &pose, &pixels, config, &settings, None, true)?;
        losses.push(g.loss);
        if g.loss < best.0 {
            best = (g.loss, pose);
        }
        if g.loss > config.divergence_factor * losses[0] {
            over += 1;
            if over >= config.divergence_patience {
                return Ok(TrackResult {
                    pose: *init,
                    losses,
                    iterations: it + 1,
                    failed: true,
                    elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
                });
            }
        } else {
            over = 0;
        }
        let scale = config.lr_final_factor.powf(it as f64 / (n.max(2) - 1) as f64);
        let (lr_r, lr_t) = (config.lr_rotation * scale, config.lr_translation * scale);
        let delta = adam.step(&g.as_array(), [lr_r, lr_r, lr_r, lr_t, lr_t, lr_t], config);
        let step = PosePerturbation::from_array(delta);
        pose = pose.perturbed(&step);
        debug_assert!((pose.rotation.norm() - 1.0).abs() < 1e-9);
        if step.rotation.norm() + step.translation.norm() < config.convergence_threshold {
            let g = evaluate(grid, frame, k, &pose, &pixels, config, &settings, None, false)?;
            if g.loss < best.0 {
                best = (g.loss, pose);
            }
            return Ok(TrackResult {
                pose: best.1,
                losses,
                iterations: it + 1,
                failed: false,
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok(TrackResult {
        pose: best.1,
        losses,
        iterations: n,
        failed: false,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Per-frame outcome of [`track_sequence`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameStatus {
    pub frame: usize,
    pub timestamp: f64,
    pub iterations: usize,
    pub final_loss: f64,
    pub elapsed_ms: f64,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceResult {
    pub trajectory: Trajectory,
    pub statuses: Vec<FrameStatus>,
    /// Mini-batch loss at the first iteration of every tracked frame.
    pub first_losses: Vec<f64>,
}

impl SequenceResult {
    pub fn status_csv(&self) -> String {
        let mut s = String::from("frame,timestamp,iterations,final_loss,elapsed_ms,failed\n");
        for st in &self.statuses {
            let _ = writeln!(
                s,
                "{},{:.9},{},{:.9e},{:.3},{}",
                st.frame, st.timestamp, st.iterations, st.final_loss, st.elapsed_ms, st.failed as u8
            );
        }
        s
    }
}

/// Initial pose for the next frame from the last two estimates.
pub fn predict_pose(policy: InitPolicy, prev: &Pose, before: Option<&Pose>) -> Pose {
    match (policy, before) {
        (InitPolicy::ConstantVelocity, Some(b)) => {
            let velocity = prev.compose(&b.inverse());
            velocity.compose(prev)
        }
        _ => *prev,
    }
}

/// Tracks every frame in order, starting from the first frame's
/// ground-truth pose. Frames that fail keep the last good pose and tracking
/// continues from it.
pub fn track_sequence(grid: &VoxelGrid, dataset: &Dataset, config: &TrackingConfig) -> Result<SequenceResult> {
    config.validate()?;
    let first = dataset
        .frames
        .first()
        .ok_or_else(|| Error::Dataset("dataset has no frames".into()))?;
    let first_pose = first
        .gt_pose
        .ok_or_else(|| Error::Dataset("the first frame needs a pose to anchor tracking".into()))?;
    let k = &dataset.intrinsics;
    let probe = valid_pixels(first);
    pose_gradient(grid, first, k, &first_pose, &probe, config)?;

    let mut entries = vec![(first.timestamp, first_pose)];
    let mut statuses = vec![FrameStatus {
        frame: 0,
        timestamp: first.timestamp,
        iterations: 0,
        final_loss: 0.0,
        elapsed_ms: 0.0,
        failed: false,
    }];
    let mut first_losses = Vec::new();
    let mut good: Vec<Pose> = vec![first_pose];
    for (i, frame) in dataset.frames.iter().enumerate().skip(1) {
        let prev = good[good.len() - 1];
        let before = good.len().checked_sub(2).map(|j| good[j]);
        let init = predict_pose(config.init, &prev, before.as_ref());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        let (pose, status) = match track_frame(grid, frame, k, &init, config, &mut rng) {
            Ok(r) => {
                if let Some(&l) = r.losses.first() {
                    first_losses.push(l);
                }
                let st = FrameStatus {
                    frame: i,
                    timestamp: frame.timestamp,
                    iterations: r.iterations,
                    final_loss: r.final_loss(),
                    elapsed_ms: r.elapsed_ms,
                    failed: r.failed,
                };
                if r.failed {
                    (prev, st)
                } else {
                    good.push(r.pose);
                    (r.pose, st)
                }
            }
            Err(Error::UntrackableFrame) => (
                prev,
                FrameStatus {
                    frame: i,
                    timestamp: frame.timestamp,
                    iterations: 0,
                    final_loss: f64::NAN,
                    elapsed_ms: 0.0,
                    failed: true,
                },
            ),
            Err(e) => return Err(e),
        };
        if status.failed {
            log::warn!("frame {i}: tracking failed, keeping the last good pose");
        }
        entries.push((frame.timestamp, pose));
        statuses.push(status);
    }
    Ok(SequenceResult {
        trajectory: Trajectory::new(entries)?,
        statuses,
        first_losses,
    })
}
