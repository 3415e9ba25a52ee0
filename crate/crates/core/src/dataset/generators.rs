//! Camera trajectories, smooth random voxel scenes, and datasets rendered
//! from a voxel grid.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Frame};
use crate::camera::{CameraIntrinsics, Pose};
use crate::eval::Trajectory;
use crate::grid::{GridGeometry, VertexPayload, VoxelGrid, DEFAULT_PRUNE_THRESHOLD};
use crate::render::{render_image, RenderSettings};
use crate::sh::SH_C0;
use crate::{Error, Result};

/// Where a camera on a trajectory points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Look {
    /// A fixed world point.
    At([f64; 3]),
    /// A fixed world direction.
    Direction([f64; 3]),
    /// Horizontally away from the circle center (circle trajectories only).
    Outward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub position: [f64; 3],
    pub target: [f64; 3],
}

/// Camera path. World `+y` is up; cameras never roll.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// Horizontal circle or arc around `center`. A sweep of 360° or more
    /// spaces frames evenly without repeating the start pose.
    Circle {
        center: [f64; 3],
        radius: f64,
        #[serde(default)]
        start_deg: f64,
        #[serde(default = "full_turn")]
        sweep_deg: f64,
        look: Look,
    },
    Line {
        start: [f64; 3],
        end: [f64; 3],
        look: Look,
    },
    /// Piecewise-linear interpolation of positions and look-at targets.
    Waypoints { points: Vec<Waypoint> },
}

fn full_turn() -> f64 {
    360.0
}

const UP: Vector3<f64> = Vector3::new(0.0, 1.0, 0.0);

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn looking(eye: Vector3<f64>, dir: Vector3<f64>) -> Result<Pose> {
    let n = dir.norm();
    if !(n > 1e-12) || dir.cross(&UP).norm() < 1e-6 * n {
        return Err(Error::Trajectory(format!(
            "view direction {dir:?} is degenerate or parallel to the up axis"
        )));
    }
    Ok(Pose::look_at(eye, eye + dir / n, UP))
}

impl TrajectorySpec {
    pub fn positions(&self, frames: usize) -> Vec<Vector3<f64>> {
        self.poses(frames)
            .map(|p| p.into_iter().map(|p| p.translation).collect())
            .unwrap_or_default()
    }

    pub fn poses(&self, frames: usize) -> Result<Vec<Pose>> {
        if frames == 0 {
            return Err(Error::Trajectory("frame count must be at least 1".into()));
        }
        let frac = |i: usize| {
            if frames == 1 {
                0.0
            } else {
                i as f64 / (frames - 1) as f64
            }
        };
        match self {
            TrajectorySpec::Circle {
                center,
                radius,
                start_deg,
                sweep_deg,
                look,
            } => {
                let c = v3(*center);
                (0..frames)
                    .map(|i| {
                        let s = if *sweep_deg >= 360.0 {
                            i as f64 / frames as f64
                        } else {
                            frac(i)
                        };
                        let theta = (start_deg + sweep_deg * s).to_radians();
                        let radial = Vector3::new(theta.cos(), 0.0, theta.sin());
                        let eye = c + radial * *radius;
                        let dir = match look {
                            Look::At(t) => v3(*t) - eye,
                            Look::Direction(d) => v3(*d),
                            Look::Outward => radial,
                        };
                        looking(eye, dir)
                    })
                    .collect()
            }
            TrajectorySpec::Line { start, end, look } => {
                let (a, b) = (v3(*start), v3(*end));
                (0..frames)
                    .map(|i| {
                        let eye = a + (b - a) * frac(i);
                        let dir = match look {
                            Look::At(t) => v3(*t) - eye,
                            Look::Direction(d) => v3(*d),
                            Look::Outward => {
                                return Err(Error::Trajectory(
                                    "outward look needs a circle trajectory".into(),
                                ))
                            }
                        };
                        looking(eye, dir)
                    })
                    .collect()
            }
            TrajectorySpec::Waypoints { points } => {
                if points.is_empty() {
                    return Err(Error::Trajectory("waypoint list is empty".into()));
                }
                (0..frames)
                    .map(|i| {
                        let s = frac(i) * (points.len() - 1) as f64;
                        let k = (s.floor() as usize).min(points.len().saturating_sub(2));
                        let (p, t) = if points.len() == 1 {
                            (v3(points[0].position), v3(points[0].target))
                        } else {
                            let a = s - k as f64;
                            let (w0, w1) = (&points[k], &points[k + 1]);
                            (
                                v3(w0.position).lerp(&v3(w1.position), a),
                                v3(w0.target).lerp(&v3(w1.target), a),
                            )
                        };
                        looking(p, t - p)
                    })
                    .collect()
            }
        }
    }

    /// Poses stamped at `index · frame_period` seconds.
    pub fn trajectory(&self, frames: usize, frame_period: f64) -> Result<Trajectory> {
        let poses = self.poses(frames)?;
        Trajectory::new(
            poses
                .into_iter()
                .enumerate()
                .map(|(i, p)| (i as f64 * frame_period, p))
                .collect(),
        )
    }
}

/// Renders one frame per trajectory pose from `grid`. Color and depth are
/// quantized to their file precision so the result equals what a save/load
/// cycle returns.
pub fn synth_from_grid(
    grid: &VoxelGrid,
    trajectory: &Trajectory,
    intrinsics: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<Dataset> {
    intrinsics.validate()?;
    let (lo, hi) = grid.geometry().bounds();
    for (i, p) in trajectory.poses().enumerate() {
        let t = p.translation;
        if (0..3).any(|a| t[a] < lo[a] || t[a] > hi[a]) {
            return Err(Error::Trajectory(format!(
                "pose {i} at {:?} lies outside the grid bounds",
                t.as_slice()
            )));
        }
    }
    let mut frames = Vec::with_capacity(trajectory.len());
    for (t, pose) in trajectory.entries() {
        let img = render_image(grid, intrinsics, pose, 1, settings)?;
        frames.push(Frame::from_render(&img, *t, Some(*pose)));
    }
    let mut ds = Dataset {
        intrinsics: *intrinsics,
        frames,
        exact_depth: None,
        metadata: serde_json::json!({
            "generator": "grid",
            "grid_checksum": grid.checksum(),
            "grid_resolution": grid.geometry().resolution,
            "voxel_size": grid.geometry().voxel_size,
        }),
    };
    ds.quantize();
    Ok(ds)
}

/// Smooth random scene: blurred-noise blobs inside a closed shell, with a
/// spherical free region for the cameras and blurred-noise colors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomGridSpec {
    /// Cells per axis.
    pub resolution: usize,
    pub min: [f64; 3],
    /// Cube edge, meters.
    pub size: f64,
    pub seed: u64,
    /// Density inside solid material, 1/m.
    pub sigma_max: f64,
    /// Approximate fraction of the volume filled by blobs.
    pub blob_fill: f64,
    /// Width of the blob surface transition in noise standard deviations.
    pub blob_softness: f64,
    /// Box-blur passes for the density and color noise fields.
    pub density_smoothing: usize,
    pub color_smoothing: usize,
    /// Thickness of the solid outer shell, cells (0 disables it).
    pub shell_cells: f64,
    pub free_center: [f64; 3],
    /// Radius around `free_center` kept empty, meters.
    pub free_radius: f64,
    /// Standard deviation of the diffuse color around mid-gray.
    pub color_amplitude: f64,
    /// Standard deviation of the degree-1/2 SH coefficients.
    pub view_dependence: f64,
}

impl Default for RandomGridSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            min: [-1.0, -1.0, -1.0],
            size: 2.0,
            seed: 0,
            sigma_max: 100.0,
            blob_fill: 0.12,
            blob_softness: 0.25,
            density_smoothing: 6,
            color_smoothing: 2,
            shell_cells: 3.0,
            free_center: [0.0, 0.0, 0.0],
            free_radius: 0.5,
            color_amplitude: 0.18,
            view_dependence: 0.05,
        }
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// In-place separable `[1, 1, 1] / 3` blur with clamped edges.
fn box_blur(field: &mut [f64], dims: [usize; 3], passes: usize) {
    let [nx, ny, nz] = dims;
    let stride = [1, nx, nx * ny];
    let mut tmp = vec![0.0; field.len()];
    for _ in 0..passes {
        for axis in 0..3 {
            let n = dims[axis];
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let c = [x, y, z];
                        let i = x + nx * (y + ny * z);
                        let lo = if c[axis] > 0 { i - stride[axis] } else { i };
                        let hi = if c[axis] + 1 < n { i + stride[axis] } else { i };
                        tmp[i] = (field[lo] + field[i] + field[hi]) / 3.0;
                    }
                }
            }
            field.copy_from_slice(&tmp);
        }
    }
}

fn standardize(field: &mut [f64]) {
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let std = if std > 0.0 { std } else { 1.0 };
    for v in field.iter_mut() {
        *v = (*v - mean) / std;
    }
}

fn noise_field(rng: &mut impl Rng, dims: [usize; 3], passes: usize) -> Vec<f64> {
    let mut f: Vec<f64> = (0..dims[0] * dims[1] * dims[2])
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    box_blur(&mut f, dims, passes);
    standardize(&mut f);
    f
}

pub fn random_smoothed_grid(spec: &RandomGridSpec) -> Result<VoxelGrid> {
    if !(spec.blob_fill >= 0.0 && spec.blob_fill < 1.0) {
        return Err(Error::Config(format!("blob_fill {} outside [0, 1)", spec.blob_fill)));
    }
    let n = spec.resolution;
    let geometry = GridGeometry::new([n; 3], v3(spec.min), spec.size / n as f64)?;
    let dims = geometry.vertex_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blobs = noise_field(&mut rng, dims, spec.density_smoothing);
    let colors: Vec<Vec<f64>> = (0..3)
        .map(|_| noise_field(&mut rng, dims, spec.color_smoothing))
        .collect();
    let view: Vec<Vec<f64>> = (0..24)
        .map(|_| noise_field(&mut rng, dims, spec.color_smoothing))
        .collect();

    let mut sorted = blobs.clone();
    sorted.sort_by(f64::total_cmp);
    let q = ((1.0 - spec.blob_fill) * (sorted.len() - 1) as f64).round() as usize;
    let threshold = if spec.blob_fill > 0.0 { sorted[q] } else { f64::INFINITY };
    let soft = spec.blob_softness.max(1e-6);

    let mut grid = VoxelGrid::empty(geometry.clone());
    let free_center = v3(spec.free_center);
    let ramp = 2.0 * geometry.voxel_size;
    for v in 0..geometry.vertex_count() {
        let [x, y, z] = geometry.vertex_coords(v);
        let blob = smoothstep((blobs[v] - threshold) / soft + 0.5);
        let edge = [x, y, z]
            .iter()
            .map(|&c| c.min(n - c) as f64)
            .fold(f64::INFINITY, f64::min);
        let shell = if spec.shell_cells > 0.0 {
            smoothstep(spec.shell_cells - edge)
        } else {
            0.0
        };
        let p = geometry.vertex_position(x, y, z);
        let carve = smoothstep(((p - free_center).norm() - spec.free_radius) / ramp);
        let occupancy = blob.max(shell) * carve;

        let mut payload = VertexPayload {
            sigma: spec.sigma_max * occupancy,
            sh: [[0.0; 9]; 3],
        };
        for ch in 0..3 {
            payload.sh[ch][0] = spec.color_amplitude * colors[ch][v] / SH_C0;
            for m in 1..9 {
                payload.sh[ch][m] = spec.view_dependence * view[ch * 8 + m - 1][v];
            }
        }
        grid.set_vertex(v, &payload);
    }
    grid.quantize_to_f32();
    grid.prune(DEFAULT_PRUNE_THRESHOLD);
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::render_image;

    #[test]
    fn circle_poses_lie_on_circle_and_face_outward() {
        let spec = TrajectorySpec::Circle {
            center: [0.0, 0.5, 0.0],
            radius: 0.3,
            start_deg: 0.0,
            sweep_deg: 360.0,
            look: Look::Outward,
        };
        let poses = spec.poses(12).unwrap();
        for p in &poses {
            let r = p.translation - Vector3::new(0.0, 0.5, 0.0);
            assert!((r.norm() - 0.3).abs() < 1e-12);
            let forward = p.rotation * Vector3::z();
            assert!((forward - r / 0.3).norm() < 1e-12);
            // no roll: image x axis stays horizontal
            assert!((p.rotation * Vector3::x()).y.abs() < 1e-12);
        }
        assert!((poses[0].translation - poses[11].translation).norm() > 0.1);
    }

    #[test]
    fn arc_endpoints_and_line_targets() {
        let arc = TrajectorySpec::Circle {
            center: [0.0; 3],
            radius: 1.0,
            start_deg: 0.0,
            sweep_deg: 90.0,
            look: Look::At([0.0, 0.0, 5.0]),
        };
        let p = arc.poses(3).unwrap();
        assert!((p[0].translation - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((p[2].translation - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);

        let line = TrajectorySpec::Line {
            start: [0.0; 3],
            end: [1.0, 0.0, 0.0],
            look: Look::Direction([0.0, 0.0, 1.0]),
        };
        let p = line.poses(5).unwrap();
        assert!((p[4].translation.x - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|q| q.rotation_angle_to(&p[0]) < 1e-12));
        assert!((p[0].rotation * Vector3::z() - Vector3::z()).norm() < 1e-12);
        assert!(TrajectorySpec::Line {
            start: [0.0; 3],
            end: [0.0; 3],
            look: Look::Direction([0.0, 1.0, 0.0]),
        }
        .poses(2)
        .is_err());
    }

    #[test]
    fn waypoints_interpolate() {
        let spec = TrajectorySpec::Waypoints {
            points: vec![
                Waypoint { position: [0.0; 3], target: [0.0, 0.0, 1.0] },
                Waypoint { position: [2.0, 0.0, 0.0], target: [2.0, 0.0, 1.0] },
            ],
        };
        let p = spec.poses(3).unwrap();
        assert!((p[1].translation - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        let t = spec.trajectory(3, 0.5).unwrap();
        assert_eq!(t.entries()[2].0, 1.0);
    }

    #[test]
    fn random_grid_is_deterministic_with_free_center() {
        let spec = RandomGridSpec {
            resolution: 16,
            seed: 9,
            ..Default::default()
        };
        let a = random_smoothed_grid(&spec).unwrap();
        let b = random_smoothed_grid(&spec).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = a.trilerp(&Vector3::zeros()).unwrap();
        assert_eq!(c.sigma, 0.0);
        let corner = a.trilerp(&Vector3::new(-0.99, -0.99, -0.99)).unwrap();
        assert!(corner.sigma > 50.0);
        assert!(a.occupancy().count_active() < a.geometry().cell_count());
    }

    #[test]
    fn empty_grid_gives_background_frames() {
        let geo = GridGeometry::new([4; 3], Vector3::new(-1.0, -1.0, -1.0), 0.5).unwrap();
        let grid = VoxelGrid::empty(geo);
        let k = CameraIntrinsics::centered(8, 6, 8.0).unwrap();
        let traj = Trajectory::new(vec![(0.0, Pose::identity())]).unwrap();
        let ds = synth_from_grid(&grid, &traj, &k, &RenderSettings::for_grid(&grid)).unwrap();
        assert_eq!(ds.frames.len(), 1);
        assert!(ds.frames[0].color.iter().all(|c| *c == [0.0; 3]));
        assert_eq!(ds.frames[0].valid_depth_count(), 0);
    }

    #[test]
    fn single_pose_matches_render_image() {
        let grid = random_smoothed_grid(&RandomGridSpec {
            resolution: 12,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let k = CameraIntrinsics::centered(10, 8, 9.0).unwrap();
        let pose = Pose::look_at(Vector3::zeros(), Vector3::new(0.2, 0.1, 1.0), UP);
        let traj = Trajectory::new(vec![(0.0, pose)]).unwrap();
        let settings = RenderSettings::for_grid(&grid);
        let ds = synth_from_grid(&grid, &traj, &k, &settings).unwrap();
        let mut direct = Frame::from_render(&render_image(&grid, &k, &pose, 1, &settings).unwrap(), 0.0, Some(pose));
        direct.quantize(k.depth_scale);
        assert_eq!(ds.frames[0], direct);
        assert_eq!(ds.metadata["grid_checksum"], grid.checksum());
    }
}
