//! Ray-cast scenes built from a box-shaped room and embedded spheres/boxes.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generators::TrajectorySpec;
use super::{Dataset, Frame};
use crate::camera::{generate_ray, CameraIntrinsics, Pose};
use crate::{Error, Result};

/// Flat albedo, optionally modulated by a checkerboard. `checker` is the
/// square size in meters; dark squares are scaled by `checker_contrast`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub albedo: [f64; 3],
    #[serde(default)]
    pub checker: Option<f64>,
    #[serde(default = "default_contrast")]
    pub checker_contrast: f64,
}

fn default_contrast() -> f64 {
    0.4
}

impl Surface {
    pub fn plain(albedo: [f64; 3]) -> Self {
        Self {
            albedo,
            checker: None,
            checker_contrast: default_contrast(),
        }
    }

    pub fn checkered(albedo: [f64; 3], period: f64) -> Self {
        Self {
            checker: Some(period),
            ..Self::plain(albedo)
        }
    }

    fn shade(&self, uv: [f64; 2]) -> [f64; 3] {
        match self.checker {
            Some(p) if p > 0.0 => {
                let parity = ((uv[0] / p).floor() + (uv[1] / p).floor()).rem_euclid(2.0);
                let k = if parity < 0.5 { 1.0 } else { self.checker_contrast };
                self.albedo.map(|a| a * k)
            }
            _ => self.albedo,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        surface: Surface,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        surface: Surface,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    /// One surface for every wall, or six ordered `-x, +x, -y, +y, -z, +z`.
    pub walls: Vec<Surface>,
    #[serde(default)]
    pub primitives: Vec<Primitive>,
    pub trajectory: TrajectorySpec,
    pub frame_count: usize,
    pub width: u32,
    pub height: u32,
    /// Focal length in pixels; the principal point is the image center.
    pub focal: f64,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
    /// Standard deviation of additive depth noise, meters.
    #[serde(default)]
    pub depth_noise: f64,
    /// Probability that a depth pixel is reported invalid.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_frame_period")]
    pub frame_period: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_depth_scale() -> f64 {
    1000.0
}

fn default_frame_period() -> f64 {
    1.0 / 30.0
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Nearest surface hit: distance along the ray and shaded color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub color: [f64; 3],
}

fn tangent_uv(p: &Vector3<f64>, axis: usize) -> [f64; 2] {
    [p[(axis + 1) % 3], p[(axis + 2) % 3]]
}

fn slab(o: &Vector3<f64>, d: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> (f64, usize, f64, usize) {
    let (mut t_in, mut ax_in, mut t_out, mut ax_out) = (f64::NEG_INFINITY, 0, f64::INFINITY, 0);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return (f64::INFINITY, a, f64::NEG_INFINITY, a);
            }
            continue;
        }
        let (t0, t1) = {
            let ta = (lo[a] - o[a]) / d[a];
            let tb = (hi[a] - o[a]) / d[a];
            (ta.min(tb), ta.max(tb))
        };
        if t0 > t_in {
            t_in = t0;
            ax_in = a;
        }
        if t1 < t_out {
            t_out = t1;
            ax_out = a;
        }
    }
    (t_in, ax_in, t_out, ax_out)
}

impl Primitive {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        match self {
            Primitive::Sphere { center, radius, .. } => (p - v3(*center)).norm() <= *radius,
            Primitive::Box { min, max, .. } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
        }
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        match self {
            Primitive::Sphere {
                center,
                radius,
                surface,
            } => {
                let c = v3(*center);
                let oc = o - c;
                let b = d.dot(&oc);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                if t <= 0.0 {
                    return None;
                }
                let n = (o + d * t - c) / *radius;
                // latitude/longitude scaled to arc length
                let uv = [n.z.atan2(n.x) * radius, n.y.clamp(-1.0, 1.0).asin() * radius];
                Some(Hit {
                    t,
                    color: surface.shade(uv),
                })
            }
            Primitive::Box { min, max, surface } => {
                let (t_in, axis, t_out, _) = slab(o, d, &v3(*min), &v3(*max));
                if t_in > t_out || t_in <= 0.0 {
                    return None;
                }
                let p = o + d * t_in;
                Some(Hit {
                    t: t_in,
                    color: surface.shade(tangent_uv(&p, axis)),
                })
            }
        }
    }
}

impl SceneSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let mut k = CameraIntrinsics::centered(self.width, self.height, self.focal)?;
        k.depth_scale = self.depth_scale;
        k.validate()?;
        Ok(k)
    }

    fn wall(&self, axis: usize, positive: bool) -> &Surface {
        if self.walls.len() == 6 {
            &self.walls[2 * axis + positive as usize]
        } else {
            &self.walls[0]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_count == 0 {
            return Err(Error::Config("frame_count must be at least 1".into()));
        }
        if !(self.walls.len() == 1 || self.walls.len() == 6) {
            return Err(Error::Config(format!(
                "walls must list 1 or 6 surfaces, found {}",
                self.walls.len()
            )));
        }
        if (0..3).any(|a| !(self.room_max[a] > self.room_min[a])) {
            return Err(Error::Config("room_max must exceed room_min on every axis".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) || !(self.depth_noise >= 0.0) {
            return Err(Error::Config("dropout must be in [0, 1] and depth_noise ≥ 0".into()));
        }
        for p in &self.primitives {
            let bad = match p {
                Primitive::Sphere { radius, .. } => !(*radius > 0.0),
                Primitive::Box { min, max, .. } => (0..3).any(|a| !(max[a] > min[a])),
            };
            if bad {
                return Err(Error::Config(format!("degenerate primitive {p:?}")));
            }
        }
        Ok(())
    }

    /// Nearest hit of a ray starting inside the room.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Hit {
        let (_, _, t_out, axis) = slab(o, d, &v3(self.room_min), &v3(self.room_max));
        let p = o + d * t_out;
        let mut best = Hit {
            t: t_out,
            color: self.wall(axis, d[axis] > 0.0).shade(tangent_uv(&p, axis)),
        };
        for prim in &self.primitives {
            if let Some(h) = prim.intersect(o, d) {
                if h.t < best.t {
                    best = h;
                }
            }
        }
        best
    }
}

/// Ray-casts every frame of `spec`. Returns the dataset (quantized to file
/// precision, noise and dropout applied) and the full-precision analytic
/// depth per frame.
pub fn synth_from_primitives(spec: &SceneSpec) -> Result<(Dataset, Vec<Vec<f64>>)> {
    spec.validate()?;
    let k = spec.intrinsics()?;
    let trajectory = spec.trajectory.trajectory(spec.frame_count, spec.frame_period)?;
    for (i, (_, pose)) in trajectory.entries().iter().enumerate() {
        let o = pose.translation;
        if (0..3).any(|a| !(o[a] > spec.room_min[a] && o[a] < spec.room_max[a])) {
            return Err(Error::DegenerateScene(format!("camera {i} is outside the room")));
        }
        if let Some(p) = spec.primitives.iter().find(|p| p.contains(&o)) {
            return Err(Error::DegenerateScene(format!("camera {i} is inside primitive {p:?}")));
        }
    }
    let noise = Normal::new(0.0, spec.depth_noise.max(0.0))
        .map_err(|e| Error::Config(format!("depth_noise: {e}")))?;

    let rendered: Vec<(Frame, Vec<f64>)> = trajectory
        .entries()
        .par_iter()
        .enumerate()
        .map(|(fi, (t, pose))| render_frame(spec, &k, pose, *t, fi as u64, &noise))
        .collect::<Result<_>>()?;
    let (frames, exact): (Vec<Frame>, Vec<Vec<f64>>) = rendered.into_iter().unzip();
    let mut ds = Dataset {
        intrinsics: k,
        frames,
        exact_depth: Some(exact.clone()),
        metadata: serde_json::json!({
            "generator": "primitives",
            "seed": spec.seed,
            "spec": spec,
        }),
    };
    ds.quantize();
    Ok((ds, exact))
}

fn render_frame(
    spec: &SceneSpec,
    k: &CameraIntrinsics,
    pose: &Pose,
    timestamp: f64,
    index: u64,
    noise: &Normal<f64>,
) -> Result<(Frame, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mut frame = Frame::new(k.width, k.height, timestamp);
    frame.gt_pose = Some(*pose);
    let mut exact = vec![0.0; frame.pixel_count()];
    for y in 0..k.height {
        for x in 0..k.width {
            let i = frame.index(x, y);
            let ray = generate_ray(k, pose, x as f64, y as f64)?;
            let hit = spec.cast(&ray.origin, &ray.direction);
            frame.color[i] = hit.color;
            exact[i] = hit.t;
            let mut d = hit.t;
            if spec.depth_noise > 0.0 {
                d += noise.sample(&mut rng);
            }
            if spec.dropout > 0.0 && rng.random_bool(spec.dropout) {
                d = 0.0;
            }
            frame.depth[i] = d.max(0.0);
        }
    }
    Ok((frame, exact))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generators::Look;

    fn room(primitives: Vec<Primitive>, look: [f64; 3]) -> SceneSpec {
        SceneSpec {
            room_min: [-2.0, -1.5, -2.0],
            room_max: [2.0, 1.5, 2.0],
            walls: vec![Surface::plain([0.7, 0.7, 0.7])],
            primitives,
            trajectory: TrajectorySpec::Line {
                start: [0.0; 3],
                end: [0.0; 3],
                look: Look::Direction(look),
            },
            frame_count: 1,
            width: 41,
            height: 31,
            focal: 30.0,
            depth_scale: 1000.0,
            depth_noise: 0.0,
            dropout: 0.0,
            frame_period: 0.1,
            seed: 1,
        }
    }

    #[test]
    fn head_on_wall_depth() {
        let spec = room(vec![], [0.0, 0.0, 1.0]);
        let (ds, exact) = synth_from_primitives(&spec).unwrap();
        let c = ds.frames[0].index(20, 15);
        assert_eq!(exact[0][c], 2.0);
        assert_eq!(ds.frames[0].color[c], [179.0 / 255.0; 3]);
    }

    #[test]
    fn sphere_on_axis_depth() {
        let spec = room(
            vec![Primitive::Sphere {
                center: [0.0, 0.0, 2.0],
                radius: 0.5,
                surface: Surface::checkered([0.9, 0.2, 0.2], 0.1),
            }],
            [0.0, 0.0, 1.0],
        );
        let (ds, exact) = synth_from_primitives(&spec).unwrap();
        assert_eq!(exact[0][ds.frames[0].index(20, 15)], 1.5);
    }

    #[test]
    fn hit_points_lie_on_surfaces() {
        let sphere = Primitive::Sphere {
            center: [0.4, 0.1, 1.2],
            radius: 0.35,
            surface: Surface::plain([0.5; 3]),
        };
        let cube = Primitive::Box {
            min: [-1.0, -0.5, 0.8],
            max: [-0.4, 0.2, 1.4],
            surface: Surface::checkered([0.2, 0.8, 0.3], 0.05),
        };
        let mut spec = room(vec![sphere, cube], [0.0, 0.0, 1.0]);
        spec.width = 64;
        spec.height = 48;
        spec.focal = 25.0;
        let k = spec.intrinsics().unwrap();
        let (ds, exact) = synth_from_primitives(&spec).unwrap();
        let pose = ds.frames[0].gt_pose.unwrap();
        let mut hits = [0usize; 3];
        for y in 0..k.height {
            for x in 0..k.width {
                let ray = generate_ray(&k, &pose, x as f64, y as f64).unwrap();
                let p = ray.at(exact[0][(y * k.width + x) as usize]);
                let on_sphere = ((p - Vector3::new(0.4, 0.1, 1.2)).norm() - 0.35).abs() < 1e-9;
                let in_box = (0..3).all(|a| p[a] >= [-1.0, -0.5, 0.8][a] - 1e-9 && p[a] <= [-0.4, 0.2, 1.4][a] + 1e-9);
                let on_box = in_box
                    && (0..3).any(|a| (p[a] - [-1.0, -0.5, 0.8][a]).abs() < 1e-9 || (p[a] - [-0.4, 0.2, 1.4][a]).abs() < 1e-9);
                let on_wall = (0..3).any(|a| {
                    (p[a] - spec.room_min[a]).abs() < 1e-9 || (p[a] - spec.room_max[a]).abs() < 1e-9
                });
                assert!(on_sphere || on_box || on_wall, "pixel ({x},{y}) hit {p:?}");
                hits[if on_sphere { 0 } else if on_box { 1 } else { 2 }] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h > 0), "{hits:?}");
    }

    #[test]
    fn dropout_rate_matches_probability() {
        let mut spec = room(vec![], [0.0, 0.0, 1.0]);
        spec.width = 640;
        spec.height = 480;
        spec.focal = 500.0;
        spec.dropout = 0.1;
        let (ds, _) = synth_from_primitives(&spec).unwrap();
        let n = ds.frames[0].pixel_count();
        let invalid = n - ds.frames[0].valid_depth_count();
        let frac = invalid as f64 / n as f64;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
    }

    #[test]
    fn camera_inside_primitive_is_rejected() {
        let spec = room(
            vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 0.2,
                surface: Surface::plain([1.0; 3]),
            }],
            [0.0, 0.0, 1.0],
        );
        assert!(matches!(synth_from_primitives(&spec), Err(Error::DegenerateScene(_))));
    }

    #[test]
    fn noise_is_seeded_per_frame() {
        let mut spec = room(vec![], [0.0, 0.0, 1.0]);
        spec.depth_noise = 0.01;
        spec.frame_count = 3;
        spec.trajectory = TrajectorySpec::Line {
            start: [0.0; 3],
            end: [0.2, 0.0, 0.0],
            look: Look::Direction([0.0, 0.0, 1.0]),
        };
        let (a, _) = synth_from_primitives(&spec).unwrap();
        let (b, _) = synth_from_primitives(&spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.frames[0].depth, a.frames[1].depth);
    }

    #[test]
    fn spec_parses_from_json() {
        let text = r#"{
            "room_min": [-2, -1.5, -2], "room_max": [2, 1.5, 2],
            "walls": [{"albedo": [0.6, 0.6, 0.6]}],
            "primitives": [{"kind": "sphere", "center": [0, 0, 1], "radius": 0.3,
                            "surface": {"albedo": [1, 0, 0], "checker": 0.1}}],
            "trajectory": {"kind": "circle", "center": [0, 0, 0], "radius": 0.2, "look": "outward"},
            "frame_count": 4, "width": 32, "height": 24, "focal": 30
        }"#;
        let spec: SceneSpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.depth_scale, 1000.0);
        assert!(spec.validate().is_ok());
    }
}
