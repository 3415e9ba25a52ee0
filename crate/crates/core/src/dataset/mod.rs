//! RGB-D sequences on disk and synthetic scene generation.
//!
//! Directory layout:
//!
//! ```text
//! intrinsics.json        {fx, fy, cx, cy, width, height, depth_scale}
//! color/000000.png       8-bit RGB
//! depth/000000.png       16-bit, depth_scale units per meter, 0 = invalid
//! depth_exact/000000.png optional noise-free depth
//! poses.txt              TUM lines "timestamp tx ty tz qx qy qz qw" (optional)
//! metadata.json          generator provenance
//! ```
//!
//! Depth values are distances along the pixel ray (the quantity the renderer
//! produces), not z-buffer depth.

mod generators;
mod primitives;

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde_json::Value;

use crate::camera::{CameraIntrinsics, Pose};
use crate::eval::Trajectory;
use crate::render::RenderedImage;
use crate::{Error, Result};

pub use generators::{
    random_smoothed_grid, synth_from_grid, Look, RandomGridSpec, TrajectorySpec, Waypoint,
};
pub use primitives::{synth_from_primitives, Hit, Primitive, SceneSpec, Surface};

/// One RGB-D observation. Images are row-major, `width × height`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    /// Linear RGB in `[0, 1]`.
    pub color: Vec<[f64; 3]>,
    /// Meters along the pixel ray; `0` marks an invalid measurement.
    pub depth: Vec<f64>,
    pub timestamp: f64,
    pub gt_pose: Option<Pose>,
}

impl Frame {
    pub fn new(width: u32, height: u32, timestamp: f64) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            color: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            timestamp,
            gt_pose: None,
        }
    }

    pub fn from_render(img: &RenderedImage, timestamp: f64, pose: Option<Pose>) -> Self {
        Self {
            width: img.width,
            height: img.height,
            color: img.color.clone(),
            depth: img
                .depth
                .iter()
                .zip(&img.hit)
                .map(|(&d, &h)| if h && d > 0.0 { d } else { 0.0 })
                .collect(),
            timestamp,
            gt_pose: pose,
        }
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    pub fn depth_valid(&self, i: usize) -> bool {
        self.depth[i] > 0.0
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    /// Rounds color to 8 bits and depth to the integer grid of `depth_scale`,
    /// i.e. exactly what survives a save/load cycle.
    pub fn quantize(&mut self, depth_scale: f64) {
        for c in self.color.iter_mut() {
            for v in c.iter_mut() {
                *v = color_to_u8(*v) as f64 / 255.0;
            }
        }
        for d in self.depth.iter_mut() {
            *d = depth_to_u16(*d, depth_scale) as f64 / depth_scale;
        }
    }
}

/// `round_half_up(255 · clamp(v, 0, 1))`.
pub fn color_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Depth in file units; non-positive or out-of-range values become `0`.
pub fn depth_to_u16(meters: f64, depth_scale: f64) -> u16 {
    if !(meters > 0.0) {
        return 0;
    }
    let v = (meters * depth_scale + 0.5).floor();
    if v > u16::MAX as f64 {
        0
    } else {
        v as u16
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
    /// Noise-free depth per frame, when the generator knows it.
    pub exact_depth: Option<Vec<Vec<f64>>>,
    pub metadata: Value,
}

impl Dataset {
    pub fn has_poses(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.gt_pose.is_some())
    }

    pub fn trajectory(&self) -> Option<Trajectory> {
        let entries: Option<Vec<_>> = self
            .frames
            .iter()
            .map(|f| f.gt_pose.map(|p| (f.timestamp, p)))
            .collect();
        entries.and_then(|e| Trajectory::new(e).ok())
    }

    pub fn quantize(&mut self) {
        let scale = self.intrinsics.depth_scale;
        for f in self.frames.iter_mut() {
            f.quantize(scale);
        }
        if let Some(exact) = self.exact_depth.as_mut() {
            for d in exact.iter_mut().flatten() {
                *d = depth_to_u16(*d, scale) as f64 / scale;
            }
        }
    }

    /// Every `stride`-th frame.
    pub fn keyframes(&self, stride: usize) -> Vec<&Frame> {
        self.frames.iter().step_by(stride.max(1)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_dataset(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_dataset(dir)
    }
}

fn frame_path(dir: &Path, sub: &str, i: usize) -> PathBuf {
    dir.join(sub).join(format!("{i:06}.png"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_color_png(path: &Path, width: u32, height: u32, color: &[[f64; 3]]) -> Result<()> {
    let bytes: Vec<u8> = color
        .iter()
        .flat_map(|c| c.map(color_to_u8))
        .collect();
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(width, height, bytes)
        .ok_or_else(|| Error::Dataset(format!("{}: size mismatch", path.display())))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_depth_png(path: &Path, width: u32, height: u32, depth: &[f64], depth_scale: f64) -> Result<()> {
    let raw: Vec<u16> = depth.iter().map(|&d| depth_to_u16(d, depth_scale)).collect();
    let img: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(width, height, raw)
        .ok_or_else(|| Error::Dataset(format!("{}: size mismatch", path.display())))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_color_png(path: &Path) -> Result<(u32, u32, Vec<[f64; 3]>)> {
    let img = open_image(path)?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(i) => i,
        image::DynamicImage::ImageRgba8(_) | image::DynamicImage::ImageLuma8(_) => img.to_rgb8(),
        other => {
            return Err(Error::Dataset(format!(
                "{}: expected 8-bit color, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let color = rgb
        .pixels()
        .map(|p| p.0.map(|v| v as f64 / 255.0))
        .collect();
    Ok((w, h, color))
}

pub fn read_depth_png(path: &Path, depth_scale: f64) -> Result<(u32, u32, Vec<f64>)> {
    let img = open_image(path)?;
    let Some(luma) = img.as_luma16() else {
        return Err(Error::Dataset(format!(
            "{}: expected 16-bit single-channel depth, found {:?}",
            path.display(),
            img.color()
        )));
    };
    let (w, h) = luma.dimensions();
    let depth = luma.pixels().map(|p| p.0[0] as f64 / depth_scale).collect();
    Ok((w, h, depth))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let k = &ds.intrinsics;
    for sub in ["color", "depth"] {
        create_dir(&dir.join(sub))?;
    }
    write_json(&dir.join("intrinsics.json"), k)?;
    for (i, f) in ds.frames.iter().enumerate() {
        if (f.width, f.height) != (k.width, k.height) {
            return Err(Error::Dataset(format!(
                "frame {i} is {}x{}, intrinsics say {}x{}",
                f.width, f.height, k.width, k.height
            )));
        }
        write_color_png(&frame_path(dir, "color", i), f.width, f.height, &f.color)?;
        write_depth_png(&frame_path(dir, "depth", i), f.width, f.height, &f.depth, k.depth_scale)?;
    }
    if let Some(exact) = &ds.exact_depth {
        create_dir(&dir.join("depth_exact"))?;
        for (i, d) in exact.iter().enumerate() {
            write_depth_png(&frame_path(dir, "depth_exact", i), k.width, k.height, d, k.depth_scale)?;
        }
    }
    if let Some(traj) = ds.trajectory() {
        traj.save_tum(&dir.join("poses.txt"))?;
    }
    write_json(&dir.join("metadata.json"), &ds.metadata)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let intrinsics: CameraIntrinsics = read_json(&dir.join("intrinsics.json"))?;
    intrinsics.validate()?;
    let mut frames = Vec::new();
    loop {
        let color_path = frame_path(dir, "color", frames.len());
        if !color_path.exists() {
            break;
        }
        let i = frames.len();
        let (w, h, color) = read_color_png(&color_path)?;
        let (dw, dh, depth) = read_depth_png(&frame_path(dir, "depth", i), intrinsics.depth_scale)?;
        if (w, h) != (intrinsics.width, intrinsics.height) || (dw, dh) != (w, h) {
            return Err(Error::Dataset(format!(
                "frame {i}: color {w}x{h}, depth {dw}x{dh}, intrinsics {}x{}",
                intrinsics.width, intrinsics.height
            )));
        }
        frames.push(Frame {
            width: w,
            height: h,
            color,
            depth,
            timestamp: i as f64,
            gt_pose: None,
        });
    }
    if frames.is_empty() {
        return Err(Error::Dataset(format!("{}: no frames found", dir.display())));
    }

    let poses_path = dir.join("poses.txt");
    if poses_path.exists() {
        let traj = Trajectory::load_tum(&poses_path)?;
        if traj.len() != frames.len() {
            return Err(Error::Dataset(format!(
                "poses.txt has {} poses but there are {} frames",
                traj.len(),
                frames.len()
            )));
        }
        for (f, (t, p)) in frames.iter_mut().zip(traj.entries()) {
            f.timestamp = *t;
            f.gt_pose = Some(*p);
        }
    }

    let exact_dir = dir.join("depth_exact");
    let exact_depth = if exact_dir.is_dir() {
        let mut all = Vec::with_capacity(frames.len());
        for i in 0..frames.len() {
            let (_, _, d) = read_depth_png(&frame_path(dir, "depth_exact", i), intrinsics.depth_scale)?;
            all.push(d);
        }
        Some(all)
    } else {
        None
    };

    let meta_path = dir.join("metadata.json");
    let metadata = if meta_path.exists() {
        read_json(&meta_path)?
    } else {
        Value::Null
    };
    Ok(Dataset {
        intrinsics,
        frames,
        exact_depth,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(n: usize, with_poses: bool) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = CameraIntrinsics::centered(12, 9, 10.0).unwrap();
        let frames = (0..n)
            .map(|i| {
                let mut f = Frame::new(12, 9, 0.1 * i as f64 + 0.05);
                for c in f.color.iter_mut() {
                    *c = [rng.random(), rng.random(), rng.random()];
                }
                for d in f.depth.iter_mut() {
                    *d = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.3..6.0) };
                }
                if with_poses {
                    f.gt_pose = Some(Pose::new(
                        UnitQuaternion::from_scaled_axis(Vector3::new(0.1, -0.2, 0.3 * i as f64)),
                        Vector3::new(rng.random(), rng.random(), rng.random()),
                    ));
                }
                f
            })
            .collect();
        let mut ds = Dataset {
            intrinsics: k,
            frames,
            exact_depth: None,
            metadata: serde_json::json!({"generator": "test"}),
        };
        ds.quantize();
        ds
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = random_dataset(3, true);
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.frames.len(), 3);
        for (a, b) in ds.frames.iter().zip(&back.frames) {
            assert_eq!(a.color, b.color);
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.timestamp, b.timestamp);
            let (pa, pb) = (a.gt_pose.unwrap(), b.gt_pose.unwrap());
            assert_eq!(pa.translation, pb.translation);
            assert!(pa.rotation.angle_to(&pb.rotation) < 1e-15);
        }
        // invalid pixels stay exactly zero
        let zeros = ds.frames[0].depth.iter().filter(|&&d| d == 0.0).count();
        assert_eq!(zeros, back.frames[0].depth.iter().filter(|&&d| d == 0.0).count());
        assert_eq!(back.metadata["generator"], "test");
    }

    #[test]
    fn depth_units_convert_to_meters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let raw: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(2, 1, vec![5000u16, 0]).unwrap();
        raw.save(&path).unwrap();
        let (_, _, d) = read_depth_png(&path, 1000.0).unwrap();
        assert_eq!(d, vec![5.0, 0.0]);
    }

    #[test]
    fn pose_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = random_dataset(3, true);
        save_dataset(&ds, dir.path()).unwrap();
        let poses = dir.path().join("poses.txt");
        let text = fs::read_to_string(&poses).unwrap();
        let trimmed: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).take(2).collect();
        fs::write(&poses, trimmed.join("\n")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("2 poses") && err.contains("3 frames"), "{err}");
    }

    #[test]
    fn missing_poses_allowed_and_corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = random_dataset(2, false);
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(!back.has_poses());

        fs::write(frame_path(dir.path(), "depth", 1), b"not a png").unwrap();
        assert!(load_dataset(dir.path()).is_err());
        fs::remove_file(dir.path().join("intrinsics.json")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = random_dataset(1, false);
        save_dataset(&ds, dir.path()).unwrap();
        write_color_png(&frame_path(dir.path(), "color", 0), 4, 4, &[[0.5; 3]; 16]).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn non_monotone_timestamps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = random_dataset(3, true);
        save_dataset(&ds, dir.path()).unwrap();
        let poses = dir.path().join("poses.txt");
        let text = fs::read_to_string(&poses).unwrap();
        let mut lines: Vec<String> = text.lines().filter(|l| !l.starts_with('#')).map(String::from).collect();
        lines.swap(0, 1);
        fs::write(&poses, lines.join("\n")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn color_quantization_rounds_half_up() {
        assert_eq!(color_to_u8(0.5), 128);
        assert_eq!(color_to_u8(1.0), 255);
        assert_eq!(color_to_u8(-0.2), 0);
        assert_eq!(color_to_u8(2.5 / 255.0), 3);
        assert_eq!(depth_to_u16(1.2345, 1000.0), 1235);
        assert_eq!(depth_to_u16(100.0, 1000.0), 0);
    }
}
