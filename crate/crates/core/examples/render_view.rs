// Renders color and depth of a procedurally generated scene and writes
// both as PNG files.

use nalgebra::Vector3;
use voxslam::dataset::{random_smoothed_grid, write_color_png, write_depth_png, RandomGridSpec};
use voxslam::render::render_image;
use voxslam::{CameraIntrinsics, Pose, RenderSettings};

/// Returns the fraction of pixels whose ray hit the scene.
pub fn run_example() -> voxslam::Result<f64> {
    let grid = random_smoothed_grid(&RandomGridSpec { resolution: 32, seed: 11, ..Default::default() })?;
    let k = CameraIntrinsics::centered(64, 48, 50.0)?;
    let pose = Pose::look_at(Vector3::new(0.1, 0.0, 0.0), Vector3::new(0.0, 0.0, 2.0), Vector3::y());
    let img = render_image(&grid, &k, &pose, 1, &RenderSettings::for_grid(&grid))?;

    let dir = std::env::temp_dir().join("voxslam_render_view");
    std::fs::create_dir_all(&dir).expect("temp dir is writable");
    write_color_png(&dir.join("color.png"), img.width, img.height, &img.color)?;
    write_depth_png(&dir.join("depth.png"), img.width, img.height, &img.depth, k.depth_scale)?;

    let coverage = img.hit.iter().filter(|&&h| h).count() as f64 / img.hit.len() as f64;
    println!("wrote {} ({:.0}% of pixels hit)", dir.display(), 100.0 * coverage);
    Ok(coverage)
}

fn main() -> voxslam::Result<()> {
    run_example().map(|_| ())
}
