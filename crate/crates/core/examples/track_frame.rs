// Recovers a perturbed camera pose against a known grid from a single
// rendered RGB-D frame.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxslam::dataset::{random_smoothed_grid, synth_from_grid, RandomGridSpec};
use voxslam::eval::Trajectory;
use voxslam::tracking::track_frame;
use voxslam::{CameraIntrinsics, Pose, PosePerturbation, RenderSettings, TrackingConfig};

/// Returns the remaining (rotation degrees, translation meters) error.
pub fn run_example() -> voxslam::Result<(f64, f64)> {
    let grid = random_smoothed_grid(&RandomGridSpec { resolution: 32, seed: 7, ..Default::default() })?;
    let k = CameraIntrinsics::centered(48, 36, 38.0)?;
    let truth = Pose::look_at(Vector3::new(0.05, 0.0, 0.0), Vector3::new(0.0, 0.0, 2.0), Vector3::y());
    let frames = Trajectory::new(vec![(0.0, truth)])?;
    let dataset = synth_from_grid(&grid, &frames, &k, &RenderSettings::for_grid(&grid))?;

    let init = truth.perturbed(&PosePerturbation::new(
        Vector3::new(0.3, -0.5, 0.2).normalize() * 1f64.to_radians(),
        Vector3::new(0.01, -0.015, 0.01),
    ));
    let config = TrackingConfig {
        rays_per_iteration: 512,
        iterations: 200,
        lr_rotation: 1e-2,
        lr_translation: 1e-2,
        lr_final_factor: 0.01,
        ..Default::default()
    };
    let result = track_frame(&grid, &dataset.frames[0], &k, &init, &config, &mut ChaCha8Rng::seed_from_u64(3))?;
    let rot = result.pose.rotation_angle_to(&truth).to_degrees();
    let trans = result.pose.translation_distance_to(&truth);
    println!(
        "init error {:.2} deg / {:.4} m -> {rot:.4} deg / {trans:.5} m, loss {:.3e} -> {:.3e}",
        init.rotation_angle_to(&truth).to_degrees(),
        init.translation_distance_to(&truth),
        result.losses[0],
        result.final_loss()
    );
    Ok((rot, trans))
}

fn main() -> voxslam::Result<()> {
    run_example().map(|_| ())
}
