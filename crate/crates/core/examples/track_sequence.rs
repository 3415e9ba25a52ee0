// Tracks a rendered camera circle frame to frame and scores the estimated
// trajectory with ATE and RPE.

use voxslam::dataset::{random_smoothed_grid, synth_from_grid, Look, RandomGridSpec, TrajectorySpec};
use voxslam::eval::{ate, rpe};
use voxslam::tracking::{track_sequence, InitPolicy};
use voxslam::{CameraIntrinsics, RenderSettings, TrackingConfig};

/// Returns the aligned ATE RMSE in meters.
pub fn run_example() -> voxslam::Result<f64> {
    let grid = random_smoothed_grid(&RandomGridSpec { resolution: 32, seed: 7, ..Default::default() })?;
    let k = CameraIntrinsics::centered(48, 36, 38.0)?;
    let path = TrajectorySpec::Circle {
        center: [0.0; 3],
        radius: 0.2,
        start_deg: 0.0,
        sweep_deg: 360.0,
        look: Look::At([0.0, 0.0, 2.0]),
    };
    let dataset = synth_from_grid(&grid, &path.trajectory(30, 0.1)?, &k, &RenderSettings::for_grid(&grid))?;
    let config = TrackingConfig {
        rays_per_iteration: 256,
        iterations: 60,
        lr_rotation: 1e-2,
        lr_translation: 1e-2,
        lr_final_factor: 0.05,
        init: InitPolicy::ConstantVelocity,
        ..Default::default()
    };
    let result = track_sequence(&grid, &dataset, &config)?;
    let reference = dataset.trajectory().expect("rendered frames carry poses");
    let a = ate(&result.trajectory, &reference, true)?;
    let r = rpe(&result.trajectory, &reference, 1.0)?;
    println!(
        "ATE {:.5} m, RPE {:.5} m / {:.3} deg over {} frames",
        a.rmse,
        r.trans_rmse,
        r.rot_rmse_deg,
        result.trajectory.len()
    );
    Ok(a.rmse)
}

fn main() -> voxslam::Result<()> {
    run_example().map(|_| ())
}
