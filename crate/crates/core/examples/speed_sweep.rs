// Tracks one sequence under several ray budgets and reports accuracy
// against time per frame.

use voxslam::dataset::{random_smoothed_grid, synth_from_grid, Look, RandomGridSpec, TrajectorySpec};
use voxslam::eval::speed_accuracy_sweep;
use voxslam::{CameraIntrinsics, RenderSettings, TrackingConfig};

/// Returns the number of CSV rows written.
pub fn run_example() -> voxslam::Result<usize> {
    let grid = random_smoothed_grid(&RandomGridSpec { resolution: 32, seed: 7, ..Default::default() })?;
    let k = CameraIntrinsics::centered(32, 24, 26.0)?;
    let path = TrajectorySpec::Circle {
        center: [0.0; 3],
        radius: 0.2,
        start_deg: 0.0,
        sweep_deg: 360.0,
        look: Look::At([0.0, 0.0, 2.0]),
    };
    let dataset = synth_from_grid(&grid, &path.trajectory(20, 0.1)?, &k, &RenderSettings::for_grid(&grid))?;
    let base = TrackingConfig { lr_rotation: 1e-2, lr_translation: 1e-2, lr_final_factor: 0.05, ..Default::default() };
    let sweep = speed_accuracy_sweep(&grid, &dataset, &[32, 128], &[20], &base)?;
    print!("{}", sweep.to_csv());
    println!("Spearman(rays, ATE) = {:.2}", sweep.rays_ate_spearman);
    Ok(sweep.rows.len())
}

fn main() -> voxslam::Result<()> {
    run_example().map(|_| ())
}
