// Compares analytic map and ray gradients with central differences on
// random grids and rays.

use voxslam::gradients::{random_gradcheck, GradcheckSpec};

/// Returns the largest relative error over map and ray parameters.
pub fn run_example() -> voxslam::Result<f64> {
    let summary = random_gradcheck(&GradcheckSpec { resolution: 6, cases: 10, seed: 1, ..Default::default() })?;
    print!("{}", summary.to_text());
    Ok(summary.map_max_rel_err.max(summary.ray_max_rel_err))
}

fn main() -> voxslam::Result<()> {
    run_example().map(|_| ())
}
