// Trajectory and image metrics on hand-built inputs, and a TUM file round
// trip.

use nalgebra::{UnitQuaternion, Vector3};
use voxslam::eval::{ate, depth_l1, psnr, rpe, Trajectory};
use voxslam::Pose;

/// Returns (ATE of the shifted copy without alignment, PSNR of a 0.1 error).
pub fn run_example() -> voxslam::Result<(f64, f64)> {
    let line = |offset: Vector3<f64>| {
        Trajectory::new(
            (0..20)
                .map(|i| {
                    let s = i as f64 * 0.1;
                    let rot = UnitQuaternion::from_scaled_axis(Vector3::y() * 0.02 * s);
                    (s, Pose::new(rot, Vector3::new(s, 0.0, 0.0) + offset))
                })
                .collect(),
        )
    };
    let reference = line(Vector3::zeros())?;
    let shifted = line(Vector3::new(0.0, 0.05, 0.0))?;
    let raw = ate(&shifted, &reference, false)?.rmse;
    let aligned = ate(&shifted, &reference, true)?.rmse;
    let drift = rpe(&shifted, &reference, 1.0)?;
    println!("ATE {raw:.3} m raw, {aligned:.1e} m aligned; RPE {:.1e} m", drift.trans_rmse);

    let image = vec![[0.4, 0.5, 0.6]; 100];
    let off: Vec<[f64; 3]> = image.iter().map(|p| p.map(|c| c + 0.1)).collect();
    let p = psnr(&off, &image)?;
    let depth = vec![1.0; 100];
    let l1 = depth_l1(&[1.009; 100], &depth, &[true; 100])?;
    println!("PSNR {p:.2} dB, depth-L1 {l1:.4} m");

    let text = reference.to_tum();
    assert_eq!(Trajectory::parse_tum(&text)?, reference);
    Ok((raw, p))
}

fn main() -> voxslam::Result<()> {
    run_example().map(|_| ())
}
