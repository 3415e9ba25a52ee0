// Ray-casts a textured room along a camera circle, saves the RGB-D
// sequence to disk and reads it back.

use voxslam::dataset::{synth_from_primitives, Dataset, Look, Primitive, SceneSpec, Surface, TrajectorySpec};

/// Returns the number of frames read back.
pub fn run_example() -> voxslam::Result<usize> {
    let spec = SceneSpec {
        room_min: [-2.0, -1.5, -2.0],
        room_max: [2.0, 1.5, 2.0],
        walls: vec![Surface::plain([0.7, 0.7, 0.7])],
        primitives: vec![Primitive::Sphere {
            center: [0.0, -0.5, 0.0],
            radius: 0.4,
            surface: Surface::checkered([0.2, 0.4, 0.9], 0.1),
        }],
        trajectory: TrajectorySpec::Circle {
            center: [0.0; 3],
            radius: 1.2,
            start_deg: 0.0,
            sweep_deg: 90.0,
            look: Look::At([0.0, -0.5, 0.0]),
        },
        frame_count: 5,
        width: 40,
        height: 30,
        focal: 30.0,
        depth_scale: 1000.0,
        depth_noise: 0.005,
        dropout: 0.02,
        frame_period: 1.0 / 30.0,
        seed: 2,
    };
    let (dataset, _exact) = synth_from_primitives(&spec)?;
    let dir = std::env::temp_dir().join("voxslam_synthesize_dataset");
    dataset.save(&dir)?;
    let back = Dataset::load(&dir)?;
    let valid: usize = back.frames.iter().map(|f| f.valid_depth_count()).sum();
    println!("{} frames in {}, {valid} valid depth pixels", back.frames.len(), dir.display());
    Ok(back.frames.len())
}

fn main() -> voxslam::Result<()> {
    run_example().map(|_| ())
}
