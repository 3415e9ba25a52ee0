//! Every example under `examples/` runs and produces sensible output.

macro_rules! example {
    ($module:ident, $file:literal) => {
        #[allow(dead_code)]
        mod $module {
            include!(concat!("../examples/", $file));
        }
    };
}

example!(voxel_grid, "voxel_grid.rs");
example!(render_view, "render_view.rs");
example!(gradient_check, "gradient_check.rs");
example!(synthesize_dataset, "synthesize_dataset.rs");
example!(map_room, "map_room.rs");
example!(track_frame, "track_frame.rs");
example!(track_sequence, "track_sequence.rs");
example!(metrics, "metrics.rs");
example!(speed_sweep, "speed_sweep.rs");
example!(command_line, "command_line.rs");

#[test]
fn voxel_grid_interpolates_the_ramp() {
    let sigma = voxel_grid::run_example().unwrap();
    assert!((sigma - 3.0).abs() < 1e-12);
}

#[test]
fn render_view_sees_the_scene() {
    assert!(render_view::run_example().unwrap() > 0.9);
}

#[test]
fn gradient_check_is_accurate() {
    assert!(gradient_check::run_example().unwrap() < 1e-4);
}

#[test]
fn synthesized_dataset_round_trips() {
    assert_eq!(synthesize_dataset::run_example().unwrap(), 5);
}

#[test]
fn room_map_reproduces_held_out_views() {
    let (psnr, depth_l1) = map_room::run_example().unwrap();
    assert!(psnr > 18.0, "{psnr}");
    assert!(depth_l1 < 0.2, "{depth_l1}");
}

#[test]
fn single_frame_tracking_recovers_the_pose() {
    let (rot, trans) = track_frame::run_example().unwrap();
    assert!(rot < 0.2 && trans < 0.02, "{rot} {trans}");
}

#[test]
fn sequence_tracking_is_accurate() {
    assert!(track_sequence::run_example().unwrap() < 0.02);
}

#[test]
fn metrics_match_constructions() {
    let (ate, psnr) = metrics::run_example().unwrap();
    assert!((ate - 0.05).abs() < 1e-12);
    assert!((psnr - 20.0).abs() < 1e-9);
}

#[test]
fn sweep_writes_one_row_per_budget() {
    assert_eq!(speed_sweep::run_example().unwrap(), 2);
}

#[test]
fn command_line_pipeline_succeeds() {
    assert_eq!(command_line::run_example(), [0, 0, 0]);
}
