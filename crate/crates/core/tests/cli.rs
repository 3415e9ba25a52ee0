//! Command-line round trips run in-process through `cli::run`, plus a few
//! checks of the real binary's exit status.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use voxslam::cli::run;
use voxslam::dataset::{read_color_png, Dataset};
use voxslam::eval::Trajectory;
use voxslam::VoxelGrid;

fn voxslam(args: &[&str]) -> i32 {
    run(std::iter::once("voxslam").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const PRIMITIVE_SPEC: &str = r#"{
    "generator": "primitives",
    "room_min": [-2, -1.5, -2], "room_max": [2, 1.5, 2],
    "walls": [{"albedo": [0.6, 0.6, 0.6]}],
    "primitives": [{"kind": "box", "min": [-0.3, -0.3, 1.0], "max": [0.3, 0.3, 1.4],
                    "surface": {"albedo": [0.9, 0.2, 0.1], "checker": 0.1}}],
    "trajectory": {"kind": "line", "start": [0, 0, 0], "end": [0, 0, 0], "look": {"direction": [0, 0, 1]}},
    "frame_count": 1, "width": 16, "height": 12, "focal": 14
}"#;

const GRID_SPEC: &str = r#"{
    "generator": "grid",
    "grid": {"resolution": 16, "seed": 3},
    "trajectory": {"kind": "circle", "center": [0, 0, 0], "radius": 0.2, "look": {"at": [0, 0, 2]}},
    "frame_count": 30, "width": 24, "height": 18, "focal": 20, "frame_period": 0.1
}"#;

/// Grid-rendered dataset in `dir/data`; the generating grid is
/// `dir/data/scene_grid.vxg`.
fn grid_dataset(dir: &Path) -> PathBuf {
    let spec = write(dir, "grid.json", GRID_SPEC);
    let data = dir.join("data");
    assert_eq!(voxslam(&["synth", "--spec", p(&spec), "--out", p(&data)]), 0);
    data
}

#[test]
fn synth_writes_a_one_frame_primitive_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "scene.json", PRIMITIVE_SPEC);
    let out = dir.path().join("scene");
    assert_eq!(voxslam(&["synth", "--spec", p(&spec), "--out", p(&out)]), 0);
    let ds = Dataset::load(&out).unwrap();
    assert_eq!(ds.frames.len(), 1);
    assert_eq!((ds.intrinsics.width, ds.intrinsics.height), (16, 12));
}

#[test]
fn grid_generator_records_the_grid_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let data = grid_dataset(dir.path());
    let ds = Dataset::load(&data).unwrap();
    let grid = VoxelGrid::load(&data.join("scene_grid.vxg")).unwrap();
    assert_eq!(ds.frames.len(), 30);
    assert_eq!(ds.metadata["grid_checksum"], grid.checksum());
}

#[test]
fn malformed_spec_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"generator": "primitives", "frame_count": "#);
    let out = dir.path().join("x");
    assert_eq!(voxslam(&["synth", "--spec", p(&bad), "--out", p(&out)]), 2);
    let unknown = write(dir.path(), "unknown.json", r#"{"generator": "teapot"}"#);
    assert_eq!(voxslam(&["synth", "--spec", p(&unknown), "--out", p(&out)]), 2);
}

#[test]
fn map_writes_a_grid_and_log_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = grid_dataset(dir.path());
    let map = |name: &str| {
        let out = dir.path().join(name);
        let args = [
            "map", "--dataset", p(&data), "--iterations", "10", "--rays", "128", "--resolution", "8",
            "--upsample-levels", "1", "--lambda-d", "0", "--seed", "4", "--deterministic", "--out", p(&out),
        ];
        assert_eq!(voxslam(&args), 0);
        out
    };
    let a = map("a.vxg");
    let bytes = fs::read(&a).unwrap();
    let grid = VoxelGrid::load(&a).unwrap();
    assert_eq!(grid.to_bytes(), bytes);

    let log = fs::read_to_string(a.with_extension("csv")).unwrap();
    let echo = log.lines().next().unwrap();
    assert!(echo.starts_with('#') && echo.contains("\"lambda_d\":0.0"), "{echo}");
    assert!(echo.contains("\"seed\":4"));

    let b = map("b.vxg");
    assert_eq!(VoxelGrid::load(&b).unwrap().checksum(), grid.checksum());
}

#[test]
fn map_without_poses_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = grid_dataset(dir.path());
    fs::remove_file(data.join("poses.txt")).unwrap();
    let out = dir.path().join("g.vxg");
    assert_eq!(voxslam(&["map", "--dataset", p(&data), "--iterations", "1", "--out", p(&out)]), 2);
}

#[test]
fn track_with_zero_iterations_rolls_out_the_init_policy() {
    let dir = tempfile::tempdir().unwrap();
    let data = grid_dataset(dir.path());
    let grid = data.join("scene_grid.vxg");
    let out = dir.path().join("traj.txt");
    let args = ["track", "--grid", p(&grid), "--dataset", p(&data), "--iterations", "0", "--out", p(&out)];
    assert_eq!(voxslam(&args), 0);
    let traj = Trajectory::load_tum(&out).unwrap();
    let first = Dataset::load(&data).unwrap().frames[0].gt_pose.unwrap();
    assert_eq!(traj.len(), 30);
    assert!(traj.poses().all(|q| q.rotation_angle_to(&first) < 1e-15 && q.translation_distance_to(&first) < 1e-15));

    let status = fs::read_to_string(dir.path().join("traj.txt.status.csv")).unwrap();
    assert!(status.starts_with("# tracking config: {"));
    assert_eq!(status.lines().count(), 32);
}

#[test]
fn tracking_a_self_rendered_sequence_gives_near_zero_ate() {
    let dir = tempfile::tempdir().unwrap();
    let data = grid_dataset(dir.path());
    let grid = data.join("scene_grid.vxg");
    let traj = dir.path().join("traj.txt");
    let args = [
        "track", "--grid", p(&grid), "--dataset", p(&data), "--iterations", "60", "--rays", "256",
        "--lr-rotation", "0.003", "--lr-translation", "0.003", "--deterministic", "--out", p(&traj),
    ];
    assert_eq!(voxslam(&args), 0);
    let report = dir.path().join("report.json");
    let gt = dir.path().join("gt.txt");
    fs::copy(data.join("poses.txt"), &gt).unwrap();
    assert_eq!(voxslam(&["eval", "--estimate", p(&traj), "--reference", p(&gt), "--out", p(&report)]), 0);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let ate = json["ate_rmse"].as_f64().unwrap();
    assert!(ate < 0.01, "{ate}");
}

#[test]
fn corrupt_grid_is_an_input_error_and_empty_grid_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = grid_dataset(dir.path());
    let corrupt = write(dir.path(), "corrupt.vxg", "not a grid");
    let out = dir.path().join("t.txt");
    assert_eq!(voxslam(&["track", "--grid", p(&corrupt), "--dataset", p(&data), "--out", p(&out)]), 2);

    let empty = dir.path().join("empty.vxg");
    let geo = VoxelGrid::load(&data.join("scene_grid.vxg")).unwrap().geometry().clone();
    let mut grid = VoxelGrid::empty(geo);
    grid.prune(1e-3);
    grid.save(&empty).unwrap();
    assert_eq!(voxslam(&["track", "--grid", p(&empty), "--dataset", p(&data), "--out", p(&out)]), 3);
}

#[test]
fn eval_of_identical_trajectories_reports_zero_ate() {
    let dir = tempfile::tempdir().unwrap();
    let data = grid_dataset(dir.path());
    let poses = data.join("poses.txt");
    let report = dir.path().join("r.json");
    assert_eq!(voxslam(&["eval", "--estimate", p(&poses), "--reference", p(&poses), "--out", p(&report)]), 0);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["ate_rmse_unaligned"].as_f64(), Some(0.0));
    assert!(json["ate_rmse"].as_f64().unwrap() < 1e-12);
}

#[test]
fn render_of_an_empty_grid_is_background() {
    let dir = tempfile::tempdir().unwrap();
    let data = grid_dataset(dir.path());
    let empty = dir.path().join("empty.vxg");
    let geo = VoxelGrid::load(&data.join("scene_grid.vxg")).unwrap().geometry().clone();
    VoxelGrid::empty(geo).save(&empty).unwrap();
    let out = dir.path().join("img.png");
    let args = ["render", "--grid", p(&empty), "--pose", "0 0 0 0 0 0 1", "--width", "20", "--height", "10", "--out", p(&out)];
    assert_eq!(voxslam(&args), 0);
    let (w, h, color) = read_color_png(&out).unwrap();
    assert_eq!((w, h), (20, 10));
    assert!(color.iter().all(|c| *c == [0.0; 3]));
    assert!(dir.path().join("img_depth.png").exists());
}

#[test]
fn sweep_rows_follow_settings_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = grid_dataset(dir.path());
    let grid = data.join("scene_grid.vxg");
    let out = dir.path().join("sweep.csv");
    let args = [
        "sweep", "--grid", p(&grid), "--dataset", p(&data), "--rays", "64,64", "--iterations", "5",
        "--seed", "2", "--deterministic", "--out", p(&out),
    ];
    assert_eq!(voxslam(&args), 0);
    let csv = fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][..6], rows[1][..6]);

    let single = dir.path().join("one.csv");
    let args = ["sweep", "--grid", p(&grid), "--dataset", p(&data), "--rays", "32", "--iterations", "3", "--out", p(&single)];
    assert_eq!(voxslam(&args), 0);
    assert_eq!(fs::read_to_string(&single).unwrap().lines().count(), 2);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_voxslam");
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", "{");
    let status = Command::new(bin)
        .args(["synth", "--spec", p(&bad), "--out", p(&dir.path().join("x"))])
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let status = Command::new(bin).args(["gradcheck", "--cases", "2"]).stdout(Stdio::null()).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let status = Command::new(bin).args(["frobnicate"]).stderr(Stdio::null()).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for name in ["blob_scene.toml", "room.toml"] {
        voxslam::cli::RunConfig::load(&dir.join(name)).unwrap();
    }
    for name in ["blob_scene.json", "room.json"] {
        let text = fs::read_to_string(dir.join(name)).unwrap();
        serde_json::from_str::<voxslam::cli::SynthSpec>(&text).unwrap();
    }
}
