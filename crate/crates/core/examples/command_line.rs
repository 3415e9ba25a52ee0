// Drives the command-line front end in-process: synthesize a dataset,
// map it, and evaluate the map.

use voxslam::cli::run;

const SPEC: &str = r#"{
    "generator": "grid",
    "grid": {"resolution": 16, "seed": 5},
    "trajectory": {"kind": "circle", "center": [0, 0, 0], "radius": 0.2, "look": {"at": [0, 0, 2]}},
    "frame_count": 8, "width": 24, "height": 18, "focal": 20
}"#;

/// Returns the exit codes of synth, map and eval.
pub fn run_example() -> [i32; 3] {
    let dir = std::env::temp_dir().join("voxslam_command_line");
    std::fs::create_dir_all(&dir).expect("temp dir is writable");
    let spec = dir.join("scene.json");
    std::fs::write(&spec, SPEC).expect("temp dir is writable");
    let path = |name: &str| dir.join(name).to_string_lossy().into_owned();

    let synth = run(["voxslam", "synth", "--spec", &path("scene.json"), "--out", &path("data")]);
    let map = run([
        "voxslam", "map", "--dataset", &path("data"), "--iterations", "30", "--rays", "256",
        "--resolution", "16", "--upsample-levels", "1", "--keyframe-stride", "2",
        "--deterministic", "--out", &path("map.vxg"),
    ]);
    let eval = run([
        "voxslam", "eval", "--grid", &path("map.vxg"), "--dataset", &path("data"), "--out", &path("report.json"),
    ]);
    println!("exit codes: synth {synth}, map {map}, eval {eval}");
    [synth, map, eval]
}

fn main() {
    run_example();
}
