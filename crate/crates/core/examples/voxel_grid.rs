// Builds a small grid, samples it with trilinear interpolation and its
// spatial derivative, and round-trips it through the binary file format.

use nalgebra::Vector3;
use voxslam::{GridGeometry, VertexPayload, VoxelGrid};

/// Returns the interpolated density at the probe point.
pub fn run_example() -> voxslam::Result<f64> {
    let geometry = GridGeometry::new([4, 4, 4], Vector3::zeros(), 0.25)?;
    let mut grid = VoxelGrid::empty(geometry.clone());
    // density grows linearly along x, color is a red tint
    for v in 0..geometry.vertex_count() {
        let [x, y, z] = geometry.vertex_coords(v);
        let mut payload = VertexPayload { sigma: 0.0, sh: [[0.0; 9]; 3] };
        payload.sigma = 10.0 * geometry.vertex_position(x, y, z).x;
        payload.sh[0][0] = 0.5;
        grid.set_vertex(v, &payload);
    }

    let probe = Vector3::new(0.3, 0.6, 0.1);
    let value = grid.trilerp(&probe)?;
    let slope = grid.trilerp_spatial_grad(&probe)?[0];
    println!("sigma at {probe:?} = {:.3}, d sigma / dp = {slope:?}", value.sigma);

    let bytes = grid.to_bytes();
    let back = VoxelGrid::from_bytes(&bytes)?;
    println!("{} bytes, checksum {}", bytes.len(), back.checksum());
    Ok(value.sigma)
}

fn main() -> voxslam::Result<()> {
    run_example().map(|_| ())
}
