//! Randomised invariants over poses, spherical harmonics, interpolation and
//! trajectory files.

use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use voxslam::eval::{ate, Trajectory};
use voxslam::sh::sh_basis;
use voxslam::{GridGeometry, Pose, PosePerturbation, VertexPayload, VoxelGrid};

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-range..range).prop_map(Vector3::from)
}

fn pose() -> impl Strategy<Value = Pose> {
    (vec3(3.0), vec3(2.0)).prop_map(|(w, t)| Pose::new(UnitQuaternion::from_scaled_axis(w), t))
}

proptest! {
    #[test]
    fn perturbation_to_inverts_perturbed(a in pose(), w in vec3(1.0), t in vec3(1.0)) {
        let b = a.perturbed(&PosePerturbation::new(w, t));
        let back = a.perturbed(&a.perturbation_to(&b));
        prop_assert!(back.rotation_angle_to(&b) < 1e-9);
        prop_assert!(back.translation_distance_to(&b) < 1e-12);
    }

    #[test]
    fn composing_with_the_inverse_is_identity(a in pose(), p in vec3(5.0)) {
        let q = a.compose(&a.inverse()).transform_point(&p);
        prop_assert!((q - p).norm() < 1e-9);
    }

    #[test]
    fn sh_bands_have_the_expected_parity(d in vec3(1.0)) {
        prop_assume!(d.norm() > 1e-3);
        let a = sh_basis(&d.normalize());
        let b = sh_basis(&(-d).normalize());
        prop_assert_eq!(a[0], b[0]);
        // odd bands flip sign, even bands do not
        for i in 1..4 {
            prop_assert!((a[i] + b[i]).abs() < 1e-12);
        }
        for i in 4..9 {
            prop_assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn trilerp_reproduces_affine_density(
        slope in vec3(5.0),
        offset in -1.0f64..1.0,
        p in prop::array::uniform3(0.0f64..1.0),
    ) {
        let geometry = GridGeometry::new([5, 5, 5], Vector3::zeros(), 0.25).unwrap();
        let mut grid = VoxelGrid::empty(geometry.clone());
        for v in 0..geometry.vertex_count() {
            let [x, y, z] = geometry.vertex_coords(v);
            let at = geometry.vertex_position(x, y, z);
            grid.set_vertex(v, &VertexPayload { sigma: slope.dot(&at) + offset, sh: [[0.0; 9]; 3] });
        }
        let p = Vector3::from(p) * 0.999;
        let value = grid.trilerp(&p).unwrap().sigma;
        prop_assert!((value - slope.dot(&p) - offset).abs() < 1e-9);
        let grad = grid.trilerp_spatial_grad(&p).unwrap()[0];
        for k in 0..3 {
            prop_assert!((grad[k] - slope[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn tum_text_round_trips(poses in prop::collection::vec(pose(), 2..12)) {
        let traj = Trajectory::new(poses.into_iter().enumerate().map(|(i, p)| (i as f64 * 0.1, p)).collect()).unwrap();
        prop_assert_eq!(Trajectory::parse_tum(&traj.to_tum()).unwrap(), traj);
    }

    #[test]
    fn aligned_ate_ignores_a_rigid_change_of_frame(
        poses in prop::collection::vec(pose(), 3..10),
        gauge in pose(),
    ) {
        let reference = Trajectory::new(poses.iter().enumerate().map(|(i, p)| (i as f64, *p)).collect()).unwrap();
        let moved = Trajectory::new(poses.iter().enumerate().map(|(i, p)| (i as f64, gauge.compose(p))).collect()).unwrap();
        prop_assert!(ate(&moved, &reference, true).unwrap().rmse < 1e-8);
    }
}
