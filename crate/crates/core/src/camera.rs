//! Pinhole intrinsics, rigid camera poses and ray generation.

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Depth-file units per meter (1000 for millimeter PNGs).
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale: 1000.0,
        };
        k.validate()?;
        Ok(k)
    }

    /// Principal point at the image centre, square pixels.
    pub fn centered(width: u32, height: u32, focal: f64) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64
            && self.depth_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Unnormalized camera-frame direction through pixel `(u, v)`.
    #[inline]
    pub fn camera_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Camera at `eye` with its +z axis toward `target`; `up` fixes roll
    /// (image +y points along `-up`).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = (-up).cross(&z).normalize();
        let y = z.cross(&x);
        let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(m);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), eye)
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::new(iso.rotation, iso.translation.vector)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation about the camera centre followed by a world-frame shift.
    pub fn perturbed(&self, delta: &PosePerturbation) -> Pose {
        let r = UnitQuaternion::from_scaled_axis(delta.rotation) * self.rotation;
        Pose::new(
            UnitQuaternion::new_normalize(r.into_inner()),
            self.translation + delta.translation,
        )
    }

    /// The perturbation that maps `self` onto `target`.
    pub fn perturbation_to(&self, target: &Pose) -> PosePerturbation {
        PosePerturbation {
            rotation: (target.rotation * self.rotation.inverse()).scaled_axis(),
            translation: target.translation - self.translation,
        }
    }

    /// Geodesic angle between two rotations, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Local pose update: axis-angle rotation `ω` (radians, left-multiplied about
/// the camera centre) and a world translation `τ` (meters).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PosePerturbation {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl PosePerturbation {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self> {
        let n = direction.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::NonUnitDirection(n));
        }
        Ok(Self { origin, direction })
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// World-space ray through the continuous pixel coordinate `(u, v)`.
pub fn generate_ray(k: &CameraIntrinsics, pose: &Pose, u: f64, v: f64) -> Result<Ray> {
    if !(u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64) {
        return Err(Error::PixelOutOfBounds {
            u,
            v,
            width: k.width,
            height: k.height,
        });
    }
    Ok(Ray {
        origin: pose.translation,
        direction: (pose.rotation * k.camera_direction(u, v)).normalize(),
    })
}
