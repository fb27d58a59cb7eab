//! Rigid-body transforms, the pinhole camera model, projection Jacobians and
//! two-view triangulation.

mod camera;
pub mod se3;
mod triangulate;

pub use camera::{project_point, CameraIntrinsics, ImagePoint};
pub use se3::{se3_exp, se3_log};
pub use triangulate::{triangulate_two_view, MIN_PARALLAX_DEG};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth:.6} m)")]
    BehindCamera { depth: f64 },
    #[error("parallax angle {angle_deg:.4} deg below the {min_deg:.1} deg minimum")]
    LowParallax { angle_deg: f64, min_deg: f64 },
    #[error("triangulation produced a degenerate solution: {0}")]
    Degenerate(String),
}

/// A rigid transform mapping world points into the camera frame:
/// `x_cam = R * x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_t = self.rotation.transpose();
        Pose {
            rotation: rot_t,
            translation: -(rot_t * self.translation),
        }
    }

    /// Map a world point into the camera frame.
    pub fn transform(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Optical center expressed in the world frame.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Max deviation of `R^T R` from identity plus `|det(R) - 1|`.
    pub fn rotation_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((gram[(i, j)] - target).abs());
            }
        }
        err.max((self.rotation.determinant() - 1.0).abs())
    }

    /// Right-multiplicative tangent update: `self ∘ exp(delta)`.
    pub fn retract(&self, delta: &nalgebra::Vector6<f64>) -> Pose {
        self.compose(&se3_exp(delta))
    }
}
