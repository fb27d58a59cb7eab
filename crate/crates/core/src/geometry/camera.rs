use nalgebra::{Matrix2x3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Rectified pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(width > 0 && height > 0, "image size must be positive");
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn contains(&self, point: &ImagePoint) -> bool {
        point.u >= 0.0
            && point.u < self.width as f64
            && point.v >= 0.0
            && point.v < self.height as f64
    }

    /// Unit-depth bearing of a pixel in the camera frame.
    pub fn unproject(&self, point: &ImagePoint) -> Vector3<f64> {
        Vector3::new(
            (point.u - self.cx) / self.fx,
            (point.v - self.cy) / self.fy,
            1.0,
        )
    }
}

/// A pixel location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

impl ImagePoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Pinhole projection of a camera-frame point, with the analytic Jacobian
/// with respect to that point.
pub fn project_point(
    p_cam: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
) -> Result<(ImagePoint, Matrix2x3<f64>), GeometryError> {
    let z = p_cam.z;
    if z <= 0.0 {
        return Err(GeometryError::BehindCamera { depth: z });
    }
    let inv_z = 1.0 / z;
    let pixel = ImagePoint::new(
        intrinsics.fx * p_cam.x * inv_z + intrinsics.cx,
        intrinsics.fy * p_cam.y * inv_z + intrinsics.cy,
    );
    let jac = Matrix2x3::new(
        intrinsics.fx * inv_z,
        0.0,
        -intrinsics.fx * p_cam.x * inv_z * inv_z,
        0.0,
        intrinsics.fy * inv_z,
        -intrinsics.fy * p_cam.y * inv_z * inv_z,
    );
    Ok((pixel, jac))
}
