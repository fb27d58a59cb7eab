use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use super::{project_point, CameraIntrinsics, GeometryError, ImagePoint, Pose};

/// Landmarks are only created when the two viewing rays subtend at least this
/// angle.
pub const MIN_PARALLAX_DEG: f64 = 1.0;

/// Two-view triangulation: linear DLT followed by one Gauss-Newton refinement
/// on the reprojection error.
pub fn triangulate_two_view(
    obs_a: &ImagePoint,
    pose_a: &Pose,
    obs_b: &ImagePoint,
    pose_b: &Pose,
    intrinsics: &CameraIntrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    let ray_a = pose_a.rotation.transpose() * intrinsics.unproject(obs_a).normalize();
    let ray_b = pose_b.rotation.transpose() * intrinsics.unproject(obs_b).normalize();
    let angle_deg = ray_a.dot(&ray_b).clamp(-1.0, 1.0).acos().to_degrees();
    if angle_deg < MIN_PARALLAX_DEG {
        return Err(GeometryError::LowParallax {
            angle_deg,
            min_deg: MIN_PARALLAX_DEG,
        });
    }

    let linear = dlt_point(obs_a, pose_a, obs_b, pose_b, intrinsics)?;
    let refined = gauss_newton_step(&linear, obs_a, pose_a, obs_b, pose_b, intrinsics);

    for pose in [pose_a, pose_b] {
        let depth = pose.transform(&refined).z;
        if depth <= 0.0 {
            return Err(GeometryError::BehindCamera { depth });
        }
    }
    Ok(refined)
}

fn dlt_point(
    obs_a: &ImagePoint,
    pose_a: &Pose,
    obs_b: &ImagePoint,
    pose_b: &Pose,
    intrinsics: &CameraIntrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    // Rows of A built from normalized image coordinates: x * P_row2 - P_row0.
    let mut design = Matrix4::zeros();
    for (row_base, (obs, pose)) in [(0, (obs_a, pose_a)), (2, (obs_b, pose_b))] {
        let bearing = intrinsics.unproject(obs);
        for axis in 0..2 {
            for col in 0..3 {
                design[(row_base + axis, col)] =
                    bearing[axis] * pose.rotation[(2, col)] - pose.rotation[(axis, col)];
            }
            design[(row_base + axis, 3)] =
                bearing[axis] * pose.translation[2] - pose.translation[axis];
        }
    }

    let svd = design.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| GeometryError::Degenerate("SVD failed".into()))?;
    let h: Vector4<f64> = v_t.row(3).transpose();
    if h[3].abs() < 1e-12 {
        return Err(GeometryError::Degenerate("point at infinity".into()));
    }
    Ok(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

fn gauss_newton_step(
    point: &Vector3<f64>,
    obs_a: &ImagePoint,
    pose_a: &Pose,
    obs_b: &ImagePoint,
    pose_b: &Pose,
    intrinsics: &CameraIntrinsics,
) -> Vector3<f64> {
    let mut hessian = Matrix3::zeros();
    let mut gradient = Vector3::zeros();
    for (obs, pose) in [(obs_a, pose_a), (obs_b, pose_b)] {
        let p_cam = pose.transform(point);
        let Ok((pixel, jac_point)) = project_point(&p_cam, intrinsics) else {
            return *point;
        };
        let jac = jac_point * pose.rotation;
        let residual = nalgebra::Vector2::new(pixel.u - obs.u, pixel.v - obs.v);
        hessian += jac.transpose() * jac;
        gradient += jac.transpose() * residual;
    }
    match hessian.cholesky() {
        Some(chol) => point - chol.solve(&gradient),
        None => *point,
    }
}
