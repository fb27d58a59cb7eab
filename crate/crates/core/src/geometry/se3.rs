//! Exponential/logarithm maps for SO(3) and SE(3) and the Jacobian blocks
//! the pose factors need.
//!
//! Tangent ordering is `(rotation, translation)` throughout the crate: a
//! 6-vector `xi` stores the rotation part in `xi[0..3]` and the translation
//! part in `xi[3..6]`.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use super::Pose;

/// Below this angle (radians) the trigonometric coefficients switch to their
/// Taylor expansions.
const SMALL_ANGLE: f64 = 1e-6;

/// Skew-symmetric matrix such that `hat(w) * v == w.cross(&v)`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -w.z, w.y, //
        w.z, 0.0, -w.x, //
        -w.y, w.x, 0.0,
    )
}

/// Rodrigues formula.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let w_hat = hat(w);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        // sin(t)/t ~ 1 - t^2/6, (1-cos(t))/t^2 ~ 1/2 - t^2/24
        Matrix3::identity() + (1.0 - theta2 / 6.0) * w_hat + (0.5 - theta2 / 24.0) * w_hat * w_hat
    } else {
        let theta = theta2.sqrt();
        Matrix3::identity()
            + (theta.sin() / theta) * w_hat
            + ((1.0 - theta.cos()) / theta2) * w_hat * w_hat
    }
}

/// Inverse of [`so3_exp`].
///
/// Near a rotation angle of pi (within ~1e-6 rad) the usual
/// `theta / (2 sin theta)` factor is ill-conditioned; the axis is then
/// recovered from the diagonal of `R` and its sign aligned with the
/// skew-symmetric part. Round-trip accuracy in that regime is ~1e-7 rather
/// than machine precision.
pub fn so3_log(rot: &Matrix3<f64>) -> Vector3<f64> {
    let skew = Vector3::new(
        rot[(2, 1)] - rot[(1, 2)],
        rot[(0, 2)] - rot[(2, 0)],
        rot[(1, 0)] - rot[(0, 1)],
    );
    let cos_theta = ((rot.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();

    if theta < SMALL_ANGLE {
        return 0.5 * skew;
    }

    if std::f64::consts::PI - theta < 1e-6 {
        // Axis from R + I: each column of R + I is parallel to the axis.
        let xx = ((rot[(0, 0)] + 1.0) * 0.5).max(0.0).sqrt();
        let yy = ((rot[(1, 1)] + 1.0) * 0.5).max(0.0).sqrt();
        let zz = ((rot[(2, 2)] + 1.0) * 0.5).max(0.0).sqrt();
        let mut axis = if xx >= yy && xx >= zz && xx > 1e-9 {
            Vector3::new(
                xx,
                (rot[(0, 1)] + rot[(1, 0)]) / (4.0 * xx),
                (rot[(0, 2)] + rot[(2, 0)]) / (4.0 * xx),
            )
        } else if yy >= zz && yy > 1e-9 {
            Vector3::new(
                (rot[(0, 1)] + rot[(1, 0)]) / (4.0 * yy),
                yy,
                (rot[(1, 2)] + rot[(2, 1)]) / (4.0 * yy),
            )
        } else {
            Vector3::new(
                (rot[(0, 2)] + rot[(2, 0)]) / (4.0 * zz),
                (rot[(1, 2)] + rot[(2, 1)]) / (4.0 * zz),
                zz,
            )
        };
        axis.normalize_mut();
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }

    (theta / (2.0 * theta.sin())) * skew
}

/// Left Jacobian of SO(3); also the `V` matrix coupling rotation and
/// translation in the SE(3) exponential.
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let w_hat = hat(w);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        Matrix3::identity() + (0.5 - theta2 / 24.0) * w_hat + (1.0 / 6.0 - theta2 / 120.0) * w_hat * w_hat
    } else {
        let theta = theta2.sqrt();
        Matrix3::identity()
            + ((1.0 - theta.cos()) / theta2) * w_hat
            + ((theta - theta.sin()) / (theta2 * theta)) * w_hat * w_hat
    }
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let w_hat = hat(w);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        Matrix3::identity() - 0.5 * w_hat + (1.0 / 12.0 + theta2 / 720.0) * w_hat * w_hat
    } else {
        let theta = theta2.sqrt();
        let coeff = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
        Matrix3::identity() - 0.5 * w_hat + coeff * w_hat * w_hat
    }
}

/// SE(3) exponential map, tangent ordered `(rotation, translation)`.
pub fn se3_exp(xi: &Vector6<f64>) -> Pose {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    Pose {
        rotation: so3_exp(&w),
        translation: so3_left_jacobian(&w) * v,
    }
}

/// SE(3) logarithm map, inverse of [`se3_exp`] for rotation angles below pi.
pub fn se3_log(pose: &Pose) -> Vector6<f64> {
    let w = so3_log(&pose.rotation);
    let v = so3_left_jacobian_inv(&w) * pose.translation;
    Vector6::new(w.x, w.y, w.z, v.x, v.y, v.z)
}

/// `Q` block of the SE(3) left Jacobian (Barfoot's closed form), adapted to
/// the `(rotation, translation)` ordering used here.
fn se3_q_matrix(w: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let w_hat = hat(w);
    let v_hat = hat(v);

    let (c1, c2, c3) = if theta2 < 1e-8 {
        (
            1.0 / 6.0 - theta2 / 120.0,
            -1.0 / 24.0 + theta2 / 720.0,
            -1.0 / 120.0 + theta2 / 5040.0,
        )
    } else {
        let theta = theta2.sqrt();
        let theta4 = theta2 * theta2;
        let s = theta.sin();
        let c = theta.cos();
        (
            (theta - s) / (theta2 * theta),
            (1.0 - theta2 / 2.0 - c) / theta4,
            (theta - s - theta2 * theta / 6.0) / (theta4 * theta),
        )
    };

    let wv = w_hat * v_hat;
    let vw = v_hat * w_hat;
    let wvw = wv * w_hat;

    0.5 * v_hat
        + c1 * (wv + vw + wvw)
        - c2 * (w_hat * wv + vw * w_hat - 3.0 * wvw)
        - 0.5 * (c2 - 3.0 * c3) * (wvw * w_hat + w_hat * wvw)
}

/// Inverse of the right Jacobian of SE(3) at `xi`.
///
/// For `e(delta) = log(exp(xi) * exp(delta))`, `de/ddelta` at `delta = 0`
/// equals this matrix. Used by the prior pose factor.
pub fn se3_right_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    // Right Jacobian at xi equals the left Jacobian at -xi.
    let jl_inv = so3_left_jacobian_inv(&-w);
    let q = se3_q_matrix(&-w, &-v);
    let coupling = -jl_inv * q * jl_inv;

    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl_inv);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&coupling);
    out
}
