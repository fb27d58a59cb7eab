//! Residuals and analytic Jacobians for the joint optimization: whitened
//! reprojection, hybrid structure (point-to-plane for degenerate components,
//! full Mahalanobis otherwise), prior pose, Huber robustification and
//! chi-square gating.
//!
//! All residuals are whitened, so their plain squared norms are the
//! chi-square test statistics and the solver works with unit-weight normal
//! equations. Pose Jacobians are taken with respect to right-multiplicative
//! tangent increments `T * exp(delta)`, `delta = (rotation, translation)`.

mod chi2;

pub use chi2::chi2_threshold;

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Matrix6, RowVector3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::se3::{hat, se3_log, se3_right_jacobian_inv};
use crate::geometry::{project_point, CameraIntrinsics, GeometryError, ImagePoint, Pose};
use crate::gmm_map::GaussianComponent3D;

/// Default coupling factor of the structure constraints, in meters.
pub const DEFAULT_SIGMA_STR: f64 = 0.1;

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("unsupported chi-square dof {dof}")]
    InvalidDof { dof: usize },
    #[error("confidence {confidence} outside (0, 1)")]
    InvalidConfidence { confidence: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One pixel observation of a landmark by a keyframe.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Observation {
    pub keyframe_id: usize,
    pub landmark_id: usize,
    pub pixel: ImagePoint,
    /// Pixel noise standard deviation (px); must be positive.
    pub sigma: f64,
}

/// A landmark tied to a map component.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StructureAssociation {
    pub landmark_id: usize,
    pub component_id: usize,
    /// Structure noise standard deviation (m); must be positive.
    pub sigma_str: f64,
}

/// Whitened reprojection residual `(u - pi(R x + t)) / sigma` with its
/// Jacobians with respect to the pose tangent and the landmark.
pub fn reprojection_residual(
    landmark: &Vector3<f64>,
    pose: &Pose,
    pixel: &ImagePoint,
    sigma: f64,
    intrinsics: &CameraIntrinsics,
) -> Result<(Vector2<f64>, Matrix2x6<f64>, Matrix2x3<f64>), FactorError> {
    let p_cam = pose.transform(landmark);
    let (projected, jac_pi) = project_point(&p_cam, intrinsics)?;
    let inv_sigma = 1.0 / sigma;
    let residual = Vector2::new(pixel.u - projected.u, pixel.v - projected.v) * inv_sigma;

    // d(pi(T exp(d) x))/dd = J_pi * [-R [x]_x | R]; residual negates it.
    let jac_point = jac_pi * pose.rotation;
    let jac_landmark = -jac_point * inv_sigma;
    let mut jac_pose = Matrix2x6::zeros();
    jac_pose
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(jac_point * hat(landmark) * inv_sigma));
    jac_pose
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&jac_landmark);
    Ok((residual, jac_pose, jac_landmark))
}

/// Hybrid structure residual: 1-D signed point-to-plane distance for
/// degenerate components, 3-D whitened Mahalanobis residual otherwise.
#[derive(Debug, Clone)]
pub enum StructureResidual {
    Degenerate {
        value: f64,
        jacobian: RowVector3<f64>,
    },
    Full {
        value: Vector3<f64>,
        jacobian: Matrix3<f64>,
    },
}

impl StructureResidual {
    pub fn squared_norm(&self) -> f64 {
        match self {
            StructureResidual::Degenerate { value, .. } => value * value,
            StructureResidual::Full { value, .. } => value.norm_squared(),
        }
    }

    pub fn dof(&self) -> usize {
        match self {
            StructureResidual::Degenerate { .. } => 1,
            StructureResidual::Full { .. } => 3,
        }
    }
}

/// Residual tying a landmark to its associated component.
pub fn structure_residual(
    landmark: &Vector3<f64>,
    component: &GaussianComponent3D,
    sigma_str: f64,
) -> StructureResidual {
    let diff = landmark - component.mean;
    if component.is_degenerate {
        let normal = component.normal();
        StructureResidual::Degenerate {
            value: normal.dot(&diff) / sigma_str,
            jacobian: RowVector3::new(normal.x, normal.y, normal.z) / sigma_str,
        }
    } else {
        // Spectral whitening: L^-1 = Lambda^(-1/2) R^T with Sigma = R Lambda R^T.
        let inv_sqrt =
            Matrix3::from_diagonal(&component.singular_values.map(|v| 1.0 / v.sqrt()));
        let whitener = inv_sqrt * component.axes.transpose();
        StructureResidual::Full {
            value: whitener * diff,
            jacobian: whitener,
        }
    }
}

/// Residual between a pose and its prior: `log(prior^-1 * pose)`, with the
/// Jacobian with respect to the pose tangent.
pub fn prior_pose_residual(pose: &Pose, prior: &Pose) -> (Vector6<f64>, Matrix6<f64>) {
    let residual = se3_log(&prior.inverse().compose(pose));
    let jacobian = se3_right_jacobian_inv(&residual);
    (residual, jacobian)
}

/// Huber robustification applied at the whitened-squared-norm level.
///
/// Returns `(rho, weight)`: the robust cost and the IRLS weight by which the
/// residual/Jacobian pair is scaled (as `sqrt(weight)`). Below the threshold
/// the cost is exactly the quadratic one and the weight is one.
pub fn huber(squared_norm: f64, threshold_squared: f64) -> (f64, f64) {
    if squared_norm <= threshold_squared {
        (squared_norm, 1.0)
    } else {
        let norm = squared_norm.sqrt();
        let k = threshold_squared.sqrt();
        (2.0 * k * norm - threshold_squared, k / norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3_exp;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640, 480)
    }

    fn random_pose(rng: &mut StdRng) -> Pose {
        se3_exp(&Vector6::from_fn(|i, _| {
            if i < 3 {
                rng.random_range(-0.5..0.5)
            } else {
                rng.random_range(-1.0..1.0)
            }
        }))
    }

    #[test]
    fn noiseless_observation_has_zero_residual() {
        let pose = Pose::identity();
        let landmark = Vector3::new(0.3, -0.2, 2.0);
        let (pix, _) = project_point(&pose.transform(&landmark), &intr()).unwrap();
        let (residual, _, _) =
            reprojection_residual(&landmark, &pose, &pix, 1.0, &intr()).unwrap();
        assert_relative_eq!(residual, Vector2::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn shifted_landmark_on_axis_linear_case() {
        let pose = Pose::identity();
        let landmark = Vector3::new(0.0, 0.0, 2.0);
        let (pix, _) = project_point(&landmark, &intr()).unwrap();
        let shifted = landmark + Vector3::new(0.1, 0.0, 0.0);
        let (residual, _, _) =
            reprojection_residual(&shifted, &pose, &pix, 1.0, &intr()).unwrap();
        // fx * 0.1 / 2 = 5 px of projected motion, so residual u = -5.
        assert_relative_eq!(residual.x, -5.0, epsilon = 1e-12);
        assert_relative_eq!(residual.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn reprojection_jacobians_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(23);
        let eps = 1e-6;
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let landmark = pose.inverse().transform(&Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..6.0),
            ));
            let pixel = ImagePoint::new(
                rng.random_range(0.0..640.0),
                rng.random_range(0.0..480.0),
            );
            let sigma = rng.random_range(0.5..2.0);
            let (_, jac_pose, jac_landmark) =
                reprojection_residual(&landmark, &pose, &pixel, sigma, &intr()).unwrap();

            for col in 0..6 {
                let mut delta = Vector6::zeros();
                delta[col] = eps;
                let (rp, _, _) = reprojection_residual(
                    &landmark,
                    &pose.retract(&delta),
                    &pixel,
                    sigma,
                    &intr(),
                )
                .unwrap();
                delta[col] = -eps;
                let (rm, _, _) = reprojection_residual(
                    &landmark,
                    &pose.retract(&delta),
                    &pixel,
                    sigma,
                    &intr(),
                )
                .unwrap();
                let numeric = (rp - rm) / (2.0 * eps);
                for row in 0..2 {
                    let a = jac_pose[(row, col)];
                    let err = (numeric[row] - a).abs();
                    assert!(
                        err <= 1e-4 * a.abs().max(numeric[row].abs()).max(1.0),
                        "pose jac ({row},{col}): analytic {a}, numeric {}",
                        numeric[row]
                    );
                }
            }
            for col in 0..3 {
                let mut dx = Vector3::zeros();
                dx[col] = eps;
                let (rp, _, _) =
                    reprojection_residual(&(landmark + dx), &pose, &pixel, sigma, &intr())
                        .unwrap();
                let (rm, _, _) =
                    reprojection_residual(&(landmark - dx), &pose, &pixel, sigma, &intr())
                        .unwrap();
                let numeric = (rp - rm) / (2.0 * eps);
                for row in 0..2 {
                    let a = jac_landmark[(row, col)];
                    let err = (numeric[row] - a).abs();
                    assert!(
                        err <= 1e-4 * a.abs().max(numeric[row].abs()).max(1.0),
                        "landmark jac ({row},{col}): analytic {a}, numeric {}",
                        numeric[row]
                    );
                }
            }
        }
    }

    fn plane_component() -> GaussianComponent3D {
        // Normal along z after ascending eigenvalue ordering.
        GaussianComponent3D::new(
            0,
            1.0,
            Vector3::zeros(),
            Matrix3::from_diagonal(&Vector3::new(0.04, 0.09, 1e-6)),
        )
        .unwrap()
    }

    #[test]
    fn point_on_plane_has_zero_residual() {
        let g = plane_component();
        assert!(g.is_degenerate);
        assert_relative_eq!(g.normal().z.abs(), 1.0, epsilon = 1e-9);
        let r = structure_residual(&Vector3::new(3.0, 4.0, 0.0), &g, 0.1);
        assert_relative_eq!(r.squared_norm(), 0.0, epsilon = 1e-18);
    }

    #[test]
    fn off_plane_point_closed_form() {
        let g = plane_component();
        let r = structure_residual(&Vector3::new(0.0, 0.0, 0.5), &g, 0.1);
        match r {
            StructureResidual::Degenerate { value, .. } => {
                assert_relative_eq!(value.abs(), 5.0, epsilon = 1e-9);
            }
            _ => panic!("expected degenerate residual"),
        }
        assert_relative_eq!(r.squared_norm(), 25.0, epsilon = 1e-6);
    }

    #[test]
    fn degenerate_residual_is_invariant_within_plane() {
        let g = plane_component();
        let base = Vector3::new(0.1, -0.2, 0.3);
        let r0 = structure_residual(&base, &g, 0.1).squared_norm();
        for shift in [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, -2.0, 0.0),
            Vector3::new(0.5, 0.7, 0.0),
        ] {
            let r = structure_residual(&(base + shift), &g, 0.1).squared_norm();
            assert!((r - r0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_residual_diagonal_mahalanobis() {
        let g = GaussianComponent3D::new(
            0,
            1.0,
            Vector3::zeros(),
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)),
        )
        .unwrap();
        assert!(!g.is_degenerate);
        let r = structure_residual(&Vector3::new(1.0, 2.0, 3.0), &g, 0.1);
        assert_relative_eq!(r.squared_norm(), 3.0, epsilon = 1e-9);
    }

    #[test]
    fn full_residual_matches_quadratic_form() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..50 {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let cov = a.transpose() * a + Matrix3::identity() * 0.1;
            let g = GaussianComponent3D::new(0, 1.0, Vector3::zeros(), cov).unwrap();
            let x = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
            let direct = (x - g.mean).dot(&(cov.try_inverse().unwrap() * (x - g.mean)));
            assert_relative_eq!(
                structure_residual(&x, &g, 0.1).squared_norm(),
                direct,
                epsilon = 1e-9,
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn structure_jacobians_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(6);
        let eps = 1e-6;
        for trial in 0..100 {
            let g = if trial % 2 == 0 {
                plane_component()
            } else {
                let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                GaussianComponent3D::new(
                    0,
                    1.0,
                    Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                    a.transpose() * a + Matrix3::identity() * 0.1,
                )
                .unwrap()
            };
            let x = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
            match structure_residual(&x, &g, 0.1) {
                StructureResidual::Degenerate { jacobian, .. } => {
                    for col in 0..3 {
                        let mut dx = Vector3::zeros();
                        dx[col] = eps;
                        let value_at = |p: Vector3<f64>| match structure_residual(&p, &g, 0.1) {
                            StructureResidual::Degenerate { value, .. } => value,
                            _ => unreachable!(),
                        };
                        let numeric =
                            (value_at(x + dx) - value_at(x - dx)) / (2.0 * eps);
                        assert!((numeric - jacobian[col]).abs() < 1e-6);
                    }
                }
                StructureResidual::Full { jacobian, .. } => {
                    for col in 0..3 {
                        let mut dx = Vector3::zeros();
                        dx[col] = eps;
                        let value_at = |p: Vector3<f64>| match structure_residual(&p, &g, 0.1) {
                            StructureResidual::Full { value, .. } => value,
                            _ => unreachable!(),
                        };
                        let numeric = (value_at(x + dx) - value_at(x - dx)) / (2.0 * eps);
                        for row in 0..3 {
                            assert!((numeric[row] - jacobian[(row, col)]).abs() < 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn prior_residual_identity_and_right_perturbation() {
        let mut rng = StdRng::seed_from_u64(8);
        let prior = random_pose(&mut rng);
        let (residual, _) = prior_pose_residual(&prior, &prior);
        assert_relative_eq!(residual, Vector6::zeros(), epsilon = 1e-12);

        let delta = Vector6::new(0.0, 0.0, 0.0, 0.1, 0.0, 0.0);
        let pose = prior.compose(&se3_exp(&delta));
        let (residual, _) = prior_pose_residual(&pose, &prior);
        assert_relative_eq!(residual, delta, epsilon = 1e-9);
    }

    #[test]
    fn prior_jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(10);
        let eps = 1e-6;
        for _ in 0..100 {
            let prior = random_pose(&mut rng);
            let pose = random_pose(&mut rng);
            let (_, jac) = prior_pose_residual(&pose, &prior);
            for col in 0..6 {
                let mut delta = Vector6::zeros();
                delta[col] = eps;
                let (rp, _) = prior_pose_residual(&pose.retract(&delta), &prior);
                delta[col] = -eps;
                let (rm, _) = prior_pose_residual(&pose.retract(&delta), &prior);
                let numeric = (rp - rm) / (2.0 * eps);
                for row in 0..6 {
                    let a = jac[(row, col)];
                    assert!(
                        (numeric[row] - a).abs()
                            <= 1e-4 * a.abs().max(numeric[row].abs()).max(1.0),
                        "prior jac ({row},{col}): analytic {a}, numeric {}",
                        numeric[row]
                    );
                }
            }
        }
    }

    #[test]
    fn huber_is_quadratic_below_threshold() {
        let threshold = chi2_threshold(2, 0.95).unwrap();
        for s in [0.0, 0.5, 2.0, threshold] {
            let (rho, weight) = huber(s, threshold);
            assert_eq!(rho, s);
            assert_eq!(weight, 1.0);
        }
        let (rho, weight) = huber(4.0 * threshold, threshold);
        assert!(rho < 4.0 * threshold);
        assert!(weight < 1.0);
        // Continuity at the threshold.
        let (lo, _) = huber(threshold - 1e-12, threshold);
        let (hi, _) = huber(threshold + 1e-12, threshold);
        assert!((lo - hi).abs() < 1e-9);
    }
}
