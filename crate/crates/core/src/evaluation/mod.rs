//! Metrics: absolute trajectory error, local-reconstruction RMSE against the
//! ground-truth cloud, and the sigma_str sweep.

mod kdtree;
mod sweep;

pub use kdtree::KdTree;
pub use sweep::{sigma_sweep, SweepRow, SweepScenario};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map_builder::PointCloud;
use crate::trajectory::TrajectoryEntry;

/// Timestamps are paired when within this window (s).
const PAIRING_WINDOW: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no {0} provided")]
    Empty(&'static str),
    #[error("estimate timestamp {timestamp} has no ground-truth match within 10 ms")]
    UnmatchedTimestamp { timestamp: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alignment {
    None,
    Rigid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryErrorReport {
    pub ate_rmse: f64,
    pub per_pose_errors: Vec<f64>,
    pub alignment: Alignment,
}

/// Absolute trajectory error between camera centers, optionally after the
/// least-squares rigid SE(3) alignment.
pub fn ate_rmse(
    estimate: &[TrajectoryEntry],
    ground_truth: &[TrajectoryEntry],
    alignment: Alignment,
) -> Result<TrajectoryErrorReport, EvalError> {
    if estimate.is_empty() {
        return Err(EvalError::Empty("estimate"));
    }
    if ground_truth.is_empty() {
        return Err(EvalError::Empty("ground truth"));
    }

    let mut pairs: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::with_capacity(estimate.len());
    for entry in estimate {
        let nearest = ground_truth
            .iter()
            .min_by(|a, b| {
                let da = (a.timestamp - entry.timestamp).abs();
                let db = (b.timestamp - entry.timestamp).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        if (nearest.timestamp - entry.timestamp).abs() > PAIRING_WINDOW {
            return Err(EvalError::UnmatchedTimestamp {
                timestamp: entry.timestamp,
            });
        }
        pairs.push((entry.pose.camera_center(), nearest.pose.camera_center()));
    }

    let (rotation, translation) = match alignment {
        Alignment::None => (Matrix3::identity(), Vector3::zeros()),
        Alignment::Rigid => rigid_alignment(&pairs),
    };

    let per_pose_errors: Vec<f64> = pairs
        .iter()
        .map(|(p, q)| (rotation * p + translation - q).norm())
        .collect();
    let ate = (per_pose_errors.iter().map(|e| e * e).sum::<f64>()
        / per_pose_errors.len() as f64)
        .sqrt();
    Ok(TrajectoryErrorReport {
        ate_rmse: ate,
        per_pose_errors,
        alignment,
    })
}

/// Least-squares SE(3) transform minimizing `sum |R p + t - q|^2`.
fn rigid_alignment(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = pairs.len() as f64;
    let p_mean: Vector3<f64> = pairs.iter().map(|(p, _)| p).sum::<Vector3<f64>>() / n;
    let q_mean: Vector3<f64> = pairs.iter().map(|(_, q)| q).sum::<Vector3<f64>>() / n;
    let mut cross = Matrix3::zeros();
    for (p, q) in pairs {
        cross += (q - q_mean) * (p - p_mean).transpose();
    }
    let svd = cross.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    (rotation, q_mean - rotation * p_mean)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionErrorReport {
    pub rmse: f64,
    /// `(threshold_m, inlier_ratio)` pairs, non-decreasing in threshold.
    pub inlier_ratios: Vec<(f64, f64)>,
    pub distances: Vec<f64>,
}

/// Default inlier thresholds (m): 1, 2, 5, 10, 20 cm.
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.01, 0.02, 0.05, 0.10, 0.20];

/// RMSE of nearest-neighbor distances from the estimated landmarks to the
/// ground-truth cloud.
pub fn reconstruction_rmse(
    landmarks: &[Vector3<f64>],
    gt_cloud: &PointCloud,
    thresholds: &[f64],
) -> Result<ReconstructionErrorReport, EvalError> {
    if landmarks.is_empty() {
        return Err(EvalError::Empty("landmarks"));
    }
    if gt_cloud.is_empty() {
        return Err(EvalError::Empty("ground-truth cloud"));
    }
    let tree = KdTree::build(&gt_cloud.points);
    let distances: Vec<f64> = landmarks
        .iter()
        .map(|lm| tree.nearest_distance(lm).unwrap())
        .collect();
    // Sorted reduction keeps the metric invariant under landmark order.
    let mut squared: Vec<f64> = distances.iter().map(|d| d * d).collect();
    squared.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rmse = (squared.iter().sum::<f64>() / distances.len() as f64).sqrt();
    let inlier_ratios = thresholds
        .iter()
        .map(|&t| {
            (
                t,
                distances.iter().filter(|&&d| d <= t).count() as f64 / distances.len() as f64,
            )
        })
        .collect();
    Ok(ReconstructionErrorReport {
        rmse,
        inlier_ratios,
        distances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Pose};
    use approx::assert_relative_eq;
    use nalgebra::Vector6;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn entry(timestamp: f64, pose: Pose) -> TrajectoryEntry {
        TrajectoryEntry { timestamp, pose }
    }

    fn sample_trajectory() -> Vec<TrajectoryEntry> {
        (0..30)
            .map(|i| {
                let t = i as f64 * 0.1;
                entry(
                    t,
                    se3_exp(&Vector6::new(0.0, 0.02 * t, 0.1 * t, t.cos(), t.sin(), 1.5)),
                )
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_have_zero_ate() {
        let traj = sample_trajectory();
        let report = ate_rmse(&traj, &traj, Alignment::None).unwrap();
        assert_relative_eq!(report.ate_rmse, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_offset_measures_unaligned_and_vanishes_aligned() {
        let gt = sample_trajectory();
        let shifted: Vec<TrajectoryEntry> = gt
            .iter()
            .map(|e| {
                // Shift the camera center by (1, 0, 0):
                // t' = -R (C + dx) = t - R dx.
                let mut pose = e.pose;
                pose.translation -= pose.rotation * Vector3::new(1.0, 0.0, 0.0);
                entry(e.timestamp, pose)
            })
            .collect();
        let unaligned = ate_rmse(&shifted, &gt, Alignment::None).unwrap();
        assert_relative_eq!(unaligned.ate_rmse, 1.0, epsilon = 1e-9);
        let aligned = ate_rmse(&shifted, &gt, Alignment::Rigid).unwrap();
        assert!(aligned.ate_rmse < 1e-9, "{}", aligned.ate_rmse);
        assert!(aligned.ate_rmse <= unaligned.ate_rmse);
    }

    #[test]
    fn rigid_alignment_never_hurts() {
        let mut rng = StdRng::seed_from_u64(3);
        let gt = sample_trajectory();
        let noisy: Vec<TrajectoryEntry> = gt
            .iter()
            .map(|e| {
                let mut pose = e.pose;
                pose.translation += Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
                entry(e.timestamp, pose)
            })
            .collect();
        let unaligned = ate_rmse(&noisy, &gt, Alignment::None).unwrap();
        let aligned = ate_rmse(&noisy, &gt, Alignment::Rigid).unwrap();
        assert!(aligned.ate_rmse <= unaligned.ate_rmse + 1e-12);
    }

    #[test]
    fn mismatched_timestamps_error() {
        let gt = sample_trajectory();
        let offset: Vec<TrajectoryEntry> = gt
            .iter()
            .map(|e| entry(e.timestamp + 0.05, e.pose))
            .collect();
        assert!(matches!(
            ate_rmse(&offset, &gt, Alignment::None),
            Err(EvalError::UnmatchedTimestamp { .. })
        ));
    }

    #[test]
    fn subset_landmarks_have_zero_rmse() {
        let mut rng = StdRng::seed_from_u64(5);
        let points: Vec<Vector3<f64>> = (0..500)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)))
            .collect();
        let cloud = PointCloud::new(points.clone()).unwrap();
        let landmarks: Vec<Vector3<f64>> = points.iter().step_by(7).copied().collect();
        let report = reconstruction_rmse(&landmarks, &cloud, &DEFAULT_THRESHOLDS).unwrap();
        assert_relative_eq!(report.rmse, 0.0, epsilon = 1e-12);
        for (_, ratio) in report.inlier_ratios {
            assert_relative_eq!(ratio, 1.0);
        }
    }

    #[test]
    fn single_offset_landmark_measures_its_distance() {
        // Dense plane grid, 5 mm spacing.
        let mut points = Vec::new();
        for i in 0..200 {
            for j in 0..200 {
                points.push(Vector3::new(i as f64 * 0.005, j as f64 * 0.005, 0.0));
            }
        }
        let cloud = PointCloud::new(points).unwrap();
        let landmark = Vector3::new(0.5, 0.5, 0.05);
        let report = reconstruction_rmse(&[landmark], &cloud, &DEFAULT_THRESHOLDS).unwrap();
        assert!((report.rmse - 0.05).abs() < 0.005, "rmse {}", report.rmse);
    }

    #[test]
    fn reconstruction_is_permutation_invariant() {
        let mut rng = StdRng::seed_from_u64(7);
        let points: Vec<Vector3<f64>> = (0..300)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let cloud = PointCloud::new(points).unwrap();
        let landmarks: Vec<Vector3<f64>> = (0..50)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let mut reversed = landmarks.clone();
        reversed.reverse();
        let a = reconstruction_rmse(&landmarks, &cloud, &DEFAULT_THRESHOLDS).unwrap();
        let b = reconstruction_rmse(&reversed, &cloud, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(a.rmse.to_bits(), b.rmse.to_bits());
    }

    #[test]
    fn inlier_curve_is_non_decreasing() {
        let mut rng = StdRng::seed_from_u64(9);
        let points: Vec<Vector3<f64>> = (0..300)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let cloud = PointCloud::new(points).unwrap();
        let landmarks: Vec<Vector3<f64>> = (0..80)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let report = reconstruction_rmse(&landmarks, &cloud, &DEFAULT_THRESHOLDS).unwrap();
        for pair in report.inlier_ratios.windows(2) {
            assert!(pair[1].1 >= pair[0].1);
        }
    }
}
