//! Temporary debug: does the Schur step equal the dense normal-equation
//! solution built from the same blocks?

#[cfg(test)]
mod tests {
    use crate::factors::Observation;
    use crate::geometry::{project_point, CameraIntrinsics, ImagePoint, Pose};
    use crate::gmm_map::GmmMap;
    use crate::optimizer::{build_problem, SolverConfig};
    use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn schur_step_equals_dense_step() {
        let intr = CameraIntrinsics::new(460.0, 460.0, 320.0, 240.0, 640, 480);
        let mut rng = StdRng::seed_from_u64(99);
        let poses: Vec<Pose> = (0..3)
            .map(|i| Pose::new(Matrix3::identity(), -Vector3::new(0.3 * i as f64, 0.0, 0.0)))
            .collect();
        let landmarks: Vec<Vector3<f64>> = (0..8)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..2.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(3.0..6.0),
                )
            })
            .collect();
        let mut observations = Vec::new();
        for (kf, pose) in poses.iter().enumerate() {
            for (lm, x) in landmarks.iter().enumerate() {
                let (pix, _) = project_point(&pose.transform(x), &intr).unwrap();
                observations.push(Observation {
                    keyframe_id: kf,
                    landmark_id: lm,
                    pixel: ImagePoint::new(
                        pix.u + rng.random_range(-1.0..1.0),
                        pix.v + rng.random_range(-1.0..1.0),
                    ),
                    sigma: 1.0,
                });
            }
        }
        let problem = build_problem(
            poses.iter().enumerate().map(|(i, &p)| (i, p, i == 0)),
            landmarks.iter().copied().enumerate(),
            observations.clone(),
            &[],
            Vec::new(),
            &GmmMap::new(vec![]).unwrap(),
            intr,
            SolverConfig {
                robust_visual: false,
                ..SolverConfig::default()
            },
        )
        .unwrap();

        // Dense reference from raw residual/Jacobian evaluations.
        let n_pose_free = 2;
        let dim = 6 * n_pose_free + 3 * landmarks.len();
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for obs in &observations {
            let pose = poses[obs.keyframe_id];
            let x = landmarks[obs.landmark_id];
            let (r, jp, jl) =
                crate::factors::reprojection_residual(&x, &pose, &obs.pixel, obs.sigma, &intr)
                    .unwrap();
            let lbase = 6 * n_pose_free + 3 * obs.landmark_id;
            if obs.keyframe_id > 0 {
                let pbase = 6 * (obs.keyframe_id - 1);
                for i in 0..6 {
                    for j in 0..6 {
                        h[(pbase + i, pbase + j)] +=
                            jp.column(i).dot(&jp.column(j).into_owned());
                    }
                    for j in 0..3 {
                        h[(pbase + i, lbase + j)] += jp.column(i).dot(&jl.column(j).into_owned());
                        h[(lbase + j, pbase + i)] = h[(pbase + i, lbase + j)];
                    }
                    b[pbase + i] -= jp.column(i).dot(&r);
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    h[(lbase + i, lbase + j)] += jl.column(i).dot(&jl.column(j).into_owned());
                }
                b[lbase + i] -= jl.column(i).dot(&r);
            }
        }
        let damping = 0.5;
        for i in 0..dim {
            h[(i, i)] += damping;
        }
        let dense_delta = h.cholesky().unwrap().solve(&b);

        // Schur path on the same problem.
        let (dp, dl) = crate::optimizer::lm::debug_step(&problem, damping).unwrap();
        for slot in 0..n_pose_free {
            for i in 0..6 {
                let dense = dense_delta[6 * slot + i];
                let schur = dp[slot][i];
                assert!(
                    (dense - schur).abs() < 1e-9 * dense.abs().max(1.0),
                    "pose {slot} component {i}: dense {dense} schur {schur}"
                );
            }
        }
        for lm in 0..landmarks.len() {
            for i in 0..3 {
                let dense = dense_delta[6 * n_pose_free + 3 * lm + i];
                let schur = dl[lm][i];
                assert!(
                    (dense - schur).abs() < 1e-9 * dense.abs().max(1.0),
                    "landmark {lm} component {i}: dense {dense} schur {schur}"
                );
            }
        }
    }
}
