//! The end-to-end localization loop: per keyframe, project the map,
//! triangulate new landmarks, associate them with map components, and run the
//! windowed joint bundle adjustment.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::association::{associate, AssociationConfig, LandmarkObservation};
use crate::factors::{Observation, StructureAssociation};
use crate::geometry::{triangulate_two_view, CameraIntrinsics, ImagePoint, Pose};
use crate::gmm_map::GmmMap;
use crate::optimizer::{build_problem, joint_bundle_adjust, PriorEdge, SolverConfig};
use crate::projection::{project_map, ProjectionConfig};
use crate::trajectory::TrajectoryEntry;

/// Association refinement uses at most this many (most recent) observations.
const MAX_ASSOCIATION_OBSERVATIONS: usize = 10;

/// Handling of the first keyframe's given pose.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum InitialPosePolicy {
    /// An accurate pose is given: fix the first keyframe.
    FixFirst,
    /// Only a rough guess is given: constrain it with a prior edge.
    Prior { rot_weight: f64, trans_weight: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Keyframes older than this stay fixed in the joint optimization.
    pub window: usize,
    /// Pixel observation noise (px) used to whiten visual edges.
    pub sigma_px: f64,
    /// Keyframes with fewer observations are processed without BA.
    pub min_observations_for_ba: usize,
    /// Odometry noise model backing the per-keyframe pose priors.
    pub odom_sigma_trans: f64,
    pub odom_sigma_rot_deg: f64,
    pub initial_pose: InitialPosePolicy,
    /// Master switch for the structure constraints.
    pub structure_enabled: bool,
    pub association: AssociationConfig,
    pub projection: ProjectionConfig,
    pub solver: SolverConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: 10,
            sigma_px: 1.0,
            min_observations_for_ba: 8,
            odom_sigma_trans: 0.005,
            odom_sigma_rot_deg: 0.1,
            initial_pose: InitialPosePolicy::FixFirst,
            structure_enabled: true,
            association: AssociationConfig::default(),
            projection: ProjectionConfig::default(),
            solver: SolverConfig {
                max_iterations: 25,
                ..SolverConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
struct KeyframeState {
    pose: Pose,
    odom_pose: Pose,
    fixed_policy: bool,
}

#[derive(Debug, Clone, Default)]
struct LandmarkState {
    position: Option<Vector3<f64>>,
    /// (keyframe index, pixel), in observation order.
    observations: Vec<(usize, ImagePoint)>,
    component: Option<usize>,
    association_attempted: bool,
}

/// Per-keyframe processing statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyframeReport {
    pub keyframe: usize,
    pub observations: usize,
    pub triangulated: usize,
    pub associations_attempted: usize,
    pub associations_succeeded: usize,
    pub ba_ran: bool,
    pub ba_initial_cost: f64,
    pub ba_final_cost: f64,
    pub ba_iterations: usize,
    pub gated_visual: usize,
    pub gated_structure: usize,
    pub removed_landmarks: usize,
}

pub struct PipelineState {
    map: GmmMap,
    intrinsics: CameraIntrinsics,
    config: PipelineConfig,
    keyframes: Vec<KeyframeState>,
    landmarks: BTreeMap<usize, LandmarkState>,
}

impl PipelineState {
    pub fn new(map: GmmMap, intrinsics: CameraIntrinsics, config: PipelineConfig) -> Self {
        Self {
            map,
            intrinsics,
            config,
            keyframes: Vec::new(),
            landmarks: BTreeMap::new(),
        }
    }

    pub fn map(&self) -> &GmmMap {
        &self.map
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.keyframes.iter().map(|kf| kf.pose).collect()
    }

    /// Triangulated landmark estimates, ordered by id.
    pub fn landmark_estimates(&self) -> Vec<(usize, Vector3<f64>)> {
        self.landmarks
            .iter()
            .filter_map(|(&id, state)| state.position.map(|p| (id, p)))
            .collect()
    }

    /// Successful associations as (landmark id, component id, refined position).
    pub fn associations(&self) -> Vec<(usize, usize, Vector3<f64>)> {
        self.landmarks
            .iter()
            .filter_map(|(&id, state)| match (state.component, state.position) {
                (Some(component), Some(position)) => Some((id, component, position)),
                _ => None,
            })
            .collect()
    }

    /// Ingest one keyframe: `odom_pose` is the absolute odometry pose
    /// (world-to-camera), `observations` the landmark sightings.
    pub fn process_keyframe(
        &mut self,
        odom_pose: Pose,
        observations: &[(usize, ImagePoint)],
    ) -> KeyframeReport {
        let kf_idx = self.keyframes.len();

        // Dead-reckon from the previous refined pose.
        let pose_initial = if let Some(prev) = self.keyframes.last() {
            let relative = odom_pose.compose(&prev.odom_pose.inverse());
            relative.compose(&prev.pose)
        } else {
            odom_pose
        };
        self.keyframes.push(KeyframeState {
            pose: pose_initial,
            odom_pose,
            fixed_policy: kf_idx == 0
                && matches!(self.config.initial_pose, InitialPosePolicy::FixFirst),
        });

        let mut report = KeyframeReport {
            keyframe: kf_idx,
            observations: observations.len(),
            triangulated: 0,
            associations_attempted: 0,
            associations_succeeded: 0,
            ba_ran: false,
            ba_initial_cost: 0.0,
            ba_final_cost: 0.0,
            ba_iterations: 0,
            gated_visual: 0,
            gated_structure: 0,
            removed_landmarks: 0,
        };

        for &(landmark_id, pixel) in observations {
            self.landmarks
                .entry(landmark_id)
                .or_default()
                .observations
                .push((kf_idx, pixel));
        }

        // Triangulate landmarks that just gained a second view (or failed the
        // parallax check before and may pass now).
        for &(landmark_id, _) in observations {
            let state = &self.landmarks[&landmark_id];
            if state.position.is_some() || state.observations.len() < 2 {
                continue;
            }
            let (first_kf, first_pixel) = state.observations[0];
            let (last_kf, last_pixel) = *state.observations.last().unwrap();
            if first_kf == last_kf {
                continue;
            }
            if let Ok(point) = triangulate_two_view(
                &first_pixel,
                &self.keyframes[first_kf].pose,
                &last_pixel,
                &self.keyframes[last_kf].pose,
                &self.intrinsics,
            ) {
                self.landmarks.get_mut(&landmark_id).unwrap().position = Some(point);
                report.triangulated += 1;
            }
        }

        // Associate every triangulated landmark observed by this keyframe
        // against the map projected at the initial pose. Re-running per
        // keyframe lets early mis-associations (made when the landmark's
        // depth was weakly constrained) heal as baselines grow.
        if self.config.structure_enabled {
            let mut projections = None;
            for &(landmark_id, pixel) in observations {
                let state = &self.landmarks[&landmark_id];
                let Some(position) = state.position else {
                    continue;
                };
                let projections = projections.get_or_insert_with(|| {
                    project_map(
                        &self.map,
                        &pose_initial,
                        &self.intrinsics,
                        &self.config.projection,
                    )
                });
                // Most recent observations only: the local covisible history.
                let recent = state
                    .observations
                    .len()
                    .saturating_sub(MAX_ASSOCIATION_OBSERVATIONS);
                let landmark_obs: Vec<LandmarkObservation> = state.observations[recent..]
                    .iter()
                    .map(|&(kf, px)| LandmarkObservation {
                        pose: self.keyframes[kf].pose,
                        pixel: px,
                        sigma: self.config.sigma_px,
                    })
                    .collect();
                let outcome = associate(
                    &pixel,
                    &landmark_obs,
                    &position,
                    projections,
                    &self.map,
                    &self.intrinsics,
                    &self.config.association,
                );
                report.associations_attempted += 1;
                let state = self.landmarks.get_mut(&landmark_id).unwrap();
                state.association_attempted = true;
                if outcome.success {
                    report.associations_succeeded += 1;
                    state.position = Some(outcome.refined_position);
                    state.component = outcome.component_id;
                } else {
                    state.component = None;
                }
            }
        }

        if observations.len() >= self.config.min_observations_for_ba {
            self.run_window_ba(kf_idx, &mut report);
        }
        report
    }

    fn run_window_ba(&mut self, kf_idx: usize, report: &mut KeyframeReport) {
        let window_start = (kf_idx + 1).saturating_sub(self.config.window);
        let nodes: Vec<(usize, Pose, bool)> = self
            .keyframes
            .iter()
            .enumerate()
            .map(|(idx, kf)| (idx, kf.pose, kf.fixed_policy || idx < window_start))
            .collect();

        // Landmarks constrained enough to be variables: triangulated, two or
        // more observations, at least one inside the window.
        let mut observations = Vec::new();
        let mut associations = Vec::new();
        let mut included = Vec::new();
        for (&landmark_id, state) in &self.landmarks {
            if state.position.is_none() || state.observations.len() < 2 {
                continue;
            }
            if !state.observations.iter().any(|&(kf, _)| kf >= window_start) {
                continue;
            }
            included.push((landmark_id, state.position.unwrap()));
            for &(kf, pixel) in &state.observations {
                observations.push(Observation {
                    keyframe_id: kf,
                    landmark_id,
                    pixel,
                    sigma: self.config.sigma_px,
                });
            }
            if let Some(component_id) = state.component {
                associations.push(StructureAssociation {
                    landmark_id,
                    component_id,
                    sigma_str: self.config.association.sigma_str,
                });
            }
        }
        if included.is_empty() {
            return;
        }

        // One odometry prior tethers the newest keyframe to its dead-reckoned
        // pose; it carries the metric scale monocular visual edges leave
        // free, while older in-window poses stay free to absorb structure
        // corrections.
        let rot_weight = 1.0 / self.config.odom_sigma_rot_deg.to_radians().max(1e-6);
        let trans_weight = 1.0 / self.config.odom_sigma_trans.max(1e-6);
        let mut priors = Vec::new();
        if let InitialPosePolicy::Prior {
            rot_weight: rw,
            trans_weight: tw,
        } = self.config.initial_pose
        {
            priors.push(PriorEdge {
                keyframe_id: 0,
                prior: self.keyframes[0].odom_pose,
                rot_weight: rw,
                trans_weight: tw,
            });
        }
        if kf_idx > 0 {
            let relative = self.keyframes[kf_idx]
                .odom_pose
                .compose(&self.keyframes[kf_idx - 1].odom_pose.inverse());
            priors.push(PriorEdge {
                keyframe_id: kf_idx,
                prior: relative.compose(&self.keyframes[kf_idx - 1].pose),
                rot_weight,
                trans_weight,
            });
        }

        let problem = build_problem(
            nodes,
            included.iter().copied(),
            observations,
            &associations,
            priors,
            &self.map,
            self.intrinsics,
            self.config.solver.clone(),
        );
        let Ok(mut problem) = problem else {
            return;
        };
        let joint = joint_bundle_adjust(&mut problem);

        report.ba_ran = true;
        report.ba_initial_cost = joint.round1.initial_cost;
        report.ba_final_cost = joint.round2.final_cost;
        report.ba_iterations = joint.round1.iterations + joint.round2.iterations;
        report.gated_visual = joint.deactivated_visual.len();
        report.gated_structure = joint.deactivated_structure.len();
        report.removed_landmarks = joint.removed_landmarks.len();

        // Write back poses and landmark positions.
        for (idx, kf) in self.keyframes.iter_mut().enumerate() {
            if let Some(pose) = problem.keyframe_pose(idx) {
                kf.pose = pose;
            }
        }
        for &(landmark_id, _) in &included {
            if let Some(position) = problem.landmark(landmark_id) {
                self.landmarks.get_mut(&landmark_id).unwrap().position = Some(position);
            }
        }

        // Propagate the gating decisions into the landmark store.
        for (kf, landmark_id) in &joint.deactivated_visual {
            if let Some(state) = self.landmarks.get_mut(landmark_id) {
                state.observations.retain(|(idx, _)| idx != kf);
            }
        }
        for landmark_id in &joint.deactivated_structure {
            if let Some(state) = self.landmarks.get_mut(landmark_id) {
                state.component = None;
            }
        }
        for landmark_id in &joint.removed_landmarks {
            if let Some(state) = self.landmarks.get_mut(landmark_id) {
                state.position = None;
                state.component = None;
            }
        }
    }
}

/// Result of running the pipeline over a whole sequence.
#[derive(Debug)]
pub struct LocalizationResult {
    pub estimate: Vec<TrajectoryEntry>,
    pub landmark_estimates: Vec<(usize, Vector3<f64>)>,
    pub reports: Vec<KeyframeReport>,
}

/// Run the localization loop over a sequence: odometry poses initialize each
/// keyframe, observations drive triangulation, association and BA.
pub fn run_localization(
    map: GmmMap,
    intrinsics: &CameraIntrinsics,
    timestamps: &[f64],
    odom_poses: &[Pose],
    observations: &[Vec<(usize, ImagePoint)>],
    config: PipelineConfig,
) -> LocalizationResult {
    let mut state = PipelineState::new(map, *intrinsics, config);
    let mut reports = Vec::with_capacity(odom_poses.len());
    for (pose, obs) in odom_poses.iter().zip(observations) {
        reports.push(state.process_keyframe(*pose, obs));
    }
    let estimate = state
        .poses()
        .into_iter()
        .zip(timestamps)
        .map(|(pose, &timestamp)| TrajectoryEntry { timestamp, pose })
        .collect();
    LocalizationResult {
        estimate,
        landmark_estimates: state.landmark_estimates(),
        reports,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{ate_rmse, Alignment};
    use crate::simulator::{
        generate_scene, generate_sequence, SceneSpec, SequenceSpec,
    };

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(460.0, 460.0, 320.0, 240.0, 640, 480)
    }

    fn desk_scene() -> crate::simulator::SyntheticScene {
        generate_scene(&SceneSpec {
            point_density: 40.0,
            component_count: 80,
            landmark_count: 300,
            seed: 7,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    fn to_entries(poses: &[Pose], timestamps: &[f64]) -> Vec<TrajectoryEntry> {
        poses
            .iter()
            .zip(timestamps)
            .map(|(&pose, &timestamp)| TrajectoryEntry { timestamp, pose })
            .collect()
    }

    #[test]
    fn noiseless_sequence_is_recovered_exactly() {
        // Zero surface jitter: the fitted plane components describe the true
        // structure exactly, so the ground truth is a fixed point of the full
        // (visual + structure + prior) objective.
        let scene = generate_scene(&SceneSpec {
            point_density: 40.0,
            component_count: 80,
            landmark_count: 300,
            jitter_sigma: 0.0,
            seed: 7,
            ..SceneSpec::default()
        })
        .unwrap();
        let spec = SequenceSpec {
            n_poses: 25,
            pixel_noise: 0.0,
            odom_sigma_trans: 0.0,
            odom_sigma_rot_deg: 0.0,
            seed: 1,
            ..SequenceSpec::default()
        };
        let seq = generate_sequence(&scene, &spec, &intr());

        // With structure factors off, ground truth is an exact fixed point of
        // the objective and is reproduced to solver precision.
        let visual_only = run_localization(
            scene.gmm.clone(),
            &intr(),
            &seq.timestamps,
            &seq.noisy_poses,
            &seq.observations,
            PipelineConfig {
                structure_enabled: false,
                ..PipelineConfig::default()
            },
        );
        for (est, gt) in visual_only.estimate.iter().zip(&seq.gt_poses) {
            let err = (est.pose.camera_center() - gt.camera_center()).norm();
            assert!(err < 1e-6, "pose error {err}");
        }

        // With structure factors on, landmarks sampled near surface junctions
        // can associate with the adjacent plane, leaving a small bias (the
        // distance-to-mean pull the hybrid residual mitigates but cannot
        // remove). Millimeter-level recovery is the honest bound.
        let full = run_localization(
            scene.gmm.clone(),
            &intr(),
            &seq.timestamps,
            &seq.noisy_poses,
            &seq.observations,
            PipelineConfig::default(),
        );
        for (est, gt) in full.estimate.iter().zip(&seq.gt_poses) {
            let err = (est.pose.camera_center() - gt.camera_center()).norm();
            assert!(err < 1e-2, "pose error {err}");
        }
    }

    #[test]
    fn drifting_odometry_is_corrected() {
        let scene = desk_scene();
        let spec = SequenceSpec {
            n_poses: 60,
            seed: 3,
            ..SequenceSpec::default()
        };
        let seq = generate_sequence(&scene, &spec, &intr());
        let result = run_localization(
            scene.gmm.clone(),
            &intr(),
            &seq.timestamps,
            &seq.noisy_poses,
            &seq.observations,
            PipelineConfig::default(),
        );

        let gt = to_entries(&seq.gt_poses, &seq.timestamps);
        let odom = to_entries(&seq.noisy_poses, &seq.timestamps);
        let odom_ate = ate_rmse(&odom, &gt, Alignment::None).unwrap().ate_rmse;
        let pipeline_ate = ate_rmse(&result.estimate, &gt, Alignment::None)
            .unwrap()
            .ate_rmse;
        assert!(
            pipeline_ate < odom_ate,
            "pipeline {pipeline_ate} vs odometry {odom_ate}"
        );
        // Structure edges exist and every one passed the association gates.
        let n_assoc: usize = result
            .reports
            .iter()
            .map(|r| r.associations_succeeded)
            .sum();
        assert!(n_assoc > 20, "only {n_assoc} associations");
    }

    #[test]
    fn deterministic_for_fixed_inputs() {
        let scene = desk_scene();
        let spec = SequenceSpec {
            n_poses: 20,
            seed: 5,
            ..SequenceSpec::default()
        };
        let seq = generate_sequence(&scene, &spec, &intr());
        let run = || {
            run_localization(
                scene.gmm.clone(),
                &intr(),
                &seq.timestamps,
                &seq.noisy_poses,
                &seq.observations,
                PipelineConfig::default(),
            )
        };
        let a = run();
        let b = run();
        for (ea, eb) in a.estimate.iter().zip(&b.estimate) {
            assert_eq!(ea.pose.rotation, eb.pose.rotation);
            assert_eq!(ea.pose.translation, eb.pose.translation);
        }
    }

    #[test]
    fn fixed_keyframes_never_move_after_leaving_the_window() {
        let scene = desk_scene();
        let spec = SequenceSpec {
            n_poses: 30,
            seed: 9,
            ..SequenceSpec::default()
        };
        let seq = generate_sequence(&scene, &spec, &intr());
        let config = PipelineConfig::default();
        let window = config.window;
        let mut state = PipelineState::new(scene.gmm.clone(), intr(), config);
        let mut frozen: Vec<Option<Pose>> = vec![None; seq.noisy_poses.len()];
        for (idx, (pose, obs)) in seq
            .noisy_poses
            .iter()
            .zip(&seq.observations)
            .enumerate()
        {
            state.process_keyframe(*pose, obs);
            let poses = state.poses();
            // Record each pose the moment it leaves the window.
            if idx + 1 >= window {
                let leaving = idx + 1 - window;
                if frozen[leaving].is_none() {
                    frozen[leaving] = Some(poses[leaving]);
                }
            }
            for (k, maybe) in frozen.iter().enumerate() {
                if let Some(expected) = maybe {
                    assert_eq!(poses[k].rotation, expected.rotation, "keyframe {k}");
                    assert_eq!(poses[k].translation, expected.translation);
                }
            }
        }
    }

    #[test]
    fn structure_disabled_reduces_to_visual_ba() {
        let scene = desk_scene();
        let spec = SequenceSpec {
            n_poses: 40,
            seed: 11,
            ..SequenceSpec::default()
        };
        let seq = generate_sequence(&scene, &spec, &intr());
        let config = PipelineConfig {
            structure_enabled: false,
            ..PipelineConfig::default()
        };
        let result = run_localization(
            scene.gmm.clone(),
            &intr(),
            &seq.timestamps,
            &seq.noisy_poses,
            &seq.observations,
            config,
        );
        let total_assoc: usize = result
            .reports
            .iter()
            .map(|r| r.associations_attempted)
            .sum();
        assert_eq!(total_assoc, 0);
        // Still produces a usable trajectory.
        let gt = to_entries(&seq.gt_poses, &seq.timestamps);
        let ate = ate_rmse(&result.estimate, &gt, Alignment::None)
            .unwrap()
            .ate_rmse;
        assert!(ate.is_finite());
    }
}
