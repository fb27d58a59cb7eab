//! Joint optimization of keyframe poses and landmarks under visual,
//! structure and prior factors: a Levenberg-Marquardt solver that eliminates
//! landmarks through the Schur complement, plus two-round chi-square outlier
//! pruning.

pub(crate) mod lm;
#[cfg(test)]
mod schur_check;

pub use lm::{IterationRecord, SolveReport, TerminationReason};

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{chi2_threshold, reprojection_residual, structure_residual, Observation, StructureAssociation};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::gmm_map::{GaussianComponent3D, GmmMap};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("visual edge {index} references missing keyframe {keyframe_id}")]
    DanglingKeyframe { index: usize, keyframe_id: usize },
    #[error("visual edge {index} references missing landmark {landmark_id}")]
    DanglingLandmark { index: usize, landmark_id: usize },
    #[error("structure edge {index} references missing landmark {landmark_id}")]
    DanglingStructureLandmark { index: usize, landmark_id: usize },
    #[error("structure edge {index} references missing component {component_id}")]
    DanglingComponent { index: usize, component_id: usize },
    #[error("prior edge {index} references missing keyframe {keyframe_id}")]
    DanglingPrior { index: usize, keyframe_id: usize },
    #[error("gauge is not fixed: no fixed keyframe and no prior edge")]
    NoGauge,
    #[error("observation sigma must be positive (edge {index})")]
    NonPositiveSigma { index: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Initial damping as a fraction of the largest normal-equation diagonal.
    pub initial_damping_scale: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// Relative cost-change convergence threshold.
    pub cost_tolerance: f64,
    /// Step-norm convergence threshold.
    pub step_tolerance: f64,
    /// Confidence level of the chi-square outlier gate.
    pub outlier_confidence: f64,
    /// Huber-robustify visual edges.
    pub robust_visual: bool,
    /// Huber-robustify structure edges (gating usually suffices).
    pub robust_structure: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            initial_damping_scale: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            cost_tolerance: 1e-9,
            step_tolerance: 1e-10,
            outlier_confidence: 0.95,
            robust_visual: true,
            robust_structure: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KeyframeNode {
    pub pose: Pose,
    pub fixed: bool,
}

#[derive(Debug, Clone)]
pub struct PriorEdge {
    pub keyframe_id: usize,
    pub prior: Pose,
    /// Whitening weight (1 / sigma_rot) on the rotation part of the residual.
    pub rot_weight: f64,
    /// Whitening weight (1 / sigma_trans) on the translation part.
    pub trans_weight: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct VisualEdge {
    pub observation: Observation,
    pub active: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct StructureEdge {
    pub landmark_id: usize,
    pub component: GaussianComponent3D,
    pub sigma_str: f64,
    pub active: bool,
}

/// The factor-graph container.
#[derive(Debug, Clone)]
pub struct Problem {
    pub(crate) keyframes: BTreeMap<usize, KeyframeNode>,
    pub(crate) landmarks: BTreeMap<usize, Vector3<f64>>,
    pub(crate) visual_edges: Vec<VisualEdge>,
    pub(crate) structure_edges: Vec<StructureEdge>,
    pub(crate) prior_edges: Vec<PriorEdge>,
    pub intrinsics: CameraIntrinsics,
    pub settings: SolverConfig,
}

/// Validate and assemble a problem. Structure associations are resolved
/// against the map at build time so the problem is self-contained.
pub fn build_problem(
    keyframes: impl IntoIterator<Item = (usize, Pose, bool)>,
    landmarks: impl IntoIterator<Item = (usize, Vector3<f64>)>,
    observations: Vec<Observation>,
    associations: &[StructureAssociation],
    priors: Vec<PriorEdge>,
    map: &GmmMap,
    intrinsics: CameraIntrinsics,
    settings: SolverConfig,
) -> Result<Problem, ProblemError> {
    let keyframes: BTreeMap<usize, KeyframeNode> = keyframes
        .into_iter()
        .map(|(id, pose, fixed)| (id, KeyframeNode { pose, fixed }))
        .collect();
    let landmarks: BTreeMap<usize, Vector3<f64>> = landmarks.into_iter().collect();

    for (index, obs) in observations.iter().enumerate() {
        if !keyframes.contains_key(&obs.keyframe_id) {
            return Err(ProblemError::DanglingKeyframe {
                index,
                keyframe_id: obs.keyframe_id,
            });
        }
        if !landmarks.contains_key(&obs.landmark_id) {
            return Err(ProblemError::DanglingLandmark {
                index,
                landmark_id: obs.landmark_id,
            });
        }
        if obs.sigma <= 0.0 {
            return Err(ProblemError::NonPositiveSigma { index });
        }
    }
    let structure_edges = associations
        .iter()
        .enumerate()
        .map(|(index, assoc)| {
            if !landmarks.contains_key(&assoc.landmark_id) {
                return Err(ProblemError::DanglingStructureLandmark {
                    index,
                    landmark_id: assoc.landmark_id,
                });
            }
            if assoc.component_id >= map.len() {
                return Err(ProblemError::DanglingComponent {
                    index,
                    component_id: assoc.component_id,
                });
            }
            Ok(StructureEdge {
                landmark_id: assoc.landmark_id,
                component: map.component(assoc.component_id).clone(),
                sigma_str: assoc.sigma_str,
                active: true,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (index, prior) in priors.iter().enumerate() {
        if !keyframes.contains_key(&prior.keyframe_id) {
            return Err(ProblemError::DanglingPrior {
                index,
                keyframe_id: prior.keyframe_id,
            });
        }
    }

    let has_gauge = keyframes.values().any(|kf| kf.fixed) || !priors.is_empty();
    if !has_gauge && !keyframes.is_empty() {
        return Err(ProblemError::NoGauge);
    }

    Ok(Problem {
        keyframes,
        landmarks,
        visual_edges: observations
            .into_iter()
            .map(|observation| VisualEdge {
                observation,
                active: true,
            })
            .collect(),
        structure_edges,
        prior_edges: priors,
        intrinsics,
        settings,
    })
}

impl Problem {
    pub fn num_free_parameters(&self) -> usize {
        6 * self.keyframes.values().filter(|kf| !kf.fixed).count() + 3 * self.landmarks.len()
    }

    pub fn keyframe_pose(&self, id: usize) -> Option<Pose> {
        self.keyframes.get(&id).map(|kf| kf.pose)
    }

    pub fn landmark(&self, id: usize) -> Option<Vector3<f64>> {
        self.landmarks.get(&id).copied()
    }

    pub fn keyframe_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.keyframes.keys().copied()
    }

    pub fn landmark_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.landmarks.keys().copied()
    }

    pub fn active_visual_edges(&self) -> impl Iterator<Item = &Observation> + '_ {
        self.visual_edges
            .iter()
            .filter(|e| e.active)
            .map(|e| &e.observation)
    }

    /// Run a single LM solve.
    pub fn lm_solve(&mut self) -> SolveReport {
        lm::solve(self)
    }
}

/// Outcome of [`joint_bundle_adjust`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointReport {
    pub round1: SolveReport,
    pub round2: SolveReport,
    /// (keyframe_id, landmark_id) pairs of gated visual edges.
    pub deactivated_visual: Vec<(usize, usize)>,
    /// Landmark ids of gated structure edges.
    pub deactivated_structure: Vec<usize>,
    /// Landmarks dropped for losing their visual support.
    pub removed_landmarks: Vec<usize>,
}

/// Two-round optimization: solve, deactivate every measurement edge whose
/// whitened squared residual exceeds its dof-matched chi-square bound, then
/// solve again on the survivors. Prior edges carry the gauge and are exempt.
pub fn joint_bundle_adjust(problem: &mut Problem) -> JointReport {
    let round1 = problem.lm_solve();

    let confidence = problem.settings.outlier_confidence;
    let visual_gate = chi2_threshold(2, confidence).expect("valid confidence");
    let structure_gate = [
        chi2_threshold(1, confidence).expect("valid confidence"),
        chi2_threshold(3, confidence).expect("valid confidence"),
    ];

    let mut deactivated_visual = Vec::new();
    for edge in &mut problem.visual_edges {
        if !edge.active {
            continue;
        }
        let obs = &edge.observation;
        let pose = problem.keyframes[&obs.keyframe_id].pose;
        let landmark = problem.landmarks[&obs.landmark_id];
        let gated = match reprojection_residual(
            &landmark,
            &pose,
            &obs.pixel,
            obs.sigma,
            &problem.intrinsics,
        ) {
            Ok((residual, _, _)) => residual.norm_squared() > visual_gate,
            Err(_) => true,
        };
        if gated {
            edge.active = false;
            deactivated_visual.push((obs.keyframe_id, obs.landmark_id));
        }
    }

    let mut deactivated_structure = Vec::new();
    for edge in &mut problem.structure_edges {
        if !edge.active {
            continue;
        }
        let landmark = problem.landmarks[&edge.landmark_id];
        let residual = structure_residual(&landmark, &edge.component, edge.sigma_str);
        let gate = if residual.dof() == 1 {
            structure_gate[0]
        } else {
            structure_gate[1]
        };
        if residual.squared_norm() > gate {
            edge.active = false;
            deactivated_structure.push(edge.landmark_id);
        }
    }

    // A landmark needs at least two active observations to stay constrained;
    // a lone structure edge pins only 1-3 dof, so such landmarks go too.
    let mut support: BTreeMap<usize, usize> = BTreeMap::new();
    for edge in problem.visual_edges.iter().filter(|e| e.active) {
        *support.entry(edge.observation.landmark_id).or_insert(0) += 1;
    }
    let removed_landmarks: Vec<usize> = problem
        .landmarks
        .keys()
        .copied()
        .filter(|id| support.get(id).copied().unwrap_or(0) < 2)
        .collect();
    for id in &removed_landmarks {
        problem.landmarks.remove(id);
        for edge in &mut problem.visual_edges {
            if edge.observation.landmark_id == *id {
                edge.active = false;
            }
        }
        for edge in &mut problem.structure_edges {
            if edge.landmark_id == *id {
                edge.active = false;
            }
        }
    }

    let round2 = problem.lm_solve();
    JointReport {
        round1,
        round2,
        deactivated_visual,
        deactivated_structure,
        removed_landmarks,
    }
}
