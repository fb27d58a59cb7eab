//! Landmark-to-component association: candidate retrieval in 2-D,
//! per-candidate landmark refinement under the structure constraint,
//! best-candidate selection by post-refinement reprojection error, and a
//! likelihood-driven ICP-style re-assignment over the map's neighbor graph.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::factors::{chi2_threshold, reprojection_residual, structure_residual, StructureResidual};
use crate::geometry::{CameraIntrinsics, ImagePoint, Pose};
use crate::gmm_map::{GaussianComponent3D, GmmMap};
use crate::projection::ProjectedComponent2D;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssociationConfig {
    /// Number of 2-D candidates retrieved per landmark.
    pub candidate_count: usize,
    /// Re-assignment hop budget of the likelihood phase.
    pub hop_bound: usize,
    /// Structure noise standard deviation (m).
    pub sigma_str: f64,
    /// When false, candidates are scored at the fixed triangulated position
    /// and the landmark is never moved.
    pub structure_enabled: bool,
    /// Chi-square gate confidence for the visual residual check.
    pub confidence: f64,
    /// Iteration budget of the per-landmark refinement.
    pub max_refine_iterations: usize,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            candidate_count: 3,
            hop_bound: 10,
            sigma_str: crate::factors::DEFAULT_SIGMA_STR,
            structure_enabled: true,
            confidence: 0.95,
            max_refine_iterations: 20,
        }
    }
}

/// Candidate component ids for one landmark, ordered by ascending squared
/// Mahalanobis distance of the observation to the projected component (ties
/// broken by ascending id).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub candidates: Vec<usize>,
}

/// One observation of the landmark being associated, with the current
/// estimate of the observing keyframe's pose.
#[derive(Debug, Clone, Copy)]
pub struct LandmarkObservation {
    pub pose: Pose,
    pub pixel: ImagePoint,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct AssociationOutcome {
    pub success: bool,
    pub refined_position: Vector3<f64>,
    pub component_id: Option<usize>,
    /// Post-refinement whitened squared visual cost.
    pub final_reproj_error: f64,
    /// Likelihood-phase re-assignments performed.
    pub hops: usize,
}

impl AssociationOutcome {
    fn failure(position: Vector3<f64>, error: f64) -> Self {
        Self {
            success: false,
            refined_position: position,
            component_id: None,
            final_reproj_error: error,
            hops: 0,
        }
    }
}

/// The k projected components nearest to `pixel` under the squared
/// Mahalanobis distance of the 2-D densities.
pub fn candidates_from_projections(
    pixel: &ImagePoint,
    projections: &[ProjectedComponent2D],
    k: usize,
) -> CandidateSet {
    let mut scored: Vec<(f64, usize)> = projections
        .iter()
        .map(|proj| (proj.mahalanobis_squared(pixel), proj.source_id))
        .collect();
    scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
    scored.truncate(k);
    CandidateSet {
        candidates: scored.into_iter().map(|(_, id)| id).collect(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptStructureResult {
    pub converged: bool,
    pub position: Vector3<f64>,
    /// Whitened squared visual cost at the result.
    pub visual_cost: f64,
}

/// Refine a landmark position under its visual observations plus one
/// structure constraint (poses fixed): a 3-parameter Levenberg-Marquardt
/// sub-problem.
pub fn opt_structure(
    observations: &[LandmarkObservation],
    intrinsics: &CameraIntrinsics,
    structure: Option<(&GaussianComponent3D, f64)>,
    initial: &Vector3<f64>,
    max_iterations: usize,
) -> OptStructureResult {
    let mut x = *initial;
    let Some(mut cost) = sub_cost(observations, intrinsics, structure, &x) else {
        return OptStructureResult {
            converged: false,
            position: x,
            visual_cost: f64::INFINITY,
        };
    };

    let mut damping = 1e-8;
    let mut converged = false;
    for _ in 0..max_iterations {
        let mut hessian = Matrix3::zeros();
        let mut rhs = Vector3::zeros();
        for obs in observations {
            let Ok((residual, _, jac)) =
                reprojection_residual(&x, &obs.pose, &obs.pixel, obs.sigma, intrinsics)
            else {
                continue;
            };
            hessian += jac.transpose() * jac;
            rhs -= jac.transpose() * residual;
        }
        if let Some((component, sigma_str)) = structure {
            match structure_residual(&x, component, sigma_str) {
                StructureResidual::Degenerate { value, jacobian } => {
                    hessian += jacobian.transpose() * jacobian;
                    rhs -= jacobian.transpose() * value;
                }
                StructureResidual::Full { value, jacobian } => {
                    hessian += jacobian.transpose() * jacobian;
                    rhs -= jacobian.transpose() * value;
                }
            }
        }

        let mut stepped = false;
        for _ in 0..12 {
            let damped = hessian + Matrix3::identity() * damping;
            let Some(chol) = damped.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let delta = chol.solve(&rhs);
            let candidate = x + delta;
            match sub_cost(observations, intrinsics, structure, &candidate) {
                Some(new_cost) if new_cost <= cost => {
                    let drop = cost - new_cost;
                    x = candidate;
                    cost = new_cost;
                    damping = (damping / 10.0).max(1e-12);
                    stepped = true;
                    if drop <= 1e-9 * cost.max(1e-300) || delta.norm() < 1e-12 {
                        converged = true;
                    }
                    break;
                }
                _ => damping *= 10.0,
            }
        }
        if converged {
            break;
        }
        if !stepped {
            // Damping exhausted without an acceptable step.
            break;
        }
    }

    OptStructureResult {
        converged,
        position: x,
        visual_cost: visual_cost(observations, intrinsics, &x),
    }
}

fn sub_cost(
    observations: &[LandmarkObservation],
    intrinsics: &CameraIntrinsics,
    structure: Option<(&GaussianComponent3D, f64)>,
    x: &Vector3<f64>,
) -> Option<f64> {
    let mut cost = 0.0;
    let mut in_front = 0;
    for obs in observations {
        if let Ok((residual, _, _)) =
            reprojection_residual(x, &obs.pose, &obs.pixel, obs.sigma, intrinsics)
        {
            cost += residual.norm_squared();
            in_front += 1;
        }
    }
    if in_front < observations.len() {
        // Refinement must not park the landmark behind a camera.
        return None;
    }
    if let Some((component, sigma_str)) = structure {
        cost += structure_residual(x, component, sigma_str).squared_norm();
    }
    Some(cost)
}

fn visual_cost(
    observations: &[LandmarkObservation],
    intrinsics: &CameraIntrinsics,
    x: &Vector3<f64>,
) -> f64 {
    let mut cost = 0.0;
    for obs in observations {
        match reprojection_residual(x, &obs.pose, &obs.pixel, obs.sigma, intrinsics) {
            Ok((residual, _, _)) => cost += residual.norm_squared(),
            Err(_) => return f64::INFINITY,
        }
    }
    cost
}

/// Full association of one triangulated landmark.
///
/// Phase 1 refines the landmark against each 2-D candidate and keeps the one
/// with the lowest gated reprojection error. Phase 2 re-assigns along the
/// neighbor graph until the component is a local likelihood maximum; a hop
/// budget and a visited set guard against cycles (hitting either guard is a
/// failure, since the local-maximum postcondition cannot be certified).
pub fn associate(
    pixel: &ImagePoint,
    observations: &[LandmarkObservation],
    triangulated: &Vector3<f64>,
    projections: &[ProjectedComponent2D],
    map: &GmmMap,
    intrinsics: &CameraIntrinsics,
    config: &AssociationConfig,
) -> AssociationOutcome {
    let candidates = candidates_from_projections(pixel, projections, config.candidate_count);
    if candidates.candidates.is_empty() || observations.is_empty() {
        return AssociationOutcome::failure(*triangulated, f64::INFINITY);
    }
    let gate = chi2_threshold(2 * observations.len(), config.confidence).expect("valid gate");

    if !config.structure_enabled {
        // Pure candidate scoring at the fixed triangulated position.
        let error = visual_cost(observations, intrinsics, triangulated);
        if error > gate {
            return AssociationOutcome::failure(*triangulated, error);
        }
        return AssociationOutcome {
            success: true,
            refined_position: *triangulated,
            component_id: Some(candidates.candidates[0]),
            final_reproj_error: error,
            hops: 0,
        };
    }

    // Phase 1: refine per candidate, keep the best gated reprojection error.
    let mut best: Option<(usize, OptStructureResult)> = None;
    let mut best_error_seen = f64::INFINITY;
    for &component_id in &candidates.candidates {
        let component = map.component(component_id);
        let result = opt_structure(
            observations,
            intrinsics,
            Some((component, config.sigma_str)),
            triangulated,
            config.max_refine_iterations,
        );
        best_error_seen = best_error_seen.min(result.visual_cost);
        if !result.converged || result.visual_cost > gate {
            continue;
        }
        let better = match &best {
            None => true,
            Some((current_id, current)) => {
                let diff = result.visual_cost - current.visual_cost;
                if diff.abs() <= 1e-9 {
                    // Tie: prefer the higher 3-D log-likelihood, then lower id.
                    let lhs = component.log_likelihood(&result.position);
                    let rhs = map
                        .component(*current_id)
                        .log_likelihood(&current.position);
                    lhs > rhs || (lhs == rhs && component_id < *current_id)
                } else {
                    diff < 0.0
                }
            }
        };
        if better {
            best = Some((component_id, result));
        }
    }
    let Some((mut component_id, mut current)) = best else {
        return AssociationOutcome::failure(*triangulated, best_error_seen);
    };

    // Phase 2: ICP-style re-assignment toward the likelihood maximum over the
    // neighbor graph.
    let mut visited = vec![component_id];
    let mut hops = 0;
    loop {
        let component = map.component(component_id);
        let own_likelihood = component.log_likelihood(&current.position);
        let challenger = component
            .neighbors
            .iter()
            .map(|&id| (map.component(id).log_likelihood(&current.position), id))
            .max_by(|a, b| a.partial_cmp(b).unwrap());
        match challenger {
            Some((likelihood, neighbor_id)) if likelihood > own_likelihood => {
                hops += 1;
                if hops > config.hop_bound || visited.contains(&neighbor_id) {
                    return AssociationOutcome::failure(*triangulated, current.visual_cost);
                }
                let result = opt_structure(
                    observations,
                    intrinsics,
                    Some((map.component(neighbor_id), config.sigma_str)),
                    &current.position,
                    config.max_refine_iterations,
                );
                if !result.converged || result.visual_cost > gate {
                    return AssociationOutcome::failure(*triangulated, result.visual_cost);
                }
                visited.push(neighbor_id);
                component_id = neighbor_id;
                current = result;
            }
            _ => break,
        }
    }

    AssociationOutcome {
        success: true,
        refined_position: current.position,
        component_id: Some(component_id),
        final_reproj_error: current.visual_cost,
        hops,
    }
}
