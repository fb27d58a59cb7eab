//! Levenberg-Marquardt internals: normal equations `H = J^T J + eps I`,
//! `b = -J^T r` assembled blockwise, landmarks eliminated via the Schur
//! complement, damping adapted on rejected steps.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::Problem;
use crate::factors::{
    chi2_threshold, huber, prior_pose_residual, reprojection_residual, structure_residual,
    StructureResidual,
};
use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationReason {
    /// Relative cost change below tolerance.
    CostConverged,
    /// Step norm below tolerance.
    StepConverged,
    MaxIterations,
    /// Damping grew past its cap without an acceptable step.
    NoProgress,
    /// Non-finite cost encountered.
    NumericalFailure,
    /// Nothing to optimize.
    Empty,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub damping: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub termination: TerminationReason,
    pub iteration_log: Vec<IterationRecord>,
    /// Visual edges skipped in some iteration because the landmark sat behind
    /// the camera.
    pub behind_camera_skips: usize,
}

#[derive(Clone)]
struct State {
    poses: Vec<Pose>,
    landmarks: Vec<Vector3<f64>>,
}

struct Layout {
    free_pose_ids: Vec<usize>,
    pose_slot: BTreeMap<usize, usize>,
    landmark_ids: Vec<usize>,
    landmark_slot: BTreeMap<usize, usize>,
}

impl Layout {
    fn of(problem: &Problem) -> Self {
        let free_pose_ids: Vec<usize> = problem
            .keyframes
            .iter()
            .filter(|(_, kf)| !kf.fixed)
            .map(|(&id, _)| id)
            .collect();
        let pose_slot = free_pose_ids
            .iter()
            .enumerate()
            .map(|(slot, &id)| (id, slot))
            .collect();
        let landmark_ids: Vec<usize> = problem.landmarks.keys().copied().collect();
        let landmark_slot = landmark_ids
            .iter()
            .enumerate()
            .map(|(slot, &id)| (id, slot))
            .collect();
        Self {
            free_pose_ids,
            pose_slot,
            landmark_ids,
            landmark_slot,
        }
    }
}

struct Thresholds {
    visual: f64,
    structure_1d: f64,
    structure_3d: f64,
}

#[derive(Clone, Copy)]
struct CostEval {
    cost: f64,
    /// Visual edges whose landmark sits behind the camera at this state;
    /// they contribute no cost, so a step may not increase this count.
    behind: usize,
}

struct NormalEquations {
    h_pose: Vec<Matrix6<f64>>,
    b_pose: Vec<Vector6<f64>>,
    h_landmark: Vec<Matrix3<f64>>,
    b_landmark: Vec<Vector3<f64>>,
    /// Per landmark: accumulated pose-landmark coupling blocks.
    cross: Vec<Vec<(usize, Matrix6x3<f64>)>>,
    max_diag: f64,
    behind_camera: usize,
}

pub(super) fn solve(problem: &mut Problem) -> SolveReport {
    let layout = Layout::of(problem);
    let confidence = problem.settings.outlier_confidence;
    let thresholds = Thresholds {
        visual: chi2_threshold(2, confidence).expect("valid confidence"),
        structure_1d: chi2_threshold(1, confidence).expect("valid confidence"),
        structure_3d: chi2_threshold(3, confidence).expect("valid confidence"),
    };

    let mut state = State {
        poses: layout
            .free_pose_ids
            .iter()
            .map(|id| problem.keyframes[id].pose)
            .collect(),
        landmarks: layout
            .landmark_ids
            .iter()
            .map(|id| problem.landmarks[id])
            .collect(),
    };

    let initial = evaluate_cost(problem, &layout, &state, &thresholds);
    let mut report = SolveReport {
        initial_cost: initial.cost,
        final_cost: initial.cost,
        iterations: 0,
        accepted_steps: 0,
        termination: TerminationReason::MaxIterations,
        iteration_log: Vec::new(),
        behind_camera_skips: 0,
    };

    if layout.free_pose_ids.is_empty() && layout.landmark_ids.is_empty() {
        report.termination = TerminationReason::Empty;
        return report;
    }
    if !initial.cost.is_finite() {
        report.termination = TerminationReason::NumericalFailure;
        return report;
    }

    let mut current = initial;
    let mut damping: Option<f64> = None;
    let mut iteration = 0;

    'outer: while iteration < problem.settings.max_iterations {
        let equations = assemble(problem, &layout, &state, &thresholds);
        report.behind_camera_skips += equations.behind_camera;
        let eps0 = damping.get_or_insert_with(|| {
            problem.settings.initial_damping_scale * equations.max_diag.max(1e-12)
        });
        let damping_cap = 1e16 * equations.max_diag.max(1e-12);

        loop {
            iteration += 1;
            let step = try_step(&equations, &layout, *eps0);
            let (candidate, step_norm) = match step {
                Some((delta_pose, delta_landmark)) => {
                    let mut norm_sq = 0.0;
                    let candidate = State {
                        poses: state
                            .poses
                            .iter()
                            .zip(&delta_pose)
                            .map(|(pose, delta)| {
                                norm_sq += delta.norm_squared();
                                pose.retract(delta)
                            })
                            .collect(),
                        landmarks: state
                            .landmarks
                            .iter()
                            .zip(&delta_landmark)
                            .map(|(x, delta)| {
                                norm_sq += delta.norm_squared();
                                x + delta
                            })
                            .collect(),
                    };
                    (Some(candidate), norm_sq.sqrt())
                }
                None => (None, 0.0),
            };

            let evaluated = candidate
                .as_ref()
                .map(|c| evaluate_cost(problem, &layout, c, &thresholds));
            if let Some(eval) = &evaluated {
                if !eval.cost.is_finite() {
                    report.termination = TerminationReason::NumericalFailure;
                    break 'outer;
                }
            }

            let accepted = evaluated
                .map(|eval| eval.cost <= current.cost && eval.behind <= current.behind)
                .unwrap_or(false);
            report.iteration_log.push(IterationRecord {
                iteration,
                cost: if accepted {
                    evaluated.unwrap().cost
                } else {
                    current.cost
                },
                damping: *eps0,
                accepted,
            });

            if accepted {
                let new = evaluated.unwrap();
                let cost_drop = current.cost - new.cost;
                state = candidate.unwrap();
                current = new;
                report.accepted_steps += 1;
                *eps0 /= problem.settings.damping_decrease;

                if cost_drop <= problem.settings.cost_tolerance * current.cost.max(1e-300) {
                    report.termination = TerminationReason::CostConverged;
                    break 'outer;
                }
                if step_norm < problem.settings.step_tolerance {
                    report.termination = TerminationReason::StepConverged;
                    break 'outer;
                }
                break; // relinearize
            }

            *eps0 *= problem.settings.damping_increase;
            if *eps0 > damping_cap {
                report.termination = TerminationReason::NoProgress;
                break 'outer;
            }
            if iteration >= problem.settings.max_iterations {
                break 'outer;
            }
        }
    }

    report.iterations = iteration;
    report.final_cost = current.cost;

    for (slot, id) in layout.free_pose_ids.iter().enumerate() {
        problem.keyframes.get_mut(id).unwrap().pose = state.poses[slot];
    }
    for (slot, id) in layout.landmark_ids.iter().enumerate() {
        *problem.landmarks.get_mut(id).unwrap() = state.landmarks[slot];
    }
    report
}

fn pose_of(problem: &Problem, layout: &Layout, state: &State, keyframe_id: usize) -> Pose {
    match layout.pose_slot.get(&keyframe_id) {
        Some(&slot) => state.poses[slot],
        None => problem.keyframes[&keyframe_id].pose,
    }
}

/// Total robust cost at a state. Behind-camera edges contribute nothing
/// (they are deactivated for the iteration) but are counted so acceptance
/// can refuse steps that push landmarks out of view.
fn evaluate_cost(
    problem: &Problem,
    layout: &Layout,
    state: &State,
    thresholds: &Thresholds,
) -> CostEval {
    let mut cost = 0.0;
    let mut behind = 0;
    for edge in problem.visual_edges.iter().filter(|e| e.active) {
        let obs = &edge.observation;
        let Some(&lslot) = layout.landmark_slot.get(&obs.landmark_id) else {
            continue;
        };
        let pose = pose_of(problem, layout, state, obs.keyframe_id);
        match reprojection_residual(
            &state.landmarks[lslot],
            &pose,
            &obs.pixel,
            obs.sigma,
            &problem.intrinsics,
        ) {
            Ok((residual, _, _)) => {
                let squared = residual.norm_squared();
                cost += if problem.settings.robust_visual {
                    huber(squared, thresholds.visual).0
                } else {
                    squared
                };
            }
            Err(_) => behind += 1,
        }
    }
    for edge in problem.structure_edges.iter().filter(|e| e.active) {
        let Some(&lslot) = layout.landmark_slot.get(&edge.landmark_id) else {
            continue;
        };
        let residual = structure_residual(&state.landmarks[lslot], &edge.component, edge.sigma_str);
        let squared = residual.squared_norm();
        cost += if problem.settings.robust_structure {
            let gate = if residual.dof() == 1 {
                thresholds.structure_1d
            } else {
                thresholds.structure_3d
            };
            huber(squared, gate).0
        } else {
            squared
        };
    }
    for prior in &problem.prior_edges {
        let pose = pose_of(problem, layout, state, prior.keyframe_id);
        let (residual, _) = prior_pose_residual(&pose, &prior.prior);
        cost += weight_prior(&residual, prior).norm_squared();
    }
    CostEval { cost, behind }
}

fn weight_prior(residual: &Vector6<f64>, prior: &super::PriorEdge) -> Vector6<f64> {
    let mut out = *residual;
    for i in 0..3 {
        out[i] *= prior.rot_weight;
        out[i + 3] *= prior.trans_weight;
    }
    out
}

fn assemble(
    problem: &Problem,
    layout: &Layout,
    state: &State,
    thresholds: &Thresholds,
) -> NormalEquations {
    let n_pose = layout.free_pose_ids.len();
    let n_landmark = layout.landmark_ids.len();
    let mut eq = NormalEquations {
        h_pose: vec![Matrix6::zeros(); n_pose],
        b_pose: vec![Vector6::zeros(); n_pose],
        h_landmark: vec![Matrix3::zeros(); n_landmark],
        b_landmark: vec![Vector3::zeros(); n_landmark],
        cross: vec![Vec::new(); n_landmark],
        max_diag: 0.0,
        behind_camera: 0,
    };

    for edge in problem.visual_edges.iter().filter(|e| e.active) {
        let obs = &edge.observation;
        let Some(&lslot) = layout.landmark_slot.get(&obs.landmark_id) else {
            continue;
        };
        let pose = pose_of(problem, layout, state, obs.keyframe_id);
        let Ok((mut residual, mut jac_pose, mut jac_landmark)) = reprojection_residual(
            &state.landmarks[lslot],
            &pose,
            &obs.pixel,
            obs.sigma,
            &problem.intrinsics,
        ) else {
            eq.behind_camera += 1;
            continue;
        };
        if problem.settings.robust_visual {
            let (_, weight) = huber(residual.norm_squared(), thresholds.visual);
            let scale = weight.sqrt();
            residual *= scale;
            jac_pose *= scale;
            jac_landmark *= scale;
        }

        eq.h_landmark[lslot] += jac_landmark.transpose() * jac_landmark;
        eq.b_landmark[lslot] -= jac_landmark.transpose() * residual;
        if let Some(&pslot) = layout.pose_slot.get(&obs.keyframe_id) {
            eq.h_pose[pslot] += jac_pose.transpose() * jac_pose;
            eq.b_pose[pslot] -= jac_pose.transpose() * residual;
            let block = jac_pose.transpose() * jac_landmark;
            add_cross(&mut eq.cross[lslot], pslot, block);
        }
    }

    for edge in problem.structure_edges.iter().filter(|e| e.active) {
        let Some(&lslot) = layout.landmark_slot.get(&edge.landmark_id) else {
            continue;
        };
        let residual = structure_residual(&state.landmarks[lslot], &edge.component, edge.sigma_str);
        let scale = if problem.settings.robust_structure {
            let gate = if residual.dof() == 1 {
                thresholds.structure_1d
            } else {
                thresholds.structure_3d
            };
            huber(residual.squared_norm(), gate).1.sqrt()
        } else {
            1.0
        };
        match residual {
            StructureResidual::Degenerate { value, jacobian } => {
                let jac = jacobian * scale;
                let value = value * scale;
                eq.h_landmark[lslot] += jac.transpose() * jac;
                eq.b_landmark[lslot] -= jac.transpose() * value;
            }
            StructureResidual::Full { value, jacobian } => {
                let jac = jacobian * scale;
                let value = value * scale;
                eq.h_landmark[lslot] += jac.transpose() * jac;
                eq.b_landmark[lslot] -= jac.transpose() * value;
            }
        }
    }

    for prior in &problem.prior_edges {
        let Some(&pslot) = layout.pose_slot.get(&prior.keyframe_id) else {
            continue;
        };
        let pose = state.poses[pslot];
        let (residual, jacobian) = prior_pose_residual(&pose, &prior.prior);
        let mut jac = jacobian;
        for col in 0..6 {
            for row in 0..3 {
                jac[(row, col)] *= prior.rot_weight;
                jac[(row + 3, col)] *= prior.trans_weight;
            }
        }
        let res = weight_prior(&residual, prior);
        eq.h_pose[pslot] += jac.transpose() * jac;
        eq.b_pose[pslot] -= jac.transpose() * res;
    }

    for block in &eq.h_pose {
        for i in 0..6 {
            eq.max_diag = eq.max_diag.max(block[(i, i)]);
        }
    }
    for block in &eq.h_landmark {
        for i in 0..3 {
            eq.max_diag = eq.max_diag.max(block[(i, i)]);
        }
    }
    eq
}

fn add_cross(list: &mut Vec<(usize, Matrix6x3<f64>)>, pslot: usize, block: Matrix6x3<f64>) {
    if let Some(entry) = list.iter_mut().find(|(slot, _)| *slot == pslot) {
        entry.1 += block;
    } else {
        list.push((pslot, block));
    }
}

#[cfg(test)]
pub(crate) fn debug_step(
    problem: &Problem,
    damping: f64,
) -> Option<(Vec<Vector6<f64>>, Vec<Vector3<f64>>)> {
    let layout = Layout::of(problem);
    let confidence = problem.settings.outlier_confidence;
    let thresholds = Thresholds {
        visual: chi2_threshold(2, confidence).unwrap(),
        structure_1d: chi2_threshold(1, confidence).unwrap(),
        structure_3d: chi2_threshold(3, confidence).unwrap(),
    };
    let state = State {
        poses: layout
            .free_pose_ids
            .iter()
            .map(|id| problem.keyframes[id].pose)
            .collect(),
        landmarks: layout
            .landmark_ids
            .iter()
            .map(|id| problem.landmarks[id])
            .collect(),
    };
    let equations = assemble(problem, &layout, &state, &thresholds);
    try_step(&equations, &layout, damping)
}


/// One damped step: Schur-eliminate landmarks, solve the reduced pose system,
/// back-substitute. `None` when the reduced system is not positive definite.
#[allow(clippy::type_complexity)]
fn try_step(
    eq: &NormalEquations,
    layout: &Layout,
    damping: f64,
) -> Option<(Vec<Vector6<f64>>, Vec<Vector3<f64>>)> {
    let n_pose = layout.free_pose_ids.len();
    let n_landmark = layout.landmark_ids.len();
    let dim = 6 * n_pose;

    // Damped landmark blocks and their inverses.
    let mut c_inv = Vec::with_capacity(n_landmark);
    for block in &eq.h_landmark {
        let damped = block + Matrix3::identity() * damping;
        c_inv.push(damped.cholesky()?.inverse());
    }

    let mut reduced = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for (slot, block) in eq.h_pose.iter().enumerate() {
        let damped = block + Matrix6::identity() * damping;
        reduced
            .view_mut((6 * slot, 6 * slot), (6, 6))
            .copy_from(&damped);
        rhs.fixed_view_mut::<6, 1>(6 * slot, 0)
            .copy_from(&eq.b_pose[slot]);
    }

    for lslot in 0..n_landmark {
        let links = &eq.cross[lslot];
        if links.is_empty() {
            continue;
        }
        let c_inv_b = c_inv[lslot] * eq.b_landmark[lslot];
        for &(pslot_i, ref block_i) in links {
            let rhs_update = block_i * c_inv_b;
            {
                let mut view = rhs.fixed_view_mut::<6, 1>(6 * pslot_i, 0);
                view -= rhs_update;
            }
            let left: Matrix6x3<f64> = block_i * c_inv[lslot];
            for &(pslot_j, ref block_j) in links {
                let update: Matrix6<f64> = left * block_j.transpose();
                let mut view = reduced.view_mut((6 * pslot_i, 6 * pslot_j), (6, 6));
                view -= update;
            }
        }
    }

    let delta_pose_flat = if dim > 0 {
        reduced.cholesky()?.solve(&rhs)
    } else {
        DVector::zeros(0)
    };

    let delta_pose: Vec<Vector6<f64>> = (0..n_pose)
        .map(|slot| {
            let v: SMatrix<f64, 6, 1> = delta_pose_flat.fixed_view::<6, 1>(6 * slot, 0).into();
            v
        })
        .collect();

    let delta_landmark: Vec<Vector3<f64>> = (0..n_landmark)
        .map(|lslot| {
            let mut rhs_l = eq.b_landmark[lslot];
            for &(pslot, ref block) in &eq.cross[lslot] {
                rhs_l -= block.transpose() * delta_pose[pslot];
            }
            c_inv[lslot] * rhs_l
        })
        .collect();

    Some((delta_pose, delta_landmark))
}
