//! Projection of 3-D map components into the image plane and the visibility
//! filters that turn the raw projection into a photorealistic set of 2-D
//! components.
//!
//! A component is pushed through the camera by transforming its density
//! (`R Sigma R^T`) and linearizing the pinhole projection at the transformed
//! mean. Four filters then apply, in order: frustum, view angle (degenerate
//! components only), representativeness, and occlusion.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::geometry::{project_point, CameraIntrinsics, ImagePoint, Pose};
use crate::gmm_map::GmmMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    Frustum,
    ViewAngle,
    Representativeness,
    Occluded,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::Frustum => "frustum",
            RejectReason::ViewAngle => "view_angle",
            RejectReason::Representativeness => "representativeness",
            RejectReason::Occluded => "occluded",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionConfig {
    /// View-angle threshold in degrees; a degenerate component survives when
    /// the angle between the viewing ray and its normal is at most this.
    pub delta_theta_deg: f64,
    /// Representativeness threshold in px^2 on the larger 2-D eigenvalue.
    pub delta_lambda_px2: f64,
    /// Frustum margin in units of the component's largest 2-D sigma.
    pub frustum_margin_sigmas: f64,
    /// Use the sign-sensitive view-angle inequality exactly as written
    /// instead of the absolute-value form (a plane in a point-cloud-derived
    /// map is visible from both sides).
    pub signed_view_angle: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            delta_theta_deg: 80.0,
            delta_lambda_px2: 1.0,
            frustum_margin_sigmas: 3.0,
            signed_view_angle: false,
        }
    }
}

/// A 3-D component pushed through a camera.
#[derive(Debug, Clone)]
pub struct ProjectedComponent2D {
    pub source_id: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// z of the transformed mean (m).
    pub depth: f64,
    /// Columns `[e_small, e_large]`, det +1.
    pub axes2d: Matrix2<f64>,
    /// Ascending 2-D eigenvalues (px^2).
    pub singular_values2d: Vector2<f64>,
    inv_cov2d: Matrix2<f64>,
    log_det2d: f64,
}

impl ProjectedComponent2D {
    /// Squared Mahalanobis distance of a pixel to the projected component.
    pub fn mahalanobis_squared(&self, pixel: &ImagePoint) -> f64 {
        let d = Vector2::new(pixel.u - self.mean2d.x, pixel.v - self.mean2d.y);
        (self.inv_cov2d * d).dot(&d)
    }

    fn log_det(&self) -> f64 {
        self.log_det2d
    }
}

/// 2-D Bhattacharyya distance between two projected components.
pub fn bhattacharyya_distance_2d(a: &ProjectedComponent2D, b: &ProjectedComponent2D) -> f64 {
    let pooled = (a.cov2d + b.cov2d) * 0.5;
    let det = pooled[(0, 0)] * pooled[(1, 1)] - pooled[(0, 1)] * pooled[(1, 0)];
    let diff = a.mean2d - b.mean2d;
    let quad = (pooled[(1, 1)] * diff.x * diff.x - 2.0 * pooled[(0, 1)] * diff.x * diff.y
        + pooled[(0, 0)] * diff.y * diff.y)
        / det;
    0.125 * quad + 0.5 * (det.ln() - 0.5 * (a.log_det() + b.log_det()))
}

/// Project one component (Eq. of the transformed density plus first-order
/// propagation through the pinhole model). Fails only for non-positive depth.
pub fn project_component(
    component: &crate::gmm_map::GaussianComponent3D,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
) -> Result<ProjectedComponent2D, RejectReason> {
    let mean_cam = pose.transform(&component.mean);
    let (pixel, jac) = project_point(&mean_cam, intrinsics).map_err(|_| RejectReason::Frustum)?;
    let cov_cam = pose.rotation * component.covariance * pose.rotation.transpose();
    let cov2d = jac * cov_cam * jac.transpose();
    let cov2d = (cov2d + cov2d.transpose()) * 0.5;

    let (axes2d, singular_values2d) = eigen_2x2(&cov2d);
    let inv_cov2d = invert_spd_2x2(&cov2d);
    let log_det2d = singular_values2d.x.ln() + singular_values2d.y.ln();
    Ok(ProjectedComponent2D {
        source_id: component.id,
        mean2d: Vector2::new(pixel.u, pixel.v),
        cov2d,
        depth: mean_cam.z,
        axes2d,
        singular_values2d,
        inv_cov2d,
        log_det2d,
    })
}

/// Closed-form eigendecomposition of a symmetric 2x2 matrix; returns
/// (axes with det +1, ascending eigenvalues).
fn eigen_2x2(m: &Matrix2<f64>) -> (Matrix2<f64>, Vector2<f64>) {
    let a = m[(0, 0)];
    let b = m[(0, 1)];
    let c = m[(1, 1)];
    let mid = 0.5 * (a + c);
    let radius = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let angle = 0.5 * (2.0 * b).atan2(a - c);
    let e_large = Vector2::new(angle.cos(), angle.sin());
    let e_small = Vector2::new(angle.sin(), -angle.cos());
    (
        Matrix2::from_columns(&[e_small, e_large]),
        Vector2::new(mid - radius, mid + radius),
    )
}

fn invert_spd_2x2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det
}

/// Apply the four visibility filters in order. Returns the survivors (input
/// order preserved) and the rejected ids with reasons.
pub fn filter_components(
    projected: Vec<ProjectedComponent2D>,
    pose: &Pose,
    map: &GmmMap,
    intrinsics: &CameraIntrinsics,
    config: &ProjectionConfig,
) -> (Vec<ProjectedComponent2D>, Vec<(usize, RejectReason)>) {
    let mut rejected = Vec::new();
    let camera_center = pose.camera_center();
    let cos_threshold = config.delta_theta_deg.to_radians().cos();

    let mut survivors: Vec<ProjectedComponent2D> = Vec::with_capacity(projected.len());
    for proj in projected {
        if proj.depth <= 0.0 {
            rejected.push((proj.source_id, RejectReason::Frustum));
            continue;
        }
        let margin = config.frustum_margin_sigmas * proj.singular_values2d.y.max(0.0).sqrt();
        let inside = proj.mean2d.x >= -margin
            && proj.mean2d.x < intrinsics.width as f64 + margin
            && proj.mean2d.y >= -margin
            && proj.mean2d.y < intrinsics.height as f64 + margin;
        if !inside {
            rejected.push((proj.source_id, RejectReason::Frustum));
            continue;
        }

        let source = map.component(proj.source_id);
        if source.is_degenerate {
            let ray = camera_center - source.mean;
            let cos_angle = ray.dot(&source.normal()) / ray.norm();
            let observable = if config.signed_view_angle {
                cos_angle >= cos_threshold
            } else {
                cos_angle.abs() >= cos_threshold
            };
            if !observable {
                rejected.push((proj.source_id, RejectReason::ViewAngle));
                continue;
            }
        }

        if proj.singular_values2d.y < config.delta_lambda_px2 {
            rejected.push((proj.source_id, RejectReason::Representativeness));
            continue;
        }

        survivors.push(proj);
    }

    // Occlusion: each component is checked against its single nearest 2-D
    // neighbor; marks are computed over the whole set, then removed together.
    // Iterated to a fixed point so filtering is idempotent.
    loop {
        let occluded = occlusion_marks(&survivors);
        if occluded.is_empty() {
            break;
        }
        let mut keep = Vec::with_capacity(survivors.len() - occluded.len());
        for (idx, proj) in survivors.into_iter().enumerate() {
            if occluded.contains(&idx) {
                rejected.push((proj.source_id, RejectReason::Occluded));
            } else {
                keep.push(proj);
            }
        }
        survivors = keep;
    }

    (survivors, rejected)
}

/// Indices of components occluded by their nearest 2-D neighbor.
fn occlusion_marks(components: &[ProjectedComponent2D]) -> Vec<usize> {
    let n = components.len();
    if n < 2 {
        return Vec::new();
    }
    let finder = NearestFinder::build(components);
    let mut marks = Vec::new();
    for (idx, current) in components.iter().enumerate() {
        let neighbor = &components[finder.nearest(components, idx)];
        if neighbor.depth < current.depth
            && mutual_two_sigma_overlap(current, neighbor)
        {
            marks.push(idx);
        }
    }
    marks
}

fn mutual_two_sigma_overlap(a: &ProjectedComponent2D, b: &ProjectedComponent2D) -> bool {
    let pa = ImagePoint::new(a.mean2d.x, a.mean2d.y);
    let pb = ImagePoint::new(b.mean2d.x, b.mean2d.y);
    a.mahalanobis_squared(&pb) <= 4.0 && b.mahalanobis_squared(&pa) <= 4.0
}

/// Exact nearest-neighbor queries under the 2-D Bhattacharyya distance.
///
/// Candidates are pruned through a uniform grid over the 2-D means: the
/// distance is bounded below by `|mean_i - mean_j|^2 / (8 lambda_max)` (the
/// log-determinant term is non-negative by the Minkowski determinant
/// inequality), so a ring search can stop once that bound exceeds the best
/// candidate.
struct NearestFinder {
    grid: std::collections::HashMap<(i64, i64), Vec<usize>>,
    cell: f64,
    lambda_max: f64,
    brute_force: bool,
}

impl NearestFinder {
    fn build(components: &[ProjectedComponent2D]) -> Self {
        let brute_force = components.len() <= 256;
        let lambda_max = components
            .iter()
            .map(|c| c.singular_values2d.y)
            .fold(1e-12, f64::max);
        let cell = 32.0;
        let mut grid: std::collections::HashMap<(i64, i64), Vec<usize>> =
            std::collections::HashMap::new();
        if !brute_force {
            for (idx, c) in components.iter().enumerate() {
                grid.entry(Self::key(cell, &c.mean2d)).or_default().push(idx);
            }
        }
        Self {
            grid,
            cell,
            lambda_max,
            brute_force,
        }
    }

    fn key(cell: f64, mean: &Vector2<f64>) -> (i64, i64) {
        ((mean.x / cell).floor() as i64, (mean.y / cell).floor() as i64)
    }

    fn nearest(&self, components: &[ProjectedComponent2D], query: usize) -> usize {
        if self.brute_force {
            return self.nearest_brute(components, query);
        }
        let q = &components[query];
        let center = Self::key(self.cell, &q.mean2d);
        let mut best = (f64::INFINITY, usize::MAX);
        let mut ring = 0i64;
        loop {
            let mut any_cell = false;
            for (dx, dy) in ring_offsets(ring) {
                let Some(bucket) = self.grid.get(&(center.0 + dx, center.1 + dy)) else {
                    continue;
                };
                any_cell = true;
                for &idx in bucket {
                    if idx == query {
                        continue;
                    }
                    let dist = bhattacharyya_distance_2d(q, &components[idx]);
                    if dist < best.0 || (dist == best.0 && idx < best.1) {
                        best = (dist, idx);
                    }
                }
            }
            // Any mean in ring r+1 is at least r*cell away.
            let min_mean_dist = (ring as f64) * self.cell;
            let lower_bound = min_mean_dist * min_mean_dist / (8.0 * self.lambda_max);
            ring += 1;
            if best.1 != usize::MAX && lower_bound > best.0 {
                break;
            }
            // Ran past every occupied cell.
            if !any_cell && ring as f64 * self.cell > 1e7 {
                break;
            }
            if ring > 100_000 {
                break;
            }
        }
        if best.1 == usize::MAX {
            return self.nearest_brute(components, query);
        }
        best.1
    }

    fn nearest_brute(&self, components: &[ProjectedComponent2D], query: usize) -> usize {
        let q = &components[query];
        let mut best = (f64::INFINITY, usize::MAX);
        for (idx, other) in components.iter().enumerate() {
            if idx == query {
                continue;
            }
            let dist = bhattacharyya_distance_2d(q, other);
            if dist < best.0 || (dist == best.0 && idx < best.1) {
                best = (dist, idx);
            }
        }
        best.1
    }
}

fn ring_offsets(ring: i64) -> Vec<(i64, i64)> {
    if ring == 0 {
        return vec![(0, 0)];
    }
    let mut offsets = Vec::with_capacity((8 * ring) as usize);
    for dx in -ring..=ring {
        offsets.push((dx, -ring));
        offsets.push((dx, ring));
    }
    for dy in (-ring + 1)..ring {
        offsets.push((-ring, dy));
        offsets.push((ring, dy));
    }
    offsets
}

/// Per-component record of the full projection pipeline, for diagnostics and
/// the `project` CSV output.
#[derive(Debug, Clone)]
pub struct ProjectionRecord {
    pub source_id: usize,
    /// `None` when the component never produced a 2-D density (behind camera).
    pub projected: Option<ProjectedComponent2D>,
    /// `None` when visible.
    pub reject_reason: Option<RejectReason>,
}

/// Full pipeline: project every component, filter, sort survivors by
/// ascending depth. Deterministic.
pub fn project_map(
    map: &GmmMap,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    config: &ProjectionConfig,
) -> Vec<ProjectedComponent2D> {
    let mut projected = Vec::with_capacity(map.len());
    for component in &map.components {
        if let Ok(proj) = project_component(component, pose, intrinsics) {
            projected.push(proj);
        }
    }
    let (mut visible, _) = filter_components(projected, pose, map, intrinsics, config);
    visible.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.source_id.cmp(&b.source_id))
    });
    visible
}

/// Like [`project_map`] but keeps every component with its outcome.
pub fn project_map_records(
    map: &GmmMap,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    config: &ProjectionConfig,
) -> Vec<ProjectionRecord> {
    let mut records: Vec<ProjectionRecord> = Vec::with_capacity(map.len());
    let mut projected = Vec::with_capacity(map.len());
    for component in &map.components {
        match project_component(component, pose, intrinsics) {
            Ok(proj) => {
                projected.push(proj.clone());
                records.push(ProjectionRecord {
                    source_id: component.id,
                    projected: Some(proj),
                    reject_reason: None,
                });
            }
            Err(reason) => records.push(ProjectionRecord {
                source_id: component.id,
                projected: None,
                reject_reason: Some(reason),
            }),
        }
    }
    let (_, rejected) = filter_components(projected, pose, map, intrinsics, config);
    for (source_id, reason) in rejected {
        records[source_id].reject_reason = Some(reason);
    }
    records
}
