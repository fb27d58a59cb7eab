//! Ground-truthed synthetic worlds: planar room scenes, camera trajectories,
//! drifting odometry and noisy pixel observations. Stands in for a real
//! image frontend so the full pipeline runs end-to-end at desk scale.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_point, se3_exp, CameraIntrinsics, ImagePoint, Pose};
use crate::gmm_map::{save_map, GmmMap, MapError};
use crate::map_builder::{fit_gmm_em, save_xyz, FitConfig, FitReport, MapBuilderError, PointCloud};
use crate::trajectory::{save_tum, TrajectoryEntry, TrajectoryError};

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("room dimensions must be positive, got {0:?}")]
    BadRoom((f64, f64, f64)),
    #[error("component count {components} exceeds sampled point count {points}")]
    TooFewPoints { components: usize, points: usize },
    #[error(transparent)]
    MapBuilder(#[from] MapBuilderError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("{path}: {message}")]
    SequenceFormat { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A finite rectangle: corner plus two edge vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rectangle {
    pub corner: Vector3<f64>,
    pub edge_u: Vector3<f64>,
    pub edge_v: Vector3<f64>,
}

impl Rectangle {
    pub fn area(&self) -> f64 {
        self.edge_u.cross(&self.edge_v).norm()
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.edge_u.cross(&self.edge_v).normalize()
    }

    pub fn point_at(&self, u: f64, v: f64) -> Vector3<f64> {
        self.corner + u * self.edge_u + v * self.edge_v
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Room extents in meters; the room spans `[0, x] x [0, y] x [0, z]`.
    pub room: (f64, f64, f64),
    /// Axis-aligned interior boxes as (min corner, size).
    pub boxes: Vec<(Vector3<f64>, Vector3<f64>)>,
    /// Surface sampling density (points per m^2).
    pub point_density: f64,
    /// Out-of-plane jitter of sampled points (m).
    pub jitter_sigma: f64,
    /// GMM component count.
    pub component_count: usize,
    /// Ground-truth landmarks sampled on the surfaces.
    pub landmark_count: usize,
    /// Out-of-surface offset of landmarks (m); zero keeps the prior-map
    /// assumption exact, nonzero studies model mismatch.
    pub landmark_offset_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room: (6.0, 4.0, 3.0),
            boxes: Vec::new(),
            point_density: 150.0,
            jitter_sigma: 0.002,
            component_count: 300,
            landmark_count: 600,
            landmark_offset_sigma: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub surfaces: Vec<Rectangle>,
    pub gmm: GmmMap,
    pub gt_cloud: PointCloud,
    pub gt_landmarks: Vec<Vector3<f64>>,
    pub fit_report: FitReport,
}

fn room_surfaces(lx: f64, ly: f64, lz: f64) -> Vec<Rectangle> {
    let x = Vector3::x() * lx;
    let y = Vector3::y() * ly;
    let z = Vector3::z() * lz;
    vec![
        // floor, ceiling
        Rectangle { corner: Vector3::zeros(), edge_u: x, edge_v: y },
        Rectangle { corner: Vector3::new(0.0, 0.0, lz), edge_u: x, edge_v: y },
        // walls y = 0, y = ly
        Rectangle { corner: Vector3::zeros(), edge_u: x, edge_v: z },
        Rectangle { corner: Vector3::new(0.0, ly, 0.0), edge_u: x, edge_v: z },
        // walls x = 0, x = lx
        Rectangle { corner: Vector3::zeros(), edge_u: y, edge_v: z },
        Rectangle { corner: Vector3::new(lx, 0.0, 0.0), edge_u: y, edge_v: z },
    ]
}

fn box_surfaces(min: &Vector3<f64>, size: &Vector3<f64>) -> Vec<Rectangle> {
    let x = Vector3::x() * size.x;
    let y = Vector3::y() * size.y;
    let z = Vector3::z() * size.z;
    vec![
        Rectangle { corner: *min, edge_u: x, edge_v: y },
        Rectangle { corner: min + z, edge_u: x, edge_v: y },
        Rectangle { corner: *min, edge_u: x, edge_v: z },
        Rectangle { corner: min + y, edge_u: x, edge_v: z },
        Rectangle { corner: *min, edge_u: y, edge_v: z },
        Rectangle { corner: min + x, edge_u: y, edge_v: z },
    ]
}

/// Build the surfaces, sample the cloud and the landmarks, fit the GMM.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene, SimulatorError> {
    let (lx, ly, lz) = spec.room;
    if lx <= 0.0 || ly <= 0.0 || lz <= 0.0 {
        return Err(SimulatorError::BadRoom(spec.room));
    }
    let mut surfaces = room_surfaces(lx, ly, lz);
    for (min, size) in &spec.boxes {
        surfaces.extend(box_surfaces(min, size));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, spec.jitter_sigma.max(1e-12)).unwrap();
    let uniform = rand::distr::Uniform::new(0.0f64, 1.0).unwrap();

    let mut points = Vec::new();
    for surface in &surfaces {
        let count = (spec.point_density * surface.area()).round() as usize;
        let normal = surface.normal();
        for _ in 0..count {
            let u = uniform.sample(&mut rng);
            let v = uniform.sample(&mut rng);
            let offset = if spec.jitter_sigma > 0.0 {
                jitter.sample(&mut rng)
            } else {
                0.0
            };
            points.push(surface.point_at(u, v) + normal * offset);
        }
    }
    if points.len() < spec.component_count {
        return Err(SimulatorError::TooFewPoints {
            components: spec.component_count,
            points: points.len(),
        });
    }
    let gt_cloud = PointCloud::new(points)?;

    // Landmarks on the surfaces, allocated proportionally to area.
    let total_area: f64 = surfaces.iter().map(Rectangle::area).sum();
    let landmark_noise = Normal::new(0.0, spec.landmark_offset_sigma.max(1e-12)).unwrap();
    let mut gt_landmarks = Vec::with_capacity(spec.landmark_count);
    'outer: loop {
        for surface in &surfaces {
            let share =
                (spec.landmark_count as f64 * surface.area() / total_area).ceil() as usize;
            for _ in 0..share {
                if gt_landmarks.len() >= spec.landmark_count {
                    break 'outer;
                }
                let u = uniform.sample(&mut rng);
                let v = uniform.sample(&mut rng);
                let offset = if spec.landmark_offset_sigma > 0.0 {
                    landmark_noise.sample(&mut rng)
                } else {
                    0.0
                };
                gt_landmarks.push(surface.point_at(u, v) + surface.normal() * offset);
            }
        }
    }

    let fit = FitConfig {
        component_count: spec.component_count,
        seed: spec.seed.wrapping_add(0x9e3779b97f4a7c15),
        ..FitConfig::default()
    };
    let (mut gmm, fit_report) = fit_gmm_em(&gt_cloud, &fit)?;
    gmm.build_neighbor_graph(crate::gmm_map::DEFAULT_NEIGHBOR_COUNT);
    gmm.metadata.push(("source".into(), "synthetic room scene".into()));
    gmm.metadata.push(("seed".into(), spec.seed.to_string()));

    Ok(SyntheticScene {
        surfaces,
        gmm,
        gt_cloud,
        gt_landmarks,
        fit_report,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TrajectoryKind {
    /// Circle about the room center at the given radius.
    Circle { radius: f64 },
    /// Figure-eight (lemniscate of Gerono) with the given half-width.
    Lemniscate { half_width: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub trajectory: TrajectoryKind,
    pub n_poses: usize,
    /// Camera height above the floor (m).
    pub height: f64,
    /// Pixel observation noise sigma (px).
    pub pixel_noise: f64,
    /// Per-step odometry translation noise sigma (m per axis).
    pub odom_sigma_trans: f64,
    /// Per-step odometry rotation noise sigma (degrees per axis).
    pub odom_sigma_rot_deg: f64,
    /// Landmarks beyond this camera-frame depth are not observed (m).
    pub max_range: f64,
    pub seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            trajectory: TrajectoryKind::Circle { radius: 1.5 },
            n_poses: 150,
            height: 1.5,
            pixel_noise: 1.0,
            odom_sigma_trans: 0.005,
            odom_sigma_rot_deg: 0.1,
            max_range: 20.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimSequence {
    pub timestamps: Vec<f64>,
    pub gt_poses: Vec<Pose>,
    /// Odometry: cumulative composition of the ground-truth relative motions,
    /// each perturbed by the per-step noise (random-walk drift).
    pub noisy_poses: Vec<Pose>,
    /// Per pose: (landmark_id, noisy pixel), ordered by landmark id.
    pub observations: Vec<Vec<(usize, ImagePoint)>>,
    pub warnings: Vec<String>,
}

/// World-to-camera pose of a camera at `center` looking at `target`, with the
/// image v axis pointing toward the floor (-z world).
pub fn look_at_pose(center: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let forward = (target - center).normalize();
    let mut right = forward.cross(&Vector3::z());
    if right.norm() < 1e-9 {
        right = Vector3::x();
    } else {
        right.normalize_mut();
    }
    let down = forward.cross(&right);
    let rot_wc = Matrix3::from_columns(&[right, down, forward]);
    let rotation = rot_wc.transpose();
    Pose::new(rotation, -(rotation * center))
}

/// Visibility shared with the observation model: positive depth, inside the
/// image, within range.
pub fn visible_in_frame(
    landmark: &Vector3<f64>,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    max_range: f64,
) -> Option<ImagePoint> {
    let p_cam = pose.transform(landmark);
    if p_cam.z > max_range {
        return None;
    }
    let (pixel, _) = project_point(&p_cam, intrinsics).ok()?;
    intrinsics.contains(&pixel).then_some(pixel)
}

pub fn generate_sequence(
    scene: &SyntheticScene,
    spec: &SequenceSpec,
    intrinsics: &CameraIntrinsics,
) -> SimSequence {
    let (lx, ly, lz) = scene_extents(scene);
    let center = Vector3::new(lx / 2.0, ly / 2.0, spec.height.min(lz - 0.1));
    let mut warnings = Vec::new();

    let gt_poses: Vec<Pose> = (0..spec.n_poses)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / spec.n_poses as f64;
            let position = match spec.trajectory {
                TrajectoryKind::Circle { radius } => {
                    center + Vector3::new(radius * t.cos(), radius * t.sin(), 0.0)
                }
                TrajectoryKind::Lemniscate { half_width } => {
                    center
                        + Vector3::new(
                            half_width * t.sin(),
                            half_width * t.sin() * t.cos(),
                            0.0,
                        )
                }
            };
            // Look across the room, through the center.
            look_at_pose(&position, &center)
        })
        .collect();

    for (idx, pose) in gt_poses.iter().enumerate() {
        let c = pose.camera_center();
        if c.x < 0.0 || c.x > lx || c.y < 0.0 || c.y > ly || c.z < 0.0 || c.z > lz {
            warnings.push(format!("pose {idx} outside the room: {c:?}"));
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let pixel_noise = Normal::new(0.0, spec.pixel_noise.max(1e-12)).unwrap();
    let observations: Vec<Vec<(usize, ImagePoint)>> = gt_poses
        .iter()
        .enumerate()
        .map(|(idx, pose)| {
            let mut per_pose = Vec::new();
            for (lm_id, landmark) in scene.gt_landmarks.iter().enumerate() {
                if let Some(mut pixel) =
                    visible_in_frame(landmark, pose, intrinsics, spec.max_range)
                {
                    if spec.pixel_noise > 0.0 {
                        pixel.u += pixel_noise.sample(&mut rng);
                        pixel.v += pixel_noise.sample(&mut rng);
                    }
                    per_pose.push((lm_id, pixel));
                }
            }
            if per_pose.len() < 8 {
                warnings.push(format!(
                    "pose {idx} is landmark-starved ({} visible)",
                    per_pose.len()
                ));
            }
            per_pose
        })
        .collect();

    let noisy_poses = if spec.odom_sigma_trans == 0.0 && spec.odom_sigma_rot_deg == 0.0 {
        gt_poses.clone()
    } else {
        let rot_noise = Normal::new(0.0, spec.odom_sigma_rot_deg.to_radians().max(1e-300)).unwrap();
        let trans_noise = Normal::new(0.0, spec.odom_sigma_trans.max(1e-300)).unwrap();
        let mut poses = Vec::with_capacity(spec.n_poses);
        if !gt_poses.is_empty() {
            poses.push(gt_poses[0]);
            for i in 1..gt_poses.len() {
                let relative = gt_poses[i].compose(&gt_poses[i - 1].inverse());
                let noise = Vector6::new(
                    rot_noise.sample(&mut rng),
                    rot_noise.sample(&mut rng),
                    rot_noise.sample(&mut rng),
                    trans_noise.sample(&mut rng),
                    trans_noise.sample(&mut rng),
                    trans_noise.sample(&mut rng),
                );
                let perturbed = relative.compose(&se3_exp(&noise));
                poses.push(perturbed.compose(&poses[i - 1]));
            }
        }
        poses
    };

    SimSequence {
        timestamps: (0..spec.n_poses).map(|i| i as f64 * 0.1).collect(),
        gt_poses,
        noisy_poses,
        observations,
        warnings,
    }
}

fn scene_extents(scene: &SyntheticScene) -> (f64, f64, f64) {
    let mut max = Vector3::zeros();
    for s in &scene.surfaces {
        for corner in [
            s.corner,
            s.corner + s.edge_u,
            s.corner + s.edge_v,
            s.corner + s.edge_u + s.edge_v,
        ] {
            max = max.sup(&corner);
        }
    }
    (max.x, max.y, max.z)
}

/// Write a sequence directory: `gt.tum`, `odom.tum`, `observations.csv`,
/// `scene.gmm`, `landmarks.csv`, plus `gt_cloud.xyz` for reconstruction
/// evaluation.
pub fn save_sequence(
    scene: &SyntheticScene,
    sequence: &SimSequence,
    dir: &Path,
) -> Result<(), SimulatorError> {
    fs::create_dir_all(dir)?;
    let entries = |poses: &[Pose]| -> Vec<TrajectoryEntry> {
        poses
            .iter()
            .zip(&sequence.timestamps)
            .map(|(&pose, &timestamp)| TrajectoryEntry { timestamp, pose })
            .collect()
    };
    save_tum(&entries(&sequence.gt_poses), &dir.join("gt.tum"))?;
    save_tum(&entries(&sequence.noisy_poses), &dir.join("odom.tum"))?;
    save_map(&scene.gmm, &dir.join("scene.gmm"))?;
    save_xyz(&scene.gt_cloud, &dir.join("gt_cloud.xyz"))?;

    let mut obs = String::from("pose_idx,landmark_id,u,v\n");
    for (pose_idx, per_pose) in sequence.observations.iter().enumerate() {
        for (lm_id, pixel) in per_pose {
            obs.push_str(&format!("{pose_idx},{lm_id},{:.9},{:.9}\n", pixel.u, pixel.v));
        }
    }
    fs::write(dir.join("observations.csv"), obs)?;

    let mut lms = String::from("landmark_id,x,y,z\n");
    for (id, lm) in scene.gt_landmarks.iter().enumerate() {
        lms.push_str(&format!("{id},{:.9},{:.9},{:.9}\n", lm.x, lm.y, lm.z));
    }
    fs::write(dir.join("landmarks.csv"), lms)?;
    Ok(())
}

/// The parts of a sequence directory the localization pipeline consumes.
#[derive(Debug)]
pub struct LoadedSequence {
    pub timestamps: Vec<f64>,
    pub odom_poses: Vec<Pose>,
    pub gt_poses: Option<Vec<Pose>>,
    pub observations: Vec<Vec<(usize, ImagePoint)>>,
    pub map: GmmMap,
    pub gt_landmarks: Vec<Vector3<f64>>,
}

pub fn load_sequence(dir: &Path) -> Result<LoadedSequence, SimulatorError> {
    let odom = crate::trajectory::load_tum(&dir.join("odom.tum"))?;
    let gt_path = dir.join("gt.tum");
    let gt = if gt_path.exists() {
        Some(crate::trajectory::load_tum(&gt_path)?)
    } else {
        None
    };
    let map = crate::gmm_map::load_map(&dir.join("scene.gmm"))?;

    let obs_path = dir.join("observations.csv");
    let text = fs::read_to_string(&obs_path)?;
    let mut observations: Vec<Vec<(usize, ImagePoint)>> = vec![Vec::new(); odom.len()];
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |message: &str| SimulatorError::SequenceFormat {
            path: obs_path.display().to_string(),
            message: format!("line {}: {message}", idx + 1),
        };
        if fields.len() != 4 {
            return Err(bad("expected pose_idx,landmark_id,u,v"));
        }
        let pose_idx: usize = fields[0].parse().map_err(|_| bad("bad pose_idx"))?;
        let lm_id: usize = fields[1].parse().map_err(|_| bad("bad landmark_id"))?;
        let u: f64 = fields[2].parse().map_err(|_| bad("bad u"))?;
        let v: f64 = fields[3].parse().map_err(|_| bad("bad v"))?;
        if pose_idx >= observations.len() {
            return Err(bad("pose_idx out of range"));
        }
        observations[pose_idx].push((lm_id, ImagePoint::new(u, v)));
    }

    let lm_path = dir.join("landmarks.csv");
    let mut gt_landmarks = Vec::new();
    if lm_path.exists() {
        let text = fs::read_to_string(&lm_path)?;
        for (idx, line) in text.lines().enumerate() {
            if idx == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(SimulatorError::SequenceFormat {
                    path: lm_path.display().to_string(),
                    message: format!("line {}: expected landmark_id,x,y,z", idx + 1),
                });
            }
            gt_landmarks.push(Vector3::new(
                fields[1].parse().unwrap_or(f64::NAN),
                fields[2].parse().unwrap_or(f64::NAN),
                fields[3].parse().unwrap_or(f64::NAN),
            ));
        }
    }

    Ok(LoadedSequence {
        timestamps: odom.iter().map(|e| e.timestamp).collect(),
        odom_poses: odom.iter().map(|e| e.pose).collect(),
        gt_poses: gt.map(|entries| entries.iter().map(|e| e.pose).collect()),
        observations,
        map,
        gt_landmarks,
    })
}
