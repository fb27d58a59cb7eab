//! Offline construction of a [`GmmMap`] from a raw point cloud by
//! expectation-maximization with anisotropic covariances.
//!
//! Initialization is k-means++ seeding followed by one hard-assignment pass;
//! responsibilities are computed in log-space; the E-step fans out over
//! fixed-size point chunks and reduces them in chunk order, so results are
//! bit-identical for a fixed seed regardless of worker count.

mod cloud_io;

pub use cloud_io::{load_point_cloud, load_ply, load_xyz, save_xyz};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::gmm_map::{GaussianComponent3D, GmmMap, MapError};

const CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum MapBuilderError {
    #[error("cloud has {points} points but {components} components were requested")]
    TooFewPoints { points: usize, components: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud contains non-finite coordinates at index {index}")]
    NonFinitePoint { index: usize },
    #[error("{path}:{line}: {message}")]
    CloudParse {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A raw point cloud in meters.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, MapBuilderError> {
        for (index, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(MapBuilderError::NonFinitePoint { index });
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FitConfig {
    pub component_count: usize,
    pub max_iterations: usize,
    /// Relative log-likelihood change below which EM stops.
    pub tolerance: f64,
    /// Minimum covariance eigenvalue (m^2).
    pub floor: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            component_count: 300,
            max_iterations: 200,
            tolerance: 1e-6,
            floor: crate::gmm_map::EIGENVALUE_FLOOR,
            seed: 0,
        }
    }
}

/// Per-run diagnostics; `log_likelihood` holds the mean per-point value after
/// each iteration.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeded_components: usize,
}

struct Component {
    weight: f64,
    mean: Vector3<f64>,
    covariance: Matrix3<f64>,
    // Derived per iteration.
    inv_covariance: Matrix3<f64>,
    log_norm: f64,
}

impl Component {
    fn refresh(&mut self, floor: f64) {
        let (axes, values) = crate::gmm_map::decompose_covariance(&self.covariance)
            .unwrap_or((Matrix3::identity(), Vector3::repeat(floor)));
        let values = values.map(|v| v.max(floor));
        self.covariance = axes * Matrix3::from_diagonal(&values) * axes.transpose();
        self.inv_covariance =
            axes * Matrix3::from_diagonal(&values.map(|v| 1.0 / v)) * axes.transpose();
        let log_det: f64 = values.iter().map(|v| v.ln()).sum();
        const LOG_TWO_PI: f64 = 1.8378770664093453;
        self.log_norm = -0.5 * (3.0 * LOG_TWO_PI + log_det);
    }

    fn log_density(&self, x: &Vector3<f64>) -> f64 {
        let d = x - self.mean;
        self.log_norm - 0.5 * (self.inv_covariance * d).dot(&d)
    }
}

/// Sufficient statistics of one E-step chunk.
#[derive(Clone)]
struct ChunkStats {
    mass: Vec<f64>,
    first: Vec<Vector3<f64>>,
    second: Vec<Matrix3<f64>>,
    log_likelihood: f64,
    // (lowest mixture log-likelihood, point index) for re-seeding.
    worst: (f64, usize),
}

/// Fit a `cfg.component_count`-component GMM to the cloud.
pub fn fit_gmm_em(
    cloud: &PointCloud,
    cfg: &FitConfig,
) -> Result<(GmmMap, FitReport), MapBuilderError> {
    let n = cloud.len();
    let k = cfg.component_count;
    if n == 0 {
        return Err(MapBuilderError::EmptyCloud);
    }
    if n < k || k == 0 {
        return Err(MapBuilderError::TooFewPoints {
            points: n,
            components: k,
        });
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut components = initialize(cloud, k, cfg.floor, &mut rng);

    let mut report = FitReport {
        log_likelihood: Vec::new(),
        iterations: 0,
        converged: false,
        reseeded_components: 0,
    };

    for iteration in 0..cfg.max_iterations {
        let stats = e_step(cloud, &components);
        let mean_ll = stats.log_likelihood / n as f64;

        if let Some(&previous) = report.log_likelihood.last() {
            debug_assert!(
                mean_ll >= previous - 1e-9 * previous.abs().max(1.0),
                "EM log-likelihood decreased: {previous} -> {mean_ll}"
            );
            if (mean_ll - previous).abs() <= cfg.tolerance * previous.abs().max(1.0) {
                report.log_likelihood.push(mean_ll);
                report.iterations = iteration + 1;
                report.converged = true;
                break;
            }
        }
        report.log_likelihood.push(mean_ll);
        report.iterations = iteration + 1;

        // M-step.
        for (idx, comp) in components.iter_mut().enumerate() {
            let mass = stats.mass[idx];
            if mass < 1e-12 {
                comp.mean = cloud.points[stats.worst.1];
                comp.covariance = Matrix3::identity() * (cfg.floor.max(1e-4));
                comp.weight = 1.0 / n as f64;
                report.reseeded_components += 1;
            } else {
                let mean = stats.first[idx] / mass;
                let cov = stats.second[idx] / mass - mean * mean.transpose();
                comp.mean = mean;
                comp.covariance = (cov + cov.transpose()) * 0.5;
                comp.weight = mass / n as f64;
            }
            comp.refresh(cfg.floor);
        }
        let weight_sum: f64 = components.iter().map(|c| c.weight).sum();
        for comp in &mut components {
            comp.weight /= weight_sum;
        }
    }

    let total_weight: f64 = components.iter().map(|c| c.weight).sum();
    let gaussians = components
        .iter()
        .enumerate()
        .map(|(id, c)| {
            GaussianComponent3D::new(id, c.weight / total_weight, c.mean, c.covariance)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let map = GmmMap::new(gaussians)?;
    Ok((map, report))
}

fn initialize(
    cloud: &PointCloud,
    k: usize,
    floor: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<Component> {
    let centers = kmeans_pp_seeds(cloud, k, rng);

    // One hard-assignment pass for initial means/covariances.
    let mut counts = vec![0usize; k];
    let mut sums = vec![Vector3::zeros(); k];
    let mut scatters = vec![Matrix3::zeros(); k];
    for p in &cloud.points {
        let mut best = (f64::INFINITY, 0usize);
        for (idx, c) in centers.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < best.0 {
                best = (d, idx);
            }
        }
        counts[best.1] += 1;
        sums[best.1] += p;
        scatters[best.1] += p * p.transpose();
    }

    let n = cloud.len() as f64;
    (0..k)
        .map(|idx| {
            let (mean, covariance, weight) = if counts[idx] == 0 {
                (centers[idx], Matrix3::identity() * floor.max(1e-4), 1.0 / n)
            } else {
                let c = counts[idx] as f64;
                let mean = sums[idx] / c;
                let cov = scatters[idx] / c - mean * mean.transpose();
                (mean, (cov + cov.transpose()) * 0.5, c / n)
            };
            let mut comp = Component {
                weight,
                mean,
                covariance,
                inv_covariance: Matrix3::zeros(),
                log_norm: 0.0,
            };
            comp.refresh(floor);
            comp
        })
        .collect()
}

fn kmeans_pp_seeds(cloud: &PointCloud, k: usize, rng: &mut ChaCha12Rng) -> Vec<Vector3<f64>> {
    let n = cloud.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(cloud.points[rng.random_range(0..n)]);
    let mut min_dist: Vec<f64> = cloud
        .points
        .iter()
        .map(|p| (p - centers[0]).norm_squared())
        .collect();

    while centers.len() < k {
        let total: f64 = min_dist.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a center; pick uniformly.
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (idx, d) in min_dist.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = idx;
                    break;
                }
            }
            chosen
        };
        let center = cloud.points[next];
        centers.push(center);
        for (d, p) in min_dist.iter_mut().zip(&cloud.points) {
            *d = d.min((p - center).norm_squared());
        }
    }
    centers
}

fn e_step(cloud: &PointCloud, components: &[Component]) -> ChunkStats {
    let log_weights: Vec<f64> = components.iter().map(|c| c.weight.ln()).collect();
    let chunk_stats: Vec<ChunkStats> = cloud
        .points
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(chunk_idx, chunk)| {
            let k = components.len();
            let mut stats = ChunkStats {
                mass: vec![0.0; k],
                first: vec![Vector3::zeros(); k],
                second: vec![Matrix3::zeros(); k],
                log_likelihood: 0.0,
                worst: (f64::INFINITY, 0),
            };
            let mut log_probs = vec![0.0f64; k];
            for (offset, point) in chunk.iter().enumerate() {
                let mut max_log = f64::NEG_INFINITY;
                for (idx, comp) in components.iter().enumerate() {
                    let lp = log_weights[idx] + comp.log_density(point);
                    log_probs[idx] = lp;
                    max_log = max_log.max(lp);
                }
                let sum_exp: f64 = log_probs.iter().map(|lp| (lp - max_log).exp()).sum();
                let lse = max_log + sum_exp.ln();
                stats.log_likelihood += lse;
                if lse < stats.worst.0 {
                    stats.worst = (lse, chunk_idx * CHUNK + offset);
                }
                for idx in 0..k {
                    let resp = (log_probs[idx] - lse).exp();
                    stats.mass[idx] += resp;
                    stats.first[idx] += resp * point;
                    stats.second[idx] += resp * (point * point.transpose());
                }
            }
            stats
        })
        .collect();

    // Ordered reduction keeps results independent of the worker count.
    let k = components.len();
    let mut total = ChunkStats {
        mass: vec![0.0; k],
        first: vec![Vector3::zeros(); k],
        second: vec![Matrix3::zeros(); k],
        log_likelihood: 0.0,
        worst: (f64::INFINITY, 0),
    };
    for stats in chunk_stats {
        for idx in 0..k {
            total.mass[idx] += stats.mass[idx];
            total.first[idx] += stats.first[idx];
            total.second[idx] += stats.second[idx];
        }
        total.log_likelihood += stats.log_likelihood;
        if stats.worst.0 < total.worst.0 {
            total.worst = stats.worst;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm_map::detect_degeneracy;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, Normal};

    fn gaussian_cloud(
        mean: Vector3<f64>,
        sigma: Vector3<f64>,
        count: usize,
        rng: &mut ChaCha12Rng,
    ) -> Vec<Vector3<f64>> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..count)
            .map(|_| {
                Vector3::new(
                    mean.x + sigma.x * normal.sample(rng),
                    mean.y + sigma.y * normal.sample(rng),
                    mean.z + sigma.z * normal.sample(rng),
                )
            })
            .collect()
    }

    #[test]
    fn single_component_matches_closed_form_m_step() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let points = gaussian_cloud(
            Vector3::new(1.0, -2.0, 0.5),
            Vector3::new(0.3, 0.5, 0.2),
            1000,
            &mut rng,
        );
        let cloud = PointCloud::new(points).unwrap();

        let n = cloud.len() as f64;
        let sample_mean: Vector3<f64> = cloud.points.iter().sum::<Vector3<f64>>() / n;
        let sample_cov: Matrix3<f64> = cloud
            .points
            .iter()
            .map(|p| (p - sample_mean) * (p - sample_mean).transpose())
            .sum::<Matrix3<f64>>()
            / n;

        let cfg = FitConfig {
            component_count: 1,
            seed: 3,
            ..FitConfig::default()
        };
        let (map, report) = fit_gmm_em(&cloud, &cfg).unwrap();
        let g = &map.components[0];

        // Standard error of the mean is sigma / sqrt(n).
        for axis in 0..3 {
            let se = sample_cov[(axis, axis)].sqrt() / n.sqrt();
            assert!((g.mean[axis] - sample_mean[axis]).abs() < 3.0 * se);
        }
        assert_relative_eq!(g.mean, sample_mean, epsilon = 1e-9);
        assert_relative_eq!(g.covariance, sample_cov, epsilon = 1e-9);
        assert_relative_eq!(g.weight, 1.0, epsilon = 1e-12);
        assert!(report.iterations >= 1);
    }

    #[test]
    fn two_separated_clusters_are_recovered() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut points = gaussian_cloud(
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::repeat(1.0),
            600,
            &mut rng,
        );
        points.extend(gaussian_cloud(
            Vector3::new(10.0, 0.0, 0.0),
            Vector3::repeat(1.0),
            600,
            &mut rng,
        ));
        let cloud = PointCloud::new(points).unwrap();
        let cfg = FitConfig {
            component_count: 2,
            seed: 7,
            ..FitConfig::default()
        };
        let (map, _) = fit_gmm_em(&cloud, &cfg).unwrap();
        let mut means: Vec<Vector3<f64>> = map.components.iter().map(|c| c.mean).collect();
        means.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap());
        assert!((means[0] - Vector3::new(0.0, 0.0, 0.0)).norm() < 0.2);
        assert!((means[1] - Vector3::new(10.0, 0.0, 0.0)).norm() < 0.2);
    }

    #[test]
    fn thin_plane_is_classified_degenerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let points: Vec<Vector3<f64>> = {
            let normal = Normal::new(0.0, 1e-3).unwrap();
            (0..2000)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        normal.sample(&mut rng),
                    )
                })
                .collect()
        };
        let cloud = PointCloud::new(points).unwrap();
        let cfg = FitConfig {
            component_count: 1,
            seed: 11,
            ..FitConfig::default()
        };
        let (map, _) = fit_gmm_em(&cloud, &cfg).unwrap();
        let g = &map.components[0];
        assert!(g.is_degenerate);
        assert!(detect_degeneracy(&g.singular_values));
    }

    #[test]
    fn log_likelihood_is_monotone_and_fit_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut points = gaussian_cloud(
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.5, 0.1, 0.4),
            800,
            &mut rng,
        );
        points.extend(gaussian_cloud(
            Vector3::new(2.0, 1.0, -1.0),
            Vector3::new(0.2, 0.4, 0.1),
            800,
            &mut rng,
        ));
        let cloud = PointCloud::new(points).unwrap();
        let cfg = FitConfig {
            component_count: 5,
            seed: 19,
            ..FitConfig::default()
        };

        let (map_a, report) = fit_gmm_em(&cloud, &cfg).unwrap();
        for pair in report.log_likelihood.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-9 * pair[0].abs().max(1.0),
                "log-likelihood decreased: {} -> {}",
                pair[0],
                pair[1]
            );
        }

        let (map_b, _) = fit_gmm_em(&cloud, &cfg).unwrap();
        for (a, b) in map_a.components.iter().zip(&map_b.components) {
            assert_eq!(a.mean, b.mean);
            assert_eq!(a.covariance, b.covariance);
            assert_eq!(a.weight, b.weight);
        }

        let weight_sum: f64 = map_a.components.iter().map(|c| c.weight).sum();
        assert_relative_eq!(weight_sum, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn too_many_components_is_an_error() {
        let cloud = PointCloud::new(vec![Vector3::zeros(), Vector3::x()]).unwrap();
        let cfg = FitConfig {
            component_count: 5,
            ..FitConfig::default()
        };
        assert!(matches!(
            fit_gmm_em(&cloud, &cfg),
            Err(MapBuilderError::TooFewPoints { .. })
        ));
    }
}
