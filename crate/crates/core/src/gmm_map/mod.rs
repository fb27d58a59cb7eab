//! The prior map: anisotropic Gaussian components, their spectral
//! decomposition, degeneracy classification, the Bhattacharyya neighbor
//! graph, likelihood queries and ASCII file I/O.

mod io;

pub use io::{load_map, save_map};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// A component is degenerate (planar) when `lambda_1 / lambda_2` falls below
/// this ratio. The scale-free ratio keeps the test unit-independent.
pub const DEGENERACY_RATIO: f64 = 0.01;

/// Eigenvalues are floored to this value (m^2) so degenerate components stay
/// numerically invertible for likelihood evaluation.
pub const EIGENVALUE_FLOOR: f64 = 1e-8;

/// Default neighbor count for the Bhattacharyya k-NN graph.
pub const DEFAULT_NEIGHBOR_COUNT: usize = 8;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("component {id}: covariance is not positive semi-definite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveSemiDefinite { id: usize, min_eigenvalue: f64 },
    #[error("component {id}: covariance is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { id: usize, asymmetry: f64 },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("component ids are not dense and ascending: expected {expected}, found {found}")]
    NonDenseIds { expected: usize, found: usize },
    #[error("component weights sum to {sum}, expected 1 within 1e-6")]
    WeightSum { sum: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One mixture component with its cached spectral factorization.
#[derive(Debug, Clone)]
pub struct GaussianComponent3D {
    pub id: usize,
    pub weight: f64,
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    /// Principal axes `[e1, e2, e1 x e2]` as columns; always right-handed.
    pub axes: Matrix3<f64>,
    /// Ascending eigenvalues, floored at [`EIGENVALUE_FLOOR`].
    pub singular_values: Vector3<f64>,
    pub is_degenerate: bool,
    pub neighbors: Vec<usize>,
    log_det: f64,
}

impl GaussianComponent3D {
    /// Build a component from raw parameters, decomposing, flooring and
    /// classifying the covariance.
    pub fn new(
        id: usize,
        weight: f64,
        mean: Vector3<f64>,
        covariance: Matrix3<f64>,
    ) -> Result<Self, MapError> {
        let asymmetry = max_asymmetry(&covariance);
        if asymmetry > 1e-9 {
            return Err(MapError::NotSymmetric { id, asymmetry });
        }
        let (axes, raw_values) = decompose_covariance(&covariance)
            .map_err(|min_eigenvalue| MapError::NotPositiveSemiDefinite { id, min_eigenvalue })?;
        let singular_values = raw_values.map(|v| v.max(EIGENVALUE_FLOOR));
        let covariance =
            axes * Matrix3::from_diagonal(&singular_values) * axes.transpose();
        let is_degenerate = detect_degeneracy(&singular_values);
        let log_det = singular_values.iter().map(|v| v.ln()).sum();
        Ok(Self {
            id,
            weight,
            mean,
            covariance,
            axes,
            singular_values,
            is_degenerate,
            neighbors: Vec::new(),
            log_det,
        })
    }

    /// Normal of the fitted plane for degenerate components: the axis of the
    /// smallest eigenvalue.
    pub fn normal(&self) -> Vector3<f64> {
        self.axes.column(0).into_owned()
    }

    pub fn log_det_covariance(&self) -> f64 {
        self.log_det
    }

    /// Squared Mahalanobis distance of `x` to the component.
    pub fn mahalanobis_squared(&self, x: &Vector3<f64>) -> f64 {
        let local = self.axes.transpose() * (x - self.mean);
        (0..3).map(|i| local[i] * local[i] / self.singular_values[i]).sum()
    }

    /// Exact log-density of the trivariate normal at `x`, including the
    /// normalization constant.
    pub fn log_likelihood(&self, x: &Vector3<f64>) -> f64 {
        const LOG_TWO_PI: f64 = 1.8378770664093453;
        -0.5 * (3.0 * LOG_TWO_PI + self.log_det + self.mahalanobis_squared(x))
    }
}

fn max_asymmetry(m: &Matrix3<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in (i + 1)..3 {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Spectral factorization `Sigma = R * diag(lambda) * R^T` with ascending
/// eigenvalues and `R` in SO(3) (third axis rebuilt as `e1 x e2`).
///
/// Returns `Err(min_eigenvalue)` when the matrix is indefinite beyond
/// roundoff.
pub fn decompose_covariance(
    covariance: &Matrix3<f64>,
) -> Result<(Matrix3<f64>, Vector3<f64>), f64> {
    let sym = (covariance + covariance.transpose()) * 0.5;
    let eigen = sym.symmetric_eigen();

    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eigen.eigenvalues[a].partial_cmp(&eigen.eigenvalues[b]).unwrap());

    let values = Vector3::new(
        eigen.eigenvalues[order[0]],
        eigen.eigenvalues[order[1]],
        eigen.eigenvalues[order[2]],
    );
    if values[0] < -1e-12 {
        return Err(values[0]);
    }

    let e1 = eigen.eigenvectors.column(order[0]).into_owned();
    let e2 = eigen.eigenvectors.column(order[1]).into_owned();
    let e3 = e1.cross(&e2);
    let axes = Matrix3::from_columns(&[e1, e2, e3]);
    Ok((axes, values))
}

/// Planarity test on ascending eigenvalues: strictly
/// `lambda_1 / lambda_2 < 0.01`.
pub fn detect_degeneracy(values: &Vector3<f64>) -> bool {
    values[0] / values[1] < DEGENERACY_RATIO
}

/// Bhattacharyya distance between two components under the pooled covariance
/// `(Sigma_1 + Sigma_2) / 2`; symmetric, non-negative, zero iff identical.
pub fn bhattacharyya_distance(a: &GaussianComponent3D, b: &GaussianComponent3D) -> f64 {
    bhattacharyya_parts(
        &a.mean,
        &a.covariance,
        a.log_det_covariance(),
        &b.mean,
        &b.covariance,
        b.log_det_covariance(),
    )
}

pub(crate) fn bhattacharyya_parts(
    mean_a: &Vector3<f64>,
    cov_a: &Matrix3<f64>,
    log_det_a: f64,
    mean_b: &Vector3<f64>,
    cov_b: &Matrix3<f64>,
    log_det_b: f64,
) -> f64 {
    let pooled = (cov_a + cov_b) * 0.5;
    let chol = pooled
        .cholesky()
        .expect("pooled covariance must be SPD after flooring");
    let diff = mean_a - mean_b;
    let whitened = chol.l().solve_lower_triangular(&diff).unwrap();
    let mahalanobis_sq = whitened.norm_squared();
    let log_det_pooled = 2.0 * (0..3).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
    0.125 * mahalanobis_sq + 0.5 * (log_det_pooled - 0.5 * (log_det_a + log_det_b))
}

/// The full prior map.
#[derive(Debug, Clone, Default)]
pub struct GmmMap {
    pub components: Vec<GaussianComponent3D>,
    pub metadata: Vec<(String, String)>,
}

impl GmmMap {
    pub fn new(components: Vec<GaussianComponent3D>) -> Result<Self, MapError> {
        for (expected, component) in components.iter().enumerate() {
            if component.id != expected {
                return Err(MapError::NonDenseIds {
                    expected,
                    found: component.id,
                });
            }
        }
        if !components.is_empty() {
            let sum: f64 = components.iter().map(|c| c.weight).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(MapError::WeightSum { sum });
            }
        }
        Ok(Self {
            components,
            metadata: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn component(&self, id: usize) -> &GaussianComponent3D {
        &self.components[id]
    }

    pub fn degenerate_fraction(&self) -> f64 {
        if self.components.is_empty() {
            return 0.0;
        }
        self.components.iter().filter(|c| c.is_degenerate).count() as f64
            / self.components.len() as f64
    }

    /// Store the `k` nearest components (by Bhattacharyya distance) on every
    /// component. Directed relation; `k` is clamped to `len - 1`.
    pub fn build_neighbor_graph(&mut self, k: usize) {
        let n = self.components.len();
        let k = k.min(n.saturating_sub(1));
        let neighbor_lists: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut distances: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        (
                            bhattacharyya_distance(&self.components[i], &self.components[j]),
                            j,
                        )
                    })
                    .collect();
                distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
                distances.truncate(k);
                distances.into_iter().map(|(_, j)| j).collect()
            })
            .collect();
        for (component, neighbors) in self.components.iter_mut().zip(neighbor_lists) {
            component.neighbors = neighbors;
        }
    }
}
