//! TUM trajectory format: `timestamp tx ty tz qx qy qz qw`, one pose per
//! line, storing the camera-to-world transform (camera position plus
//! orientation quaternion).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A timestamped world-to-camera pose.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub pose: Pose,
}

pub fn save_tum(entries: &[TrajectoryEntry], path: &Path) -> Result<(), TrajectoryError> {
    let mut out = BufWriter::new(File::create(path)?);
    for entry in entries {
        let center = entry.pose.camera_center();
        let rot_wc = Rotation3::from_matrix_unchecked(entry.pose.rotation.transpose());
        let q = UnitQuaternion::from_rotation_matrix(&rot_wc);
        writeln!(
            out,
            "{:.6} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12}",
            entry.timestamp, center.x, center.y, center.z, q.i, q.j, q.k, q.w
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_tum(path: &Path) -> Result<Vec<TrajectoryEntry>, TrajectoryError> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = trimmed
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| TrajectoryError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        if fields.len() != 8 {
            return Err(TrajectoryError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let center = Vector3::new(fields[1], fields[2], fields[3]);
        let q = UnitQuaternion::from_quaternion(Quaternion::new(
            fields[7], fields[4], fields[5], fields[6],
        ));
        let rot_wc: Matrix3<f64> = *q.to_rotation_matrix().matrix();
        let rotation = rot_wc.transpose();
        entries.push(TrajectoryEntry {
            timestamp: fields[0],
            pose: Pose::new(rotation, -(rotation * center)),
        });
    }
    Ok(entries)
}
