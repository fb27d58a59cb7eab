//! The sigma_str study: run the full pipeline repeatedly per coupling value
//! (plus a structure-disabled baseline) and tabulate the trajectory error.

use serde::{Deserialize, Serialize};

use super::{ate_rmse, Alignment};
use crate::geometry::CameraIntrinsics;
use crate::pipeline::{run_localization, PipelineConfig};
use crate::simulator::{generate_scene, generate_sequence, SceneSpec, SequenceSpec, SimulatorError};
use crate::trajectory::TrajectoryEntry;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepScenario {
    pub scene: SceneSpec,
    pub sequence: SequenceSpec,
    pub intrinsics: CameraIntrinsics,
    pub pipeline: PipelineConfig,
}

/// One row of the sweep table. `sigma_str` is `None` for the
/// structure-disabled baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma_str: Option<f64>,
    pub mean_ate: f64,
    pub variance: f64,
    pub runs: Vec<f64>,
    pub failed_runs: usize,
    /// Set when fewer than two runs back the variance.
    pub degenerate_statistics: bool,
}

/// Run `runs` seeded pipeline executions per sigma_str value (sharing one
/// scene, varying the sequence seed) and aggregate the unaligned ATE. A
/// structure-disabled baseline row is appended last.
pub fn sigma_sweep(
    scenario: &SweepScenario,
    sigma_values: &[f64],
    runs: usize,
) -> Result<Vec<SweepRow>, SimulatorError> {
    let scene = generate_scene(&scenario.scene)?;

    let run_once = |sigma_str: Option<f64>, run_idx: usize| -> Option<f64> {
        let mut seq_spec = scenario.sequence.clone();
        seq_spec.seed = scenario.sequence.seed.wrapping_add(run_idx as u64);
        let sequence = generate_sequence(&scene, &seq_spec, &scenario.intrinsics);

        let mut config = scenario.pipeline.clone();
        match sigma_str {
            Some(value) => {
                config.structure_enabled = true;
                config.association.sigma_str = value;
            }
            None => config.structure_enabled = false,
        }
        let result = run_localization(
            scene.gmm.clone(),
            &scenario.intrinsics,
            &sequence.timestamps,
            &sequence.noisy_poses,
            &sequence.observations,
            config,
        );
        let gt: Vec<TrajectoryEntry> = sequence
            .gt_poses
            .iter()
            .zip(&sequence.timestamps)
            .map(|(&pose, &timestamp)| TrajectoryEntry { timestamp, pose })
            .collect();
        ate_rmse(&result.estimate, &gt, Alignment::None)
            .ok()
            .map(|r| r.ate_rmse)
            .filter(|ate| ate.is_finite())
    };

    let mut rows = Vec::with_capacity(sigma_values.len() + 1);
    let mut sweep_points: Vec<Option<f64>> = sigma_values.iter().copied().map(Some).collect();
    sweep_points.push(None);
    for sigma_str in sweep_points {
        let mut ates = Vec::with_capacity(runs);
        let mut failed = 0;
        for run_idx in 0..runs {
            match run_once(sigma_str, run_idx) {
                Some(ate) => ates.push(ate),
                None => failed += 1,
            }
        }
        let n = ates.len().max(1) as f64;
        let mean = ates.iter().sum::<f64>() / n;
        let variance = if ates.len() >= 2 {
            ates.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        rows.push(SweepRow {
            sigma_str,
            mean_ate: mean,
            variance,
            runs: ates,
            failed_runs: failed,
            degenerate_statistics: runs < 2,
        });
    }
    Ok(rows)
}
