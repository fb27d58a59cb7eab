use std::time::Instant;

use gmmloc::evaluation::{ate_rmse, reconstruction_rmse, Alignment, DEFAULT_THRESHOLDS};
use gmmloc::geometry::CameraIntrinsics;
use gmmloc::pipeline::{run_localization, PipelineConfig};
use gmmloc::simulator::{generate_scene, generate_sequence, SceneSpec, SequenceSpec};
use gmmloc::trajectory::TrajectoryEntry;

fn main() {
    let t0 = Instant::now();
    let intr = CameraIntrinsics::new(460.0, 460.0, 320.0, 240.0, 640, 480);
    let scene = generate_scene(&SceneSpec::default()).unwrap();
    println!(
        "scene: {} pts, {} comps, degenerate {:.2}, fit {:?} iters {} ({:.1?})",
        scene.gt_cloud.len(),
        scene.gmm.len(),
        scene.gmm.degenerate_fraction(),
        scene.fit_report.converged,
        scene.fit_report.iterations,
        t0.elapsed()
    );
    let seq = generate_sequence(&scene, &SequenceSpec::default(), &intr);
    println!("warnings: {}", seq.warnings.len());

    let gt: Vec<TrajectoryEntry> = seq
        .gt_poses
        .iter()
        .zip(&seq.timestamps)
        .map(|(&pose, &timestamp)| TrajectoryEntry { timestamp, pose })
        .collect();
    let odom: Vec<TrajectoryEntry> = seq
        .noisy_poses
        .iter()
        .zip(&seq.timestamps)
        .map(|(&pose, &timestamp)| TrajectoryEntry { timestamp, pose })
        .collect();
    let odom_ate = ate_rmse(&odom, &gt, Alignment::None).unwrap().ate_rmse;

    for (name, enabled) in [("structure", true), ("disabled ", false)] {
        let t1 = Instant::now();
        let cfg = PipelineConfig { structure_enabled: enabled, ..PipelineConfig::default() };
        let result = run_localization(
            scene.gmm.clone(), &intr, &seq.timestamps, &seq.noisy_poses, &seq.observations, cfg,
        );
        let ate = ate_rmse(&result.estimate, &gt, Alignment::None).unwrap().ate_rmse;
        let ate_al = ate_rmse(&result.estimate, &gt, Alignment::Rigid).unwrap().ate_rmse;
        let lms: Vec<_> = result.landmark_estimates.iter().map(|&(_, p)| p).collect();
        let rec = reconstruction_rmse(&lms, &scene.gt_cloud, &DEFAULT_THRESHOLDS).unwrap();
        println!(
            "{name}: ATE {ate:.4} (aligned {ate_al:.4}), rec RMSE {:.4} ({} lms), {:.1?}",
            rec.rmse,
            lms.len(),
            t1.elapsed()
        );
    }
    println!("odometry ATE {odom_ate:.4}");
    println!("total {:.1?}", t0.elapsed());
}
