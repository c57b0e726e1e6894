use std::path::PathBuf;

use nalgebra::{Vector2, Vector3};

use alm_core::config::ConfigFile;
use alm_core::detect::DetectConfig;
use alm_core::pipeline::{compute_metrics, run_free_running, run_pipeline, GroundTruth, PipelineConfig, ReplayOptions};
use alm_core::pose::{ippe_pose, refine_pose, Correspondence};
use alm_core::sim::{simulate_blink_events, synth_ground_truth, AlmConfig, SimMarker, SimScene, Trajectory};
use alm_core::{pose_error, CameraIntrinsics, CameraIntrinsics32, Transform, Transform32};

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn ground_truth(scene: &SimScene) -> GroundTruth {
    scene
        .markers
        .iter()
        .enumerate()
        .map(|(i, m)| (m.id.clone(), synth_ground_truth(scene, i, 100).unwrap()))
        .collect()
}

#[test]
fn sample_configs_track_to_millimetres() {
    for name in ["single_alm.toml", "board.toml"] {
        let file = ConfigFile::load(config_path(name)).unwrap();
        let mut scene = file.to_scene().unwrap();
        scene.duration_us = 100_000;
        let events = simulate_blink_events(&scene, scene.duration_us).unwrap();
        let log = run_pipeline(&file.to_pipeline().unwrap(), &events).unwrap();
        let rep = compute_metrics(&log, &ground_truth(&scene)).unwrap();
        assert!(rep.samples.len() > 300, "{name}: {} records", rep.samples.len());
        assert_eq!(rep.lost_records, 0, "{name}");
        assert!(rep.translation.mean < 5e-3, "{name}: {:?}", rep.translation);
    }
}

#[test]
fn free_running_agrees_with_stepped() {
    let k = CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0, 1280, 720).unwrap();
    let pose = Transform::from_axis_angle(&Vector3::y(), 0.3, Vector3::new(0.1, -0.05, 1.2));
    let alm = AlmConfig::square_eight("alm", 0.09, [50, 52, 54, 56, 58, 60, 62, 64]);
    let mut scene = SimScene::new(k, vec![SimMarker::single(alm, Trajectory::constant(pose))], 60_000);
    scene.blob_radius_px = 2.0;
    let events = simulate_blink_events(&scene, scene.duration_us).unwrap();
    let mut cfg = PipelineConfig::from_scene(&scene);
    cfg.detect = DetectConfig::with_f_min(5000.0);
    cfg.detect.window_us = 1000;

    let gt = ground_truth(&scene);
    let stepped = compute_metrics(&run_pipeline(&cfg, &events).unwrap(), &gt).unwrap();
    let free_log = run_free_running(&cfg, &events, ReplayOptions::default()).unwrap();
    assert!(free_log.records.windows(2).all(|w| w[0].t_us <= w[1].t_us));
    let free = compute_metrics(&free_log, &gt).unwrap();
    assert!(!free.samples.is_empty());
    assert!(free.translation.max < 1e-2, "{:?}", free.translation);
    assert!(stepped.translation.max < 1e-2, "{:?}", stepped.translation);
}

#[test]
fn single_precision_solve() {
    let k = CameraIntrinsics32::new(1000.0, 1000.0, 640.0, 360.0, 1280, 720).unwrap();
    let pose = Transform32::from_rotation_vector(&Vector3::new(0.2, -0.1, 0.4), Vector3::new(0.05, 0.02, 1.5));
    let h = 0.045f32;
    let object = [
        (-h, -h),
        (0.0, -h),
        (h, -h),
        (h, 0.0),
        (h, h),
        (0.0, h),
        (-h, h),
        (-h, 0.0),
    ];
    let corrs: Vec<Correspondence<f32>> = object
        .iter()
        .map(|&(x, y)| {
            let uv = k.project(&pose.transform_point(&Vector3::new(x, y, 0.0))).unwrap();
            Correspondence::new(Vector2::new(x, y), uv)
        })
        .collect();
    let sol = refine_pose(&ippe_pose(&corrs, &k).unwrap(), &corrs, &k);
    let err = pose_error(&sol.pose, &pose);
    assert!(err.translation_norm < 1e-4, "{err:?}");
    assert!(err.orientation_error_deg < 0.05, "{err:?}");
}
