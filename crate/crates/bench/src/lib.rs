//! Shared fixtures for the pipeline benchmarks.

use softlabel_core::labelstore::{extract_crop, RasterImage};
use softlabel_core::metrics::EvalSample;
use softlabel_core::simulate::{generate_indexed_scene, mock_detect, NoiseModel, ObjectKind, SceneSpec};

/// Crops of every object in `scenes` synthetic scenes of `kind`.
pub fn object_crops(kind: ObjectKind, scenes: usize, seed: u64) -> Vec<RasterImage> {
    let spec = SceneSpec { kind, seed, ..SceneSpec::default() };
    let mut crops = Vec::new();
    for i in 0..scenes {
        let scene = generate_indexed_scene(&spec, "bench_", i).expect("scene");
        for d in &scene.labels.detections {
            crops.push(extract_crop(&scene.image, &d.bbox).expect("crop"));
        }
    }
    crops
}

/// Ground truth against noisy mock predictions for `scenes` car scenes.
pub fn eval_samples(scenes: usize, seed: u64) -> Vec<EvalSample> {
    let spec = SceneSpec { seed, ..SceneSpec::default() };
    let noise = NoiseModel {
        fn_rate: 0.2,
        fp_rate: 2.0,
        jitter_px: 1.5,
        tp_conf_min: 0.3,
        seed,
        ..NoiseModel::default()
    };
    (0..scenes)
        .map(|i| {
            let scene = generate_indexed_scene(&spec, "bench_", i).expect("scene");
            let id = scene.labels.image_id.clone();
            let preds = mock_detect(&scene.labels, &noise, &id).expect("mock");
            EvalSample::new(id, preds.detections, scene.labels.detections)
        })
        .collect()
}
