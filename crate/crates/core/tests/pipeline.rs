use std::sync::Arc;

use ipl::cache::AttentionCache;
use ipl::data::{psnr, ssim, synth_triplet, MetricReport, SceneSpec};
use ipl::io;
use ipl::net::{init_weights, InferenceEngine, ModelConfig};
use ipl::train::{train_loop, Sample, TrainConfig};
use ipl::Shape3;

#[test]
fn synth_disk_fuse_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..2 {
        let (t, gt) = synth_triplet(&SceneSpec::new(40, 24, 10 + i as u64)).unwrap();
        io::save_scene(dir.path(), i, &t, Some(&gt)).unwrap();
    }
    let scenes = io::list_scenes(dir.path()).unwrap();
    assert_eq!(scenes.len(), 2);

    let t = io::load_triplet(&scenes[0].frames).unwrap();
    let gt = io::load_image(scenes[0].target.as_ref().unwrap()).unwrap();
    assert_eq!(t.x2.shape(), Shape3::new(3, 40, 24));

    let w = init_weights(&ModelConfig::micro(), 0).unwrap();
    let cache = Arc::new(AttentionCache::with_capacity(1 << 20));
    let engine = InferenceEngine::new(w).unwrap().with_cache(Some(cache.clone()));
    let y = engine.forward(&t).unwrap();
    assert_eq!(y.shape(), gt.shape());
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));

    // Untrained output starts near the mid frame.
    let near_mid = psnr(&y, &t.x2).unwrap();
    assert!(near_mid > 25.0, "{near_mid}");

    let report = MetricReport::compute(&gt, &y).unwrap();
    assert_eq!(report.psnr, psnr(&gt, &y).unwrap());
    assert_eq!(report.ssim, ssim(&gt, &y).unwrap());

    // Second pass through the populated cache needs no new evaluations.
    let before = engine.lfe_evaluations();
    let again = engine.forward(&t).unwrap();
    assert_eq!(engine.lfe_evaluations(), before);
    assert!(cache.stats().hits > 0);
    assert_eq!(again.data(), engine.forward(&t).unwrap().data());
}

#[test]
fn trained_weights_survive_a_file_round_trip() {
    let data: Vec<Sample> = (0..2)
        .map(|k| {
            let (triplet, target) = synth_triplet(&SceneSpec::new(32, 32, k)).unwrap();
            Sample { triplet, target }
        })
        .collect();
    let cfg = TrainConfig { steps: 3, batch_size: 2, ..TrainConfig::micro(1) };
    let out = train_loop(init_weights(&ModelConfig::micro(), 1).unwrap(), &data, &cfg).unwrap();
    assert_eq!(out.losses.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.iplw");
    io::save_weights(&path, &out.weights).unwrap();
    let back = io::load_weights(&path).unwrap();
    assert_eq!(back.config, out.weights.config);

    let a = InferenceEngine::new(out.weights).unwrap().forward(&data[0].triplet).unwrap();
    let b = InferenceEngine::new(back).unwrap().forward(&data[0].triplet).unwrap();
    assert_eq!(a.data(), b.data());
}
