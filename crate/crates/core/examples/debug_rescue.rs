use certpose::certificates::*;
use certpose::corrector::*;
use certpose::ensemble::*;
use certpose::experiments::*;
use certpose::robust_points::random_sample_indices;
use certpose::synth::*;

fn main() {
    let cfg = HarnessConfig::default();
    let model = cfg.model.build().unwrap();
    let tree = model.dense_tree();
    let d = model.diameter();
    let sub = &cfg.selftrain;
    let sim_cfg = SceneConfig { seed: derive_seed(0, 0x73696D), ..SceneConfig::default() };
    let sim = generate_scenes(&model, &sim_cfg, sub.pretrain_scenes).unwrap();
    let pre = TrainConfig {
        learning_rate: sub.pretrain_learning_rate,
        epochs: sub.pretrain_epochs,
        seed: derive_seed(0, 0x70726574),
        ..sub.train.clone()
    };
    let init = DetectorParams::init(8, "a", derive_seed(0, 0xD0), 0.1 * d);
    let (det, _) = pretrain_supervised(init, &sim, &TrainConfig { seed: derive_seed(pre.seed, 0), ..pre }).unwrap();

    let real_cfg = SceneConfig {
        gaussian_noise_std: 0.005,
        outlier_rate: 0.2,
        mask_corruption: MaskCorruption::moderate(),
        seed: derive_seed(0, 0x7265616C),
        ..SceneConfig::default()
    };
    let scenes = generate_scenes(&model, &real_cfg, 50).unwrap();
    let cam = CameraIntrinsics::default_vga();
    let cert_cfg = CertificateConfig { p: 0.7, ..CertificateConfig::for_diameter(d) };

    for (iters, n_pts, step) in [(12, 256, 1.0), (20, 256, 1.0), (20, 320, 1.0), (30, 256, 1.0), (20, 256, 2.0), (30, 256, 2.0), (40, 320, 1.0)] {
        let corr = CorrectorConfig { max_iters: iters, step_size: step, ..CorrectorConfig::for_model(&model) };
        let mut oc_count = 0;
        let t0 = std::time::Instant::now();
        for (i, s) in scenes.iter().enumerate() {
            let idx = random_sample_indices(s.x.len(), n_pts.min(s.x.len()), derive_seed(real_cfg.seed, 0xF0 + i as u64));
            let x = s.x.select(&idx).unwrap();
            let y = detect(&det, &x);
            let res = match solve_correction_with_tree(&y, &model, &tree, &x, &corr) { Ok(r) => r, Err(_) => continue };
            let c = observable_correctness_with_tree(&x, &s.mask, &res.corrected_pose, &model, &tree, &cam, &cert_cfg).unwrap();
            if c.oc { oc_count += 1; }
        }
        println!("iters={iters} n={n_pts} step={step}: oc {}/50  ({:?}/scene)", oc_count, t0.elapsed() / 50);
    }
}
