use certpose::ensemble::*;
use certpose::experiments::*;
use certpose::synth::*;

fn main() {
    // Reconstruct the pretrained state of the selftrain command (seed 0),
    // then compare against the checkpoint written after training.
    let cfg = HarnessConfig::default();
    let model = cfg.model.build().unwrap();
    let d = model.diameter();
    let sub = &cfg.selftrain;
    let sim_cfg = SceneConfig { seed: derive_seed(cfg.seed, 0x73696D), ..cfg.scene.clone() };
    let sim_scenes = generate_scenes(&model, &sim_cfg, sub.pretrain_scenes).unwrap();
    let pre_cfg = TrainConfig {
        learning_rate: sub.pretrain_learning_rate,
        epochs: sub.pretrain_epochs,
        seed: derive_seed(cfg.seed, 0x70726574),
        ..sub.train.clone()
    };
    let init = DetectorParams::init(model.keypoints().len(), "detector-0", derive_seed(cfg.seed, 0xD0), 0.1 * d);
    let cfg0 = TrainConfig { seed: derive_seed(pre_cfg.seed, 0), ..pre_cfg.clone() };
    let (before, _) = pretrain_supervised(init, &sim_scenes, &cfg0).unwrap();
    let after = DetectorParams::load(std::path::Path::new("/tmp/st3/detector_0.bin")).unwrap();

    println!("w1 delta norm: {:.4e} (before {:.4e})", (&after.w1 - &before.w1).norm(), before.w1.norm());
    println!("w2 delta norm: {:.4e} (before {:.4e})", (&after.w2 - &before.w2).norm(), before.w2.norm());
    println!("b2 delta norm: {:.4e} (before {:.4e})", (&after.b2 - &before.b2).norm(), before.b2.norm());

    let real_cfg = SceneConfig {
        gaussian_noise_std: sub.real_gaussian_noise_std,
        outlier_rate: sub.real_outlier_rate,
        mask_corruption: sub.real_mask_corruption.clone(),
        seed: derive_seed(cfg.seed, 0x7265616C),
        ..cfg.scene.clone()
    };
    let pool = generate_scenes(&model, &real_cfg, 20).unwrap();
    let mut drift = 0.0;
    for s in &pool {
        let a = detect(&before, &s.x);
        let b = detect(&after, &s.x);
        drift += (a.points() - b.points()).norm() / d;
    }
    println!("mean detection drift over 20 scenes: {:.4} D", drift / 20.0);
}
