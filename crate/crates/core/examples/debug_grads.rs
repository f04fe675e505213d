use certpose::certificates::*;
use certpose::corrector::*;
use certpose::ensemble::*;
use certpose::experiments::*;
use certpose::geometry::*;
use certpose::synth::*;
use nalgebra::Vector3;

fn main() {
    let mut cfg = HarnessConfig::default();
    cfg.model = ModelSpec::Builtin { kind: BuiltinKind::LBracket, size: [0.15, 0.21, 0.09], seed: 7 };
    let model = cfg.model.build().unwrap();
    let tree = model.dense_tree();
    let d = model.diameter();
    let sim_cfg = SceneConfig { seed: derive_seed(0, 0x73696D), ..SceneConfig::default() };
    let real_cfg = SceneConfig {
        gaussian_noise_std: 0.005,
        outlier_rate: 0.2,
        mask_corruption: MaskCorruption::moderate(),
        seed: derive_seed(0, 0x7265616C),
        ..SceneConfig::default()
    };
    let sim_scenes = generate_scenes(&model, &sim_cfg, 500).unwrap();
    let tc = TrainConfig { epochs: 120, learning_rate: 0.3, ..TrainConfig::default() };
    let init = DetectorParams::init(model.keypoints().len(), "a", 1, 0.1 * d);
    let (det, losses) = pretrain_supervised(init, &sim_scenes, &tc).unwrap();
    println!("pretrain losses: first {:.4e} last {:.4e}", losses[0], losses.last().unwrap());

    // keypoint error on sim and real domains
    let real_scenes = generate_scenes(&model, &real_cfg, 40).unwrap();
    let kp_err = |scenes: &[SceneSample]| -> f64 {
        scenes.iter().map(|s| {
            let y = detect(&det, &s.x);
            (0..y.len()).map(|k| (y.column(k) - s.y_star.column(k)).norm()).sum::<f64>() / y.len() as f64
        }).sum::<f64>() / scenes.len() as f64
    };
    println!("mean kp err sim (train): {:.3} D", kp_err(&sim_scenes[..40]) / d);
    let held = generate_scenes(&model, &SceneConfig { seed: 777, ..sim_cfg.clone() }, 40).unwrap();
    println!("mean kp err sim (held-out): {:.3} D", kp_err(&held) / d);
    println!("mean kp err real: {:.3} D", kp_err(&real_scenes) / d);

    // one certified instance: inspect gradient magnitudes
    let corr = CorrectorConfig { max_iters: 20, ..CorrectorConfig::for_model(&model) };
    let cert_cfg = CertificateConfig { p: 0.7, ..CertificateConfig::for_diameter(d) };
    let cam = CameraIntrinsics::default_vga();
    for s in &real_scenes {
        let (y_tilde, cache) = detect_with_cache(&det, &s.x);
        let res = solve_correction_with_tree(&y_tilde, &model, &tree, &s.x, &corr).unwrap();
        let cert = observable_correctness_with_tree(&s.x, &s.mask, &res.corrected_pose, &model, &tree, &cam, &cert_cfg).unwrap();
        if !cert.oc { continue; }
        // self grad on this model
        let frozen = freeze_self(&s.x, &res.corrected_keypoints, &model, &tree, corr.c_bar).unwrap();
        let g_self = loss_self_frozen_grad(&res.corrected_keypoints, &s.x, &model, &frozen).unwrap();
        // sup grad pulling THIS detector toward its own corrected pose from another pose (simulate partner)
        let frozen2 = freeze_sup(&y_tilde, &res.corrected_pose, &model, &tree).unwrap();
        let g_sup = loss_sup_frozen_grad(&y_tilde, &res.corrected_pose, &model, &frozen2).unwrap();
        println!("|g_self|={:.3e} |g_sup(ytilde->That)|={:.3e}", g_self.norm(), g_sup.norm());
        let pg = detect_backward(&det, &cache, &g_sup);
        println!("param grads: |w1|={:.3e} |w2|={:.3e} |b2|={:.3e}", pg.w1.norm(), pg.w2.norm(), pg.b2.norm());
        println!("detection vs corrected kp dist: {:.3} D", (y_tilde.points() - res.corrected_keypoints.points()).norm() / d);
        break;
    }
}
