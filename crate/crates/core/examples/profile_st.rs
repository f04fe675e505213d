use std::time::Instant;
use certpose::experiments::*;
use certpose::synth::*;
use certpose::ensemble::*;
use certpose::corrector::*;
use certpose::certificates::*;
use certpose::geometry::*;
use nalgebra::Vector3;

fn main() {
    let cfg = HarnessConfig::default();
    let model = cfg.model.build().unwrap();
    let tree = model.dense_tree();
    let d = model.diameter();
    let real_cfg = SceneConfig {
        gaussian_noise_std: 0.005,
        outlier_rate: 0.2,
        mask_corruption: MaskCorruption::moderate(),
        seed: 1,
        ..SceneConfig::default()
    };
    let t0 = Instant::now();
    let scenes = generate_scenes(&model, &real_cfg, 20).unwrap();
    println!("gen 20 scenes: {:?}", t0.elapsed());
    println!("scene n points: {}", scenes[0].x.len());

    let params = DetectorParams::init(8, "p", 1, 0.1 * d);
    let t0 = Instant::now();
    for s in &scenes { let _ = detect(&params, &s.x); }
    println!("detect x20: {:?}", t0.elapsed());

    let corr = CorrectorConfig { max_iters: 40, ..CorrectorConfig::for_model(&model) };
    let t0 = Instant::now();
    let mut results = Vec::new();
    for s in &scenes {
        let y = detect(&params, &s.x);
        results.push(solve_correction_with_tree(&y, &model, &tree, &s.x, &corr).unwrap());
    }
    println!("detect+correct x20 (full n={}): {:?}", scenes[0].x.len(), t0.elapsed());

    // resampled pool size
    let small: Vec<SceneSample> = scenes.iter().map(|s| {
        let idx = certpose::robust_points::random_sample_indices(s.x.len(), 320.min(s.x.len()), 9);
        SceneSample { x: s.x.select(&idx).unwrap(), ..s.clone() }
    }).collect();
    let t0 = Instant::now();
    let mut results2 = Vec::new();
    for s in &small {
        let y = detect(&params, &s.x);
        results2.push(solve_correction_with_tree(&y, &model, &tree, &s.x, &corr).unwrap());
    }
    println!("detect+correct x20 (n=320): {:?}", t0.elapsed());

    let cert = CertificateConfig::for_diameter(d);
    let t0 = Instant::now();
    for (s, r) in small.iter().zip(&results2) {
        let _ = observable_correctness_with_tree(&s.x, &s.mask, &r.corrected_pose, &model, &tree, &SceneConfig::default().camera, &cert).unwrap();
    }
    println!("certify x20: {:?}", t0.elapsed());

    let eval_pts: Vec<Vector3<f64>> = (0..192).map(|i| model.dense_points().column(i*10).into_owned()).collect();
    let t0 = Instant::now();
    for (s, r) in small.iter().zip(&results2) {
        let mut total = 0.0;
        for p in &eval_pts {
            let pa = r.corrected_pose.transform_point(p);
            let mut best = f64::INFINITY;
            for q in &eval_pts { let pb = s.t_star.transform_point(q); best = best.min((pa-pb).norm_squared()); }
            total += best.sqrt();
        }
        let _ = total;
    }
    println!("eval dist x20: {:?}", t0.elapsed());
    let iters: Vec<usize> = results2.iter().map(|r| r.iterations).collect();
    println!("corrector iterations used: {:?}", iters);
}
