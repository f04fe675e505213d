//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. Run with `cargo test --test acceptance` (use
//! `-- --nocapture` to see the lines).

use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix3xX, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use certpose::certificates::CertificateConfig;
use certpose::corrector::{
    corrector_objective, solve_correction, CorrectorConfig, LossVariant,
};
use certpose::ensemble::{
    freeze_self, freeze_sup, loss_self, loss_self_frozen, loss_self_frozen_grad, loss_sup,
    loss_sup_frozen, loss_sup_frozen_grad,
};
use certpose::experiments::{
    certificate_discrimination, cmd_centroid_robustness, cmd_corrector_analysis,
    cmd_corrector_robustness, cmd_selftrain, HarnessConfig,
};
use certpose::geometry::{
    adds_metric, apply_pose, apply_pose_keypoints, nearest_distances, register, CadModel,
    KeypointSet, PointCloud, Pose,
};
use certpose::robust_points::{fps_indices, robust_centroid, GncConfig};
use certpose::synth::{
    builtin_model, derive_seed, generate_scene, perturb_keypoints, BuiltinKind, SceneConfig,
};

fn test_model() -> CadModel {
    builtin_model(BuiltinKind::Box, Vector3::new(0.12, 0.18, 0.24), 7).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let mut normal = |r: &mut ChaCha8Rng| {
        let u1: f64 = r.random::<f64>().max(1e-12);
        let u2: f64 = r.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let q = [normal(rng), normal(rng), normal(rng), normal(rng)];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let rot = nalgebra::Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    let t = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    Pose::new(rot, t).unwrap()
}

fn random_keypoints(rng: &mut ChaCha8Rng, n: usize) -> KeypointSet {
    KeypointSet::from_columns(
        &(0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                )
            })
            .collect::<Vec<_>>(),
    )
    .unwrap()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, half: f64) -> PointCloud {
    PointCloud::from_columns(
        &(0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-half..half),
                    rng.random_range(-half..half),
                    rng.random_range(-half..half),
                )
            })
            .collect::<Vec<_>>(),
    )
    .unwrap()
}

/// Criterion 1: corrector efficacy on the keypoint-noise sweep.
#[test]
fn criterion_1_corrector_efficacy() {
    let start = Instant::now();
    let cfg = HarnessConfig::default();
    let dir = std::env::temp_dir().join("certpose_accept_c1");
    let _ = std::fs::remove_dir_all(&dir);
    // Single-threaded pool: the runtime target is single-threaded.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let report = pool
        .install(|| cmd_corrector_analysis(&cfg, &dir, false))
        .unwrap();
    let elapsed = start.elapsed();
    for (what, ok) in &report.checks {
        assert!(ok, "criterion 1 failed: {what}");
    }
    assert!(
        elapsed.as_secs() < 300,
        "criterion 1 runtime {elapsed:?} exceeds 5 minutes"
    );
    println!(
        "criterion 1: PASS — {} ({elapsed:?} single-threaded)",
        report
            .checks
            .iter()
            .map(|(w, _)| w.as_str())
            .collect::<Vec<_>>()
            .join("; ")
    );
}

/// Criterion 2: robust vs non-robust ordering under outliers.
#[test]
fn criterion_2_robust_vs_non_robust_ordering() {
    let cfg = HarnessConfig::default();
    let dir = std::env::temp_dir().join("certpose_accept_c2");
    let _ = std::fs::remove_dir_all(&dir);
    let report = cmd_corrector_robustness(&cfg, &dir, false).unwrap();
    for (what, ok) in &report.checks {
        assert!(ok, "criterion 2 failed: {what}");
    }
    println!(
        "criterion 2: PASS — {}",
        report
            .checks
            .iter()
            .map(|(w, _)| w.as_str())
            .collect::<Vec<_>>()
            .join("; ")
    );
}

/// Criterion 3: the correction map has differential −I: re-solving with
/// perturbed detections moves the correction by exactly the negative
/// perturbation, on 50 converged instances and 20 directions each.
#[test]
fn criterion_3_proposition_1_numeric_check() {
    let model = test_model();
    let cfg = CorrectorConfig::for_model(&model);
    let d = model.diameter();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut converged_instances = 0usize;
    let mut directions_checked = 0usize;
    let mut worst: f64 = 0.0;
    let mut attempt = 0u64;
    while converged_instances < 50 {
        attempt += 1;
        assert!(attempt < 200, "could not gather 50 converged instances");
        let scene = generate_scene(&model, &SceneConfig::default(), 9000 + attempt).unwrap();
        let sigma = 0.2 + 0.2 * (attempt % 3) as f64;
        let y_tilde =
            perturb_keypoints(&scene.y_star, sigma, 0.8, d, derive_seed(attempt, 0x6B70));
        let base = solve_correction(&y_tilde, &model, &scene.x, &cfg).unwrap();
        if !base.converged {
            continue;
        }
        converged_instances += 1;
        for _ in 0..20 {
            let mut delta = Matrix3xX::zeros(y_tilde.len());
            for v in delta.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            delta *= 1e-3 * d / delta.norm();
            let perturbed = KeypointSet::new(y_tilde.points() + &delta).unwrap();
            let moved = solve_correction(&perturbed, &model, &scene.x, &cfg).unwrap();
            let err = (&moved.delta_y - &base.delta_y + &delta).norm();
            let rel = err / delta.norm();
            worst = worst.max(rel);
            assert!(
                rel <= 1e-2,
                "instance {converged_instances}: ‖Δy(ỹ+δ) − Δy(ỹ) + δ‖ = {rel:.3e}·‖δ‖"
            );
            directions_checked += 1;
        }
    }
    println!(
        "criterion 3: PASS — {converged_instances} converged instances × 20 directions \
         ({directions_checked} checks), worst relative deviation {worst:.2e} ≤ 1e-2"
    );
}

/// Criterion 4: noise-free registration round trips to 1e-9.
#[test]
fn criterion_4_registration_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let mut worst_rot: f64 = 0.0;
    let mut worst_tra: f64 = 0.0;
    for i in 0..1000 {
        let n = 4 + (i % 9);
        let b = random_keypoints(&mut rng, n);
        let pose = random_pose(&mut rng);
        let y = apply_pose_keypoints(&pose, &b);
        let recovered = register(&y, &b).unwrap();
        let (re, te) = recovered.error_to(&pose);
        worst_rot = worst_rot.max(re);
        worst_tra = worst_tra.max(te);
        assert!(re < 1e-9 && te < 1e-9, "round trip {i}: rot {re:.2e} tra {te:.2e}");
    }
    println!(
        "criterion 4: PASS — 1000 round trips, worst rotation {worst_rot:.2e}, \
         worst translation {worst_tra:.2e} (< 1e-9)"
    );
}

/// Criterion 5: loss_self, loss_sup, adds_metric and nearest_distances
/// match brute-force double-loop oracles.
#[test]
fn criterion_5_loss_metric_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let n = 50 + (i % 10) * 45; // up to 455
        let m = 60 + (i % 9) * 49; // up to 452
        let x = random_cloud(&mut rng, n, 0.5);
        let y = random_cloud(&mut rng, m, 0.5);

        // nearest_distances.
        let fast = nearest_distances(&x, &y);
        for (qi, &dv) in fast.values().iter().enumerate() {
            let mut best = f64::INFINITY;
            for j in 0..y.len() {
                best = best.min((x.column(qi) - y.column(j)).norm());
            }
            worst = worst.max((dv - best).abs());
        }

        // Model-based losses on a reduced cube model.
        let mut cols = vec![
            Vector3::new(-0.06, -0.09, -0.12),
            Vector3::new(0.06, -0.09, -0.12),
            Vector3::new(-0.06, 0.09, -0.12),
            Vector3::new(-0.06, -0.09, 0.12),
            Vector3::new(0.06, 0.09, 0.12),
        ];
        while cols.len() < m.min(200) {
            cols.push(Vector3::new(
                rng.random_range(-0.06..0.06),
                rng.random_range(-0.09..0.09),
                0.12,
            ));
        }
        let kps = KeypointSet::from_columns(&cols[..5]).unwrap();
        let model = CadModel::new(Matrix3xX::from_columns(&cols), kps).unwrap();
        let c_bar = 0.1 * model.diameter();
        let t1 = random_pose(&mut rng);
        let t2 = random_pose(&mut rng);

        let v = loss_self(&x, &t1, &model, c_bar);
        let posed = apply_pose(&t1, &model.dense_cloud());
        let mut oracle = 0.0;
        for qi in 0..x.len() {
            let mut best = f64::INFINITY;
            for j in 0..posed.len() {
                best = best.min((x.column(qi) - posed.column(j)).norm());
            }
            oracle += best.min(c_bar) * best.min(c_bar);
        }
        oracle /= x.len() as f64;
        worst = worst.max((v - oracle).abs());

        let v = loss_sup(&t1, &t2, &model);
        let a = apply_pose(&t1, &model.dense_cloud());
        let c = apply_pose(&t2, &model.dense_cloud());
        let mm = model.dense_len() as f64;
        let mut oracle = 0.0;
        for qi in 0..a.len() {
            let mut best = f64::INFINITY;
            for j in 0..c.len() {
                best = best.min((a.column(qi) - c.column(j)).norm_squared());
            }
            oracle += best / mm;
        }
        for j in 0..c.len() {
            let mut best = f64::INFINITY;
            for qi in 0..a.len() {
                best = best.min((a.column(qi) - c.column(j)).norm_squared());
            }
            oracle += best / mm;
        }
        worst = worst.max((v - oracle).abs());

        let v = adds_metric(&t1, &t2, &model);
        let mut oracle = 0.0;
        for qi in 0..a.len() {
            let mut best = f64::INFINITY;
            for j in 0..c.len() {
                best = best.min((a.column(qi) - c.column(j)).norm());
            }
            oracle += best;
        }
        oracle /= mm;
        worst = worst.max((v - oracle).abs());
        assert!(worst < 1e-9, "instance {i}: oracle deviation {worst:.2e}");
    }
    println!("criterion 5: PASS — 100 instances, worst oracle deviation {worst:.2e} < 1e-9");
}

/// Criterion 6: analytic gradients of the frozen-correspondence losses
/// match central finite differences within 1e-4 relative.
#[test]
fn criterion_6_gradient_checks() {
    let model = test_model();
    let d = model.diameter();
    let c_bar = 0.1 * d;
    let tree = model.dense_tree();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC6);
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let scene = generate_scene(&model, &SceneConfig::default(), 7000 + i).unwrap();
        let y_hat = perturb_keypoints(&scene.y_star, 0.15, 1.0, d, 7100 + i);

        let frozen = freeze_self(&scene.x, &y_hat, &model, &tree, c_bar).unwrap();
        let grad = loss_self_frozen_grad(&y_hat, &scene.x, &model, &frozen).unwrap();
        let rel = fd_relative_error(&grad, &y_hat, |y| {
            loss_self_frozen(y, &scene.x, &model, &frozen).unwrap()
        });
        worst = worst.max(rel);
        assert!(rel < 1e-4, "loss_self gradient: instance {i} rel err {rel:.2e}");

        let target = Pose::new(
            *scene.t_star.rotation(),
            scene.t_star.translation()
                + Vector3::new(
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.02..0.02),
                ),
        )
        .unwrap();
        let frozen = freeze_sup(&y_hat, &target, &model, &tree).unwrap();
        let grad = loss_sup_frozen_grad(&y_hat, &target, &model, &frozen).unwrap();
        let rel = fd_relative_error(&grad, &y_hat, |y| {
            loss_sup_frozen(y, &target, &model, &frozen).unwrap()
        });
        worst = worst.max(rel);
        assert!(rel < 1e-4, "loss_sup gradient: instance {i} rel err {rel:.2e}");
    }
    println!("criterion 6: PASS — 50 instances, worst relative gradient error {worst:.2e} < 1e-4");
}

fn fd_relative_error(
    grad: &Matrix3xX<f64>,
    y_hat: &KeypointSet,
    f: impl Fn(&KeypointSet) -> f64,
) -> f64 {
    let eps = 1e-7;
    let mut fd = Matrix3xX::zeros(y_hat.len());
    for k in 0..y_hat.len() {
        for a in 0..3 {
            let mut plus = y_hat.points().clone();
            plus[(a, k)] += eps;
            let mut minus = y_hat.points().clone();
            minus[(a, k)] -= eps;
            fd[(a, k)] = (f(&KeypointSet::new(plus).unwrap())
                - f(&KeypointSet::new(minus).unwrap()))
                / (2.0 * eps);
        }
    }
    (grad - &fd).norm() / fd.norm().max(1e-12)
}

/// Criterion 7: GNC centroid on the 70/30 construction, plus the sampling
/// comparison.
#[test]
fn criterion_7_gnc_centroid_and_sampling() {
    let gnc = GncConfig::new(0.1).unwrap();
    let mut worst_robust: f64 = 0.0;
    let mut best_plain = f64::INFINITY;
    for seed in 0..100u64 {
        let (cloud, center, outlier) = ball_box(seed);
        let (robust, _) = robust_centroid(&cloud, &gnc);
        let plain = cloud.points().column_sum() / cloud.len() as f64;
        let robust_err = (robust - center).norm();
        let plain_err = (plain - center).norm();
        worst_robust = worst_robust.max(robust_err);
        best_plain = best_plain.min(plain_err);
        assert!(robust_err < 0.02, "seed {seed}: robust err {robust_err}");
        assert!(plain_err > 0.1, "seed {seed}: plain err {plain_err}");

        let n_prime = outlier.iter().filter(|&&o| !o).count();
        let fps_sel = fps_indices(&cloud, n_prime, seed);
        let fps_frac =
            fps_sel.iter().filter(|&&i| outlier[i]).count() as f64 / fps_sel.len() as f64;
        // Oracle scores select the points closest to the true center.
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        order.sort_by(|&a, &b| {
            (cloud.column(a) - center)
                .norm()
                .total_cmp(&(cloud.column(b) - center).norm())
        });
        let pool_frac = order[..n_prime]
            .iter()
            .filter(|&&i| outlier[i])
            .count() as f64
            / n_prime as f64;
        assert!(
            fps_frac > pool_frac,
            "seed {seed}: fps {fps_frac} vs pool {pool_frac}"
        );
    }
    println!(
        "criterion 7: PASS — 100 seeds, worst robust error {worst_robust:.4} m < 0.02, \
         smallest plain-mean error {best_plain:.3} m > 0.1, FPS always above oracle pooling"
    );
}

fn ball_box(seed: u64) -> (PointCloud, Vector3<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x77));
    let center = Vector3::new(1.0, 1.0, 1.0);
    let mut cols = Vec::new();
    let mut outlier = Vec::new();
    for _ in 0..70 {
        loop {
            let v = Vector3::new(
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
            );
            if v.norm() <= 0.02 {
                cols.push(center + v);
                outlier.push(false);
                break;
            }
        }
    }
    for _ in 0..30 {
        cols.push(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        outlier.push(true);
    }
    (PointCloud::from_columns(&cols).unwrap(), center, outlier)
}

/// Criterion 8: certificate discrimination on labeled poses.
#[test]
fn criterion_8_certificate_discrimination() {
    let cfg = HarnessConfig::default();
    let (tpr, tnr) = certificate_discrimination(&cfg, 100).unwrap();
    assert!(tpr >= 0.9, "TPR {tpr}");
    assert!(tnr >= 0.9, "TNR {tnr}");
    println!("criterion 8: PASS — 200 labeled poses, TPR {tpr:.3} ≥ 0.9, TNR {tnr:.3} ≥ 0.9");
}

/// Criteria 9 and 10: self-training progression and the sim-to-real bridge.
/// This runs the full canned benchmark (2 detectors, 3000 iterations,
/// batch 20); the zero-certificate gating exactness is covered by the
/// ensemble unit tests and re-asserted here on the log.
#[test]
fn criterion_9_and_10_self_training() {
    let start = Instant::now();
    let cfg = HarnessConfig::default();
    let dir = std::env::temp_dir().join("certpose_accept_c9");
    let _ = std::fs::remove_dir_all(&dir);
    let report = cmd_selftrain(&cfg, &dir, false).unwrap();
    let elapsed = start.elapsed();
    for (what, ok) in &report.checks {
        assert!(ok, "criterion 9/10 failed: {what}");
    }
    assert!(
        elapsed.as_secs() < 1800,
        "self-training runtime {elapsed:?} exceeds 30 minutes"
    );
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    println!(
        "criterion 9: PASS — oc fraction {:.3} → {:.3} (Δ {:.3} ≥ 0.3) in {elapsed:?}",
        summary["initial_oc"].as_f64().unwrap(),
        summary["final_oc"].as_f64().unwrap(),
        summary["improvement"].as_f64().unwrap()
    );
    println!(
        "criterion 10: PASS — threshold-ADD-S sim-only {:.3} < sim+corrector {:.3} \
         (self-trained {:.3})",
        summary["threshold_adds_sim_only"].as_f64().unwrap(),
        summary["threshold_adds_sim_corrector"].as_f64().unwrap(),
        summary["threshold_adds_self_trained"].as_f64().unwrap()
    );
}

/// Criterion 11: byte-identical CLI outputs across reruns and worker
/// counts.
#[test]
fn criterion_11_cli_determinism() {
    let bin = env!("CARGO_BIN_EXE_certpose");
    let base = std::env::temp_dir().join("certpose_accept_c11");
    let _ = std::fs::remove_dir_all(&base);
    std::fs::create_dir_all(&base).unwrap();

    let run = |name: &str, args: &[&str]| {
        let out = base.join(name);
        let status = std::process::Command::new(bin)
            .args(args)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "{name}: command failed");
        out
    };

    // corrector-analysis at two worker counts plus a rerun.
    let a = run(
        "a",
        &["corrector-analysis", "--trials", "6", "--seed", "5", "--workers", "1"],
    );
    let b = run(
        "b",
        &["corrector-analysis", "--trials", "6", "--seed", "5", "--workers", "2"],
    );
    let c = run(
        "c",
        &["corrector-analysis", "--trials", "6", "--seed", "5", "--workers", "1"],
    );
    for file in ["manifest.json", "trials.csv", "summary.json", "corrector_adds.svg"] {
        let fa = std::fs::read(a.join(file)).unwrap();
        let fb = std::fs::read(b.join(file)).unwrap();
        let fc = std::fs::read(c.join(file)).unwrap();
        assert_eq!(fa, fb, "{file} differs across worker counts");
        assert_eq!(fa, fc, "{file} differs across reruns");
    }

    // centroid-robustness likewise.
    let a = run(
        "d",
        &["centroid-robustness", "--trials", "10", "--seed", "3", "--workers", "1"],
    );
    let b = run(
        "e",
        &["centroid-robustness", "--trials", "10", "--seed", "3", "--workers", "2"],
    );
    for file in ["trials.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file} differs across worker counts"
        );
    }

    // gen-scenes byte-identical datasets.
    let a = run("f", &["gen-scenes", "--count", "3", "--seed", "11"]);
    let b = run("g", &["gen-scenes", "--count", "3", "--seed", "11"]);
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        let fa = std::fs::read(a.join(&name)).unwrap();
        let fb = std::fs::read(b.join(&name)).unwrap();
        assert_eq!(fa, fb, "{name:?} differs across reruns");
    }
    println!(
        "criterion 11: PASS — corrector-analysis, centroid-robustness and gen-scenes outputs \
         are byte-identical across reruns and worker counts"
    );
}

/// Spot checks backing the corrector objective contract used throughout.
#[test]
fn corrector_objective_spot_checks() {
    let model = test_model();
    let scene = generate_scene(&model, &SceneConfig::default(), 42).unwrap();
    let cfg = CorrectorConfig::for_model(&model);
    let y_tilde = apply_pose_keypoints(&scene.t_star, model.keypoints());
    let zero = Matrix3xX::zeros(y_tilde.len());
    let clean = corrector_objective(&zero, &y_tilde, &model, &scene.x, &cfg).unwrap();
    assert!(clean < 1e-20);
    let nr = CorrectorConfig {
        loss_variant: LossVariant::NonRobust,
        ..cfg
    };
    let clean_nr = corrector_objective(&zero, &y_tilde, &model, &scene.x, &nr).unwrap();
    assert_eq!(clean, clean_nr);
    println!("corrector objective spot checks: PASS");
}

/// The certificate config ties its defaults to the diameter as documented.
#[test]
fn default_thresholds_follow_the_diameter() {
    let model = test_model();
    let cert = CertificateConfig::for_diameter(model.diameter());
    assert_eq!(cert.p, 0.9);
    assert!((cert.eps_3d - 0.04 * model.diameter()).abs() < 1e-15);
    assert_eq!(cert.eps_2d, 0.10);
    let report_dir = std::env::temp_dir().join("certpose_accept_thresholds");
    let _ = std::fs::remove_dir_all(&report_dir);
    let mut cfg = HarnessConfig::default();
    cfg.centroid_robustness.trials = 3;
    let report = cmd_centroid_robustness(&cfg, &report_dir, true).unwrap();
    assert!(Path::new(&report.out_dir).join("manifest.json").exists());
    println!("default thresholds: PASS");
}
