//! The robust corrector: a differentiable optimization layer that refines
//! detected keypoints so the registered pose fits the observed point cloud
//! under a truncated-least-squares loss.
//!
//! The forward pass runs safeguarded constant-step gradient descent on the
//! keypoint correction, differentiating through the closed-form
//! registration with nearest-neighbor correspondences re-associated every
//! iteration. A terminal fixed-point refinement alternates association and
//! closed-form re-registration on the unclamped pairs until the
//! correspondence set stabilizes, which pins the solution to a
//! reproducible optimum of the pose-space objective. The returned
//! correction is pose-consistent: the corrected keypoints are exactly the
//! model keypoints under the corrected pose (the objective is flat along
//! all non-rigid keypoint directions, so this costs nothing).
//!
//! The declared backward contract of the layer is the negative identity
//! (see [`correction_jacobian`]).

use nalgebra::{DMatrix, Matrix3xX, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    apply_pose, apply_pose_keypoints, nearest_distances, register, registration_with_diff, tls,
    CadModel, KeypointSet, PointCloud, Pose, RegistrationDiff,
};
use crate::kdtree::KdTree3;

/// Maximum step halvings per iteration before the step is rejected.
const MAX_HALVINGS: usize = 10;
/// Iteration cap for the terminal fixed-point refinement.
const POLISH_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Truncated least squares `min(z², c̄²)`.
    Robust,
    /// Plain squared loss `z²`.
    NonRobust,
}

#[derive(Debug, Clone)]
pub struct CorrectorConfig {
    /// TLS clamp in meters; residuals at or beyond it are treated as
    /// outliers.
    pub c_bar: f64,
    /// Unitless multiplier on the descent step.
    pub step_size: f64,
    pub max_iters: usize,
    /// Convergence threshold on the gradient sup-norm, in meters.
    pub grad_tol: f64,
    pub loss_variant: LossVariant,
    /// Terminal fixed-point refinement; disable to stop at the raw
    /// gradient-descent iterate (useful when a capped budget is wanted
    /// during training).
    pub polish: bool,
}

impl CorrectorConfig {
    /// Defaults tied to the object scale: c̄ = 10% of the diameter,
    /// grad_tol = 1e-4 · diameter.
    pub fn for_model(model: &CadModel) -> Self {
        let d = model.diameter();
        CorrectorConfig {
            c_bar: 0.1 * d,
            step_size: 1.0,
            max_iters: 100,
            grad_tol: 1e-4 * d,
            loss_variant: LossVariant::Robust,
            polish: true,
        }
    }

    pub fn non_robust(mut self) -> Self {
        self.loss_variant = LossVariant::NonRobust;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_bar > 0.0 && self.c_bar.is_finite()) {
            return Err(Error::InvalidInput("c_bar must be positive".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidInput("step_size must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be at least 1".into()));
        }
        if !(self.grad_tol > 0.0 && self.grad_tol.is_finite()) {
            return Err(Error::InvalidInput("grad_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Output of [`solve_correction`]. `corrected_keypoints` equals the
/// detections plus `delta_y` exactly, and `corrected_pose` is exactly the
/// registration of the corrected keypoints against the model keypoints.
#[derive(Debug, Clone)]
pub struct CorrectionResult {
    pub delta_y: Matrix3xX<f64>,
    pub corrected_keypoints: KeypointSet,
    pub corrected_pose: Pose,
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// The corrector objective: mean robust loss of the nearest-neighbor
/// distances from the input cloud to the model posed by registering the
/// corrected keypoints.
pub fn corrector_objective(
    delta_y: &Matrix3xX<f64>,
    y_tilde: &KeypointSet,
    model: &CadModel,
    x: &PointCloud,
    cfg: &CorrectorConfig,
) -> Result<f64> {
    cfg.validate()?;
    if !delta_y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteObjective("keypoint correction"));
    }
    let corrected = y_tilde.offset_by(delta_y)?;
    let pose = register(&corrected, model.keypoints())?;
    let posed = apply_pose(&pose, &model.dense_cloud());
    let scores = nearest_distances(x, &posed);
    Ok(mean_loss(scores.values().iter().copied(), cfg))
}

fn mean_loss(distances: impl ExactSizeIterator<Item = f64>, cfg: &CorrectorConfig) -> f64 {
    let n = distances.len() as f64;
    let total: f64 = match cfg.loss_variant {
        LossVariant::Robust => distances.map(|d| tls(d, cfg.c_bar)).sum(),
        LossVariant::NonRobust => distances.map(|d| d * d).sum(),
    };
    total / n
}

/// Mean loss over squared distances (capped entries already sit exactly at
/// the squared clamp).
fn mean_loss_sq(dist_sq: impl ExactSizeIterator<Item = f64>, cfg: &CorrectorConfig) -> f64 {
    let n = dist_sq.len() as f64;
    let c2 = cfg.c_bar * cfg.c_bar;
    let total: f64 = match cfg.loss_variant {
        LossVariant::Robust => dist_sq.map(|d2| d2.min(c2)).sum(),
        LossVariant::NonRobust => dist_sq.sum(),
    };
    total / n
}

/// Hallucinated keypoint detections for a pose-only estimator: the model
/// keypoints under the estimated pose.
pub fn hallucinate_keypoints(t_tilde: &Pose, model: &CadModel) -> KeypointSet {
    apply_pose_keypoints(t_tilde, model.keypoints())
}

/// The declared backward contract of the corrector layer: the gradient of
/// the correction with respect to the detected keypoints is −I (3N×3N).
pub fn correction_jacobian(result: &CorrectionResult) -> DMatrix<f64> {
    let dim = 3 * result.delta_y.ncols();
    -DMatrix::<f64>::identity(dim, dim)
}

/// Per-point association of scene points to the posed model: nearest dense
/// point index and distance, evaluated in the model frame.
pub(crate) struct Association {
    pub(crate) nearest: Vec<u32>,
    pub(crate) dist_sq: Vec<f64>,
}

/// Associates scene points with the posed model. Under the robust loss the
/// search is capped at the clamp: clamped points report exactly `c̄` and no
/// index, which leaves the objective and gradient unchanged while keeping
/// far queries cheap. The non-robust loss needs true distances.
pub(crate) fn associate(
    x: &[Vector3<f64>],
    pose: &Pose,
    model_tree: &KdTree3,
    cfg: &CorrectorConfig,
) -> Association {
    let inv = pose.inverse();
    let cap_sq = match cfg.loss_variant {
        LossVariant::Robust => cfg.c_bar * cfg.c_bar,
        LossVariant::NonRobust => f64::INFINITY,
    };
    let mut nearest = Vec::with_capacity(x.len());
    let mut dist_sq = Vec::with_capacity(x.len());
    for p in x {
        let q = inv.transform_point(p);
        let (d2, j) = model_tree.nearest_sq_within(&[q.x, q.y, q.z], cap_sq);
        nearest.push(j);
        dist_sq.push(d2);
    }
    Association { nearest, dist_sq }
}

struct Evaluation {
    objective: f64,
    pose: Pose,
    diff: RegistrationDiff,
    assoc: Association,
}

fn evaluate(
    y_hat: &KeypointSet,
    model: &CadModel,
    model_tree: &KdTree3,
    x: &[Vector3<f64>],
    cfg: &CorrectorConfig,
) -> Result<Evaluation> {
    let (pose, diff) = registration_with_diff(y_hat, model.keypoints())?;
    let assoc = associate(x, &pose, model_tree, cfg);
    let objective = mean_loss_sq(assoc.dist_sq.iter().copied(), cfg);
    if !objective.is_finite() {
        return Err(Error::NonFiniteObjective("corrector objective"));
    }
    Ok(Evaluation {
        objective,
        pose,
        diff,
        assoc,
    })
}

/// Gradient of the frozen-correspondence objective with respect to the
/// corrected keypoints. Residuals at or beyond the clamp contribute
/// nothing under the robust loss.
fn objective_gradient(
    eval: &Evaluation,
    model: &CadModel,
    x: &[Vector3<f64>],
    cfg: &CorrectorConfig,
) -> Matrix3xX<f64> {
    let n = x.len() as f64;
    let rot = eval.diff.rotation();
    let b_bar = eval.diff.source_centroid();
    let mut g_t = Vector3::zeros();
    let mut g_omega = Vector3::zeros();
    let c2 = cfg.c_bar * cfg.c_bar;
    for (i, p) in x.iter().enumerate() {
        if cfg.loss_variant == LossVariant::Robust
            && (eval.assoc.dist_sq[i] >= c2 || eval.assoc.nearest[i] == u32::MAX)
        {
            continue;
        }
        let m = model
            .dense_points()
            .column(eval.assoc.nearest[i] as usize)
            .into_owned();
        let moved = eval.pose.transform_point(&m);
        let e = (moved - p) * (2.0 / n);
        g_t += e;
        g_omega += (rot * (m - b_bar)).cross(&e);
    }
    eval.diff.chain_to_keypoints(&g_t, &g_omega)
}

/// Runs the robust corrector on one instance.
pub fn solve_correction(
    y_tilde: &KeypointSet,
    model: &CadModel,
    x: &PointCloud,
    cfg: &CorrectorConfig,
) -> Result<CorrectionResult> {
    let tree = model.dense_tree();
    solve_correction_with_tree(y_tilde, model, &tree, x, cfg)
}

/// [`solve_correction`] with a caller-cached model-frame kd-tree.
pub fn solve_correction_with_tree(
    y_tilde: &KeypointSet,
    model: &CadModel,
    model_tree: &KdTree3,
    x: &PointCloud,
    cfg: &CorrectorConfig,
) -> Result<CorrectionResult> {
    cfg.validate()?;
    if y_tilde.len() != model.keypoints().len() {
        return Err(Error::DimensionMismatch {
            what: "detected keypoints",
            expected: model.keypoints().len(),
            actual: y_tilde.len(),
        });
    }
    let points: Vec<Vector3<f64>> = (0..x.len()).map(|i| x.column(i)).collect();

    let mut y_hat = y_tilde.clone();
    let mut eval = evaluate(&y_hat, model, model_tree, &points, cfg)?;
    let initial_objective = eval.objective;

    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let grad = objective_gradient(&eval, model, &points, cfg);
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteObjective("corrector gradient"));
        }
        let sup = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if sup < cfg.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut step = cfg.step_size;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = KeypointSet::new(y_hat.points() - &grad * step)
                .map_err(|_| Error::NonFiniteObjective("corrector iterate"))?;
            match evaluate(&candidate, model, model_tree, &points, cfg) {
                Ok(cand) if cand.objective <= eval.objective => {
                    accepted = Some((candidate, cand));
                    break;
                }
                // Degenerate or ascending candidates shrink the step.
                Ok(_) | Err(Error::DegenerateConfiguration(_)) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        match accepted {
            Some((candidate, cand_eval)) => {
                y_hat = candidate;
                eval = cand_eval;
            }
            // No descent step exists at this scale; stop here.
            None => break,
        }
    }

    let mut pose = eval.pose.clone();
    let mut objective = eval.objective;
    if cfg.polish {
        (pose, objective) =
            polish(pose, objective, model, model_tree, &points, cfg)?;
        if objective <= eval.objective {
            // The refinement landed on a correspondence-stable optimum.
            let sup_after = {
                let eval_after = evaluate(
                    &apply_pose_keypoints(&pose, model.keypoints()),
                    model,
                    model_tree,
                    &points,
                    cfg,
                )?;
                objective_gradient(&eval_after, model, &points, cfg)
                    .iter()
                    .fold(0.0f64, |a, v| a.max(v.abs()))
            };
            if sup_after < cfg.grad_tol {
                converged = true;
            }
        }
    }

    // Pose-consistent correction: corrected keypoints are the model
    // keypoints under the corrected pose.
    let corrected_keypoints = apply_pose_keypoints(&pose, model.keypoints());
    let delta_y = corrected_keypoints.points() - y_tilde.points();
    // Recompute so the stored pose is bit-exactly the registration of the
    // stored keypoints.
    let corrected_pose = register(&corrected_keypoints, model.keypoints())?;
    debug_assert!(objective <= initial_objective + 1e-12);
    Ok(CorrectionResult {
        delta_y,
        corrected_keypoints,
        corrected_pose,
        final_objective: objective,
        iterations,
        converged,
    })
}

/// Association / closed-form re-registration alternation on the unclamped
/// pairs; each round cannot increase the true objective, and the loop stops
/// when the correspondence set stabilizes.
fn polish(
    mut pose: Pose,
    mut objective: f64,
    model: &CadModel,
    model_tree: &KdTree3,
    x: &[Vector3<f64>],
    cfg: &CorrectorConfig,
) -> Result<(Pose, f64)> {
    let c2 = cfg.c_bar * cfg.c_bar;
    let mut prev_pairs: Option<Vec<i64>> = None;
    for _ in 0..POLISH_MAX_ITERS {
        let assoc = associate(x, &pose, model_tree, cfg);
        let pairs: Vec<i64> = (0..x.len())
            .map(|i| {
                if cfg.loss_variant == LossVariant::Robust
                    && (assoc.dist_sq[i] >= c2 || assoc.nearest[i] == u32::MAX)
                {
                    -1
                } else {
                    assoc.nearest[i] as i64
                }
            })
            .collect();
        if prev_pairs.as_ref() == Some(&pairs) {
            break;
        }
        let active: Vec<usize> = (0..x.len()).filter(|&i| pairs[i] >= 0).collect();
        if active.len() < 3 {
            break;
        }
        let sources: Vec<Vector3<f64>> = active
            .iter()
            .map(|&i| model.dense_points().column(pairs[i] as usize).into_owned())
            .collect();
        let targets: Vec<Vector3<f64>> = active.iter().map(|&i| x[i]).collect();
        let candidate = match register(
            &KeypointSet::from_columns(&targets)?,
            &KeypointSet::from_columns(&sources)?,
        ) {
            Ok(p) => p,
            Err(Error::DegenerateConfiguration(_)) => break,
            Err(e) => return Err(e),
        };
        let inv = candidate.inverse();
        let cap_sq = match cfg.loss_variant {
            LossVariant::Robust => c2,
            LossVariant::NonRobust => f64::INFINITY,
        };
        let cand_objective = mean_loss_sq(
            x.iter().map(|p| {
                let q = inv.transform_point(p);
                model_tree.nearest_sq_within(&[q.x, q.y, q.z], cap_sq).0
            }),
            cfg,
        );
        if cand_objective > objective {
            break;
        }
        pose = candidate;
        objective = cand_objective;
        prev_pairs = Some(pairs);
    }
    Ok((pose, objective))
}

/// Solves a batch of instances independently (parallel across instances,
/// each solve single-threaded).
pub fn solve_correction_batch(
    instances: &[(KeypointSet, PointCloud)],
    model: &CadModel,
    cfg: &CorrectorConfig,
) -> Vec<Result<CorrectionResult>> {
    let tree = model.dense_tree();
    instances
        .par_iter()
        .map(|(y, x)| solve_correction_with_tree(y, model, &tree, x, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::adds_metric;
    use crate::synth::{
        builtin_model, generate_scene, perturb_keypoints, BuiltinKind, SceneConfig,
    };
    use nalgebra::Matrix3xX;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_model() -> CadModel {
        builtin_model(BuiltinKind::Box, Vector3::new(0.12, 0.18, 0.24), 7).unwrap()
    }

    fn clean_scene(model: &CadModel, seed: u64) -> crate::synth::SceneSample {
        generate_scene(model, &SceneConfig::default(), seed).unwrap()
    }

    #[test]
    fn objective_zero_at_perfect_alignment() {
        let model = test_model();
        let scene = clean_scene(&model, 1);
        let y_tilde = hallucinate_keypoints(&scene.t_star, &model);
        let cfg = CorrectorConfig::for_model(&model);
        let zero = Matrix3xX::zeros(y_tilde.len());
        let obj = corrector_objective(&zero, &y_tilde, &model, &scene.x, &cfg).unwrap();
        assert!(obj < 1e-24, "objective {obj}");
    }

    #[test]
    fn objective_clamps_outliers_exactly() {
        let model = test_model();
        let scene = clean_scene(&model, 2);
        let y_tilde = hallucinate_keypoints(&scene.t_star, &model);
        let cfg = CorrectorConfig::for_model(&model);
        let n = scene.x.len();
        let k = 17usize;

        // Append k points far beyond the clamp.
        let mut cols: Vec<Vector3<f64>> = (0..n).map(|i| scene.x.column(i)).collect();
        for j in 0..k {
            cols.push(scene.t_star.translation() + Vector3::new(10.0 + j as f64, 0.0, 0.0));
        }
        let with_outliers = PointCloud::from_columns(&cols).unwrap();
        let zero = Matrix3xX::zeros(y_tilde.len());
        let obj = corrector_objective(&zero, &y_tilde, &model, &with_outliers, &cfg).unwrap();
        let expect = k as f64 * cfg.c_bar * cfg.c_bar / (n + k) as f64;
        assert!((obj - expect).abs() < 1e-15, "obj {obj} vs {expect}");

        // Non-robust variant with a single outlier at a known distance:
        // extend outward from a corner so its nearest model point is that
        // corner.
        let mut cols: Vec<Vector3<f64>> = (0..n).map(|i| scene.x.column(i)).collect();
        let d = 0.5;
        let surface = scene
            .t_star
            .transform_point(&model.dense_points().column(0).into_owned());
        let center = scene.t_star.translation();
        let dir = (surface - center).normalize();
        cols.push(surface + dir * d);
        let with_one = PointCloud::from_columns(&cols).unwrap();
        let nr = CorrectorConfig::for_model(&model).non_robust();
        let obj = corrector_objective(&zero, &y_tilde, &model, &with_one, &nr).unwrap();
        // The appended point's nearest neighbor is the surface point it was
        // extended from (d < distances to other surface points for this
        // geometry), so the objective is exactly d²/(n+1).
        let expect = d * d / (n + 1) as f64;
        assert!(
            (obj - expect).abs() < 1e-12,
            "non-robust obj {obj} vs {expect}"
        );
    }

    #[test]
    fn already_optimal_detections_stay_put() {
        let model = test_model();
        let scene = clean_scene(&model, 3);
        let y_tilde = hallucinate_keypoints(&scene.t_star, &model);
        let cfg = CorrectorConfig::for_model(&model);
        let res = solve_correction(&y_tilde, &model, &scene.x, &cfg).unwrap();
        assert!(res.converged);
        let delta_norm = res.delta_y.norm();
        assert!(
            delta_norm < cfg.grad_tol * model.diameter(),
            "delta {delta_norm}"
        );
        let err = adds_metric(&res.corrected_pose, &scene.t_star, &model) / model.diameter();
        assert!(err < 1e-9, "pose error {err}");
    }

    #[test]
    fn result_invariants_hold() {
        let model = test_model();
        let scene = clean_scene(&model, 4);
        let y_tilde = perturb_keypoints(
            &scene.y_star,
            0.4,
            0.8,
            model.diameter(),
            11,
        );
        let cfg = CorrectorConfig::for_model(&model);
        let res = solve_correction(&y_tilde, &model, &scene.x, &cfg).unwrap();

        // corrected = detected + delta exactly.
        let recomposed = y_tilde.points() + &res.delta_y;
        assert_eq!(recomposed, *res.corrected_keypoints.points());

        // corrected_pose is exactly the registration of the corrected
        // keypoints.
        let re = register(&res.corrected_keypoints, model.keypoints()).unwrap();
        assert_eq!(re.rotation(), res.corrected_pose.rotation());
        assert_eq!(re.translation(), res.corrected_pose.translation());

        // Monotone descent.
        let zero = Matrix3xX::zeros(y_tilde.len());
        let initial = corrector_objective(&zero, &y_tilde, &model, &scene.x, &cfg).unwrap();
        assert!(res.final_objective <= initial + 1e-12);
    }

    #[test]
    fn corrects_large_keypoint_noise_on_clean_scenes() {
        let model = test_model();
        let cfg = CorrectorConfig::for_model(&model);
        let mut successes = 0;
        let trials = 12;
        for t in 0..trials {
            let scene = clean_scene(&model, 100 + t);
            let y_tilde = perturb_keypoints(
                &scene.y_star,
                0.6,
                0.8,
                model.diameter(),
                200 + t,
            );
            let res = solve_correction(&y_tilde, &model, &scene.x, &cfg).unwrap();
            let adds = adds_metric(&res.corrected_pose, &scene.t_star, &model) / model.diameter();
            if adds < 0.05 {
                successes += 1;
            }
        }
        assert!(
            successes * 10 >= trials * 9,
            "only {successes}/{trials} trials recovered"
        );
    }

    #[test]
    fn robust_beats_non_robust_under_outliers() {
        let model = test_model();
        let cfg = CorrectorConfig::for_model(&model);
        let nr_cfg = CorrectorConfig::for_model(&model).non_robust();
        let mut robust_total = 0.0;
        let mut non_robust_total = 0.0;
        for t in 0..6 {
            let scene = generate_scene(
                &model,
                &SceneConfig {
                    outlier_rate: 0.5,
                    outlier_box_scale: 2.0,
                    ..SceneConfig::default()
                },
                300 + t,
            )
            .unwrap();
            let y_tilde = perturb_keypoints(
                &scene.y_star,
                0.4,
                0.8,
                model.diameter(),
                400 + t,
            );
            let robust = solve_correction(&y_tilde, &model, &scene.x, &cfg).unwrap();
            let non_robust = solve_correction(&y_tilde, &model, &scene.x, &nr_cfg).unwrap();
            robust_total +=
                adds_metric(&robust.corrected_pose, &scene.t_star, &model) / model.diameter();
            non_robust_total +=
                adds_metric(&non_robust.corrected_pose, &scene.t_star, &model) / model.diameter();
        }
        assert!(
            robust_total * 3.0 < non_robust_total,
            "robust {robust_total} vs non-robust {non_robust_total}"
        );
    }

    #[test]
    fn variants_agree_when_nothing_clamps() {
        let model = test_model();
        let scene = clean_scene(&model, 5);
        // A perturbation small enough that every residual stays below c̄.
        let y_tilde = perturb_keypoints(
            &scene.y_star,
            0.02,
            1.0,
            model.diameter(),
            12,
        );
        let robust = solve_correction(
            &y_tilde,
            &model,
            &scene.x,
            &CorrectorConfig::for_model(&model),
        )
        .unwrap();
        let non_robust = solve_correction(
            &y_tilde,
            &model,
            &scene.x,
            &CorrectorConfig::for_model(&model).non_robust(),
        )
        .unwrap();
        assert_eq!(robust.delta_y, non_robust.delta_y);
        assert_eq!(robust.final_objective, non_robust.final_objective);
    }

    #[test]
    fn far_outliers_leave_the_correction_unchanged() {
        let model = test_model();
        let scene = clean_scene(&model, 6);
        let y_tilde = perturb_keypoints(
            &scene.y_star,
            0.3,
            0.8,
            model.diameter(),
            13,
        );
        let cfg = CorrectorConfig::for_model(&model);
        let base = solve_correction(&y_tilde, &model, &scene.x, &cfg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut cols: Vec<Vector3<f64>> = (0..scene.x.len()).map(|i| scene.x.column(i)).collect();
        for _ in 0..40 {
            // Far beyond any pose visited during descent.
            cols.push(
                scene.t_star.translation()
                    + Vector3::new(
                        rng.random_range(8.0..12.0),
                        rng.random_range(8.0..12.0),
                        rng.random_range(8.0..12.0),
                    ),
            );
        }
        let with_far = PointCloud::from_columns(&cols).unwrap();
        let shifted = solve_correction(&y_tilde, &model, &with_far, &cfg).unwrap();
        let diff = (&base.delta_y - &shifted.delta_y).norm();
        assert!(
            diff < 1e-3 * model.diameter(),
            "far outliers moved the correction by {diff}"
        );
    }

    #[test]
    fn jacobian_is_negative_identity() {
        let model = test_model();
        let scene = clean_scene(&model, 8);
        let y_tilde = hallucinate_keypoints(&scene.t_star, &model);
        let cfg = CorrectorConfig::for_model(&model);
        let res = solve_correction(&y_tilde, &model, &scene.x, &cfg).unwrap();
        let jac = correction_jacobian(&res);
        let dim = 3 * model.keypoints().len();
        assert_eq!(jac, -DMatrix::<f64>::identity(dim, dim));
    }

    #[test]
    fn correction_map_has_negative_identity_differential() {
        // Re-solve with perturbed detections: the correction must move by
        // exactly the negative perturbation (same basin).
        let model = test_model();
        let cfg = CorrectorConfig::for_model(&model);
        let d = model.diameter();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut checked = 0;
        for t in 0..8u64 {
            let scene = clean_scene(&model, 500 + t);
            let y_tilde = perturb_keypoints(&scene.y_star, 0.3, 0.8, d, 600 + t);
            let base = solve_correction(&y_tilde, &model, &scene.x, &cfg).unwrap();
            if !base.converged {
                continue;
            }
            checked += 1;
            for _ in 0..3 {
                let mut delta = Matrix3xX::zeros(y_tilde.len());
                for v in delta.iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
                let scale = 1e-3 * d / delta.norm();
                delta *= scale;
                let perturbed = KeypointSet::new(y_tilde.points() + &delta).unwrap();
                let moved = solve_correction(&perturbed, &model, &scene.x, &cfg).unwrap();
                let err = (&moved.delta_y - &base.delta_y + &delta).norm();
                assert!(
                    err <= 1e-2 * delta.norm(),
                    "differential error {} vs allowance {}",
                    err,
                    1e-2 * delta.norm()
                );
                // Corrected keypoints are locally independent of detections.
                let drift =
                    (moved.corrected_keypoints.points() - base.corrected_keypoints.points()).norm();
                assert!(drift <= 1e-2 * delta.norm(), "corrected drift {drift}");
            }
        }
        assert!(checked >= 5, "only {checked} converged instances");
    }

    #[test]
    fn batch_solver_matches_single_solves() {
        let model = test_model();
        let cfg = CorrectorConfig::for_model(&model);
        let instances: Vec<(KeypointSet, PointCloud)> = (0..4)
            .map(|t| {
                let scene = clean_scene(&model, 700 + t);
                let y = perturb_keypoints(&scene.y_star, 0.3, 0.8, model.diameter(), 800 + t);
                (y, scene.x)
            })
            .collect();
        let batch = solve_correction_batch(&instances, &model, &cfg);
        for ((y, x), out) in instances.iter().zip(batch) {
            let single = solve_correction(y, &model, x, &cfg).unwrap();
            let out = out.unwrap();
            assert_eq!(single.delta_y, out.delta_y);
            assert_eq!(single.final_objective, out.final_objective);
        }
    }
}
