//! Certificate-gated ensemble self-training: surrogate keypoint detectors,
//! the self-supervised and cross-supervision losses with their gradient
//! routing, SGD with momentum and weight decay, supervised pre-training,
//! and the self-training loop itself.
//!
//! Gradient contract: the keypoint correction is treated as a constant
//! during backpropagation (detector gradients flow through the corrected
//! keypoints with unit sensitivity), the closed-form registration is
//! differentiated analytically, nearest-neighbor correspondences are frozen
//! per gradient evaluation and re-associated each iteration, and each
//! cross-supervision term trains only the model it is a function of, never
//! the model providing the target pose.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3xX, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificates::{
    observable_correctness_with_tree, CameraIntrinsics, CertificateConfig, CertificateResult,
};
use crate::corrector::{solve_correction_with_tree, CorrectionResult, CorrectorConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    nearest_distances, registration_with_diff, tls, CadModel, KeypointSet, PointCloud, Pose,
};
use crate::kdtree::KdTree3;
use crate::robust_points::{fps_indices, fps_indices_from, robust_centroid, GncConfig};
use crate::synth::{derive_seed, SceneSample};

/// Fixed FPS subsample size feeding the detector descriptor.
pub const DESCRIPTOR_SAMPLE: usize = 64;
/// Hidden width of the detector regressor.
pub const DETECTOR_HIDDEN: usize = 64;

/// A small trainable keypoint regressor: the input point cloud is reduced
/// to a translation-invariant descriptor (robust centroid frame
/// concatenated with a farthest-point subsample in that frame), and two
/// affine layers with a rectifier regress per-keypoint offsets from the
/// centroid. Outputs are translation-equivariant by construction.
#[derive(Debug, Clone)]
pub struct DetectorParams {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub model_id: String,
    /// Seeds the farthest-point subsample stream.
    pub seed: u64,
    /// TLS clamp for the robust-centroid computation, in meters.
    pub centroid_clamp: f64,
    pub n_keypoints: usize,
}

impl DetectorParams {
    pub fn descriptor_size() -> usize {
        3 + 3 * DESCRIPTOR_SAMPLE
    }

    /// Zero-initialized regressor: every detection sits at the robust
    /// centroid.
    pub fn zeroed(n_keypoints: usize, model_id: &str, seed: u64, centroid_clamp: f64) -> Self {
        let input = Self::descriptor_size();
        DetectorParams {
            w1: DMatrix::zeros(DETECTOR_HIDDEN, input),
            b1: DVector::zeros(DETECTOR_HIDDEN),
            w2: DMatrix::zeros(3 * n_keypoints, DETECTOR_HIDDEN),
            b2: DVector::zeros(3 * n_keypoints),
            model_id: model_id.to_string(),
            seed,
            centroid_clamp,
            n_keypoints,
        }
    }

    /// Random initialization scaled by fan-in.
    pub fn init(n_keypoints: usize, model_id: &str, seed: u64, centroid_clamp: f64) -> Self {
        let mut params = Self::zeroed(n_keypoints, model_id, seed, centroid_clamp);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x696E6974));
        let a1 = 1.0 / (Self::descriptor_size() as f64).sqrt();
        for v in params.w1.iter_mut() {
            *v = rng.random_range(-a1..a1);
        }
        let a2 = 1.0 / (DETECTOR_HIDDEN as f64).sqrt();
        for v in params.w2.iter_mut() {
            *v = rng.random_range(-a2..a2);
        }
        params
    }

    fn shapes_match(&self, other: &DetectorGrads) -> bool {
        self.w1.shape() == other.w1.shape()
            && self.b1.len() == other.b1.len()
            && self.w2.shape() == other.w2.shape()
            && self.b2.len() == other.b2.len()
    }

    /// Little-endian f32 weight dump behind a single-line JSON header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = DetectorHeader {
            input: self.w1.ncols(),
            hidden: DETECTOR_HIDDEN,
            output: self.b2.len(),
            model_id: self.model_id.clone(),
            seed: self.seed,
            centroid_clamp: self.centroid_clamp,
            n_keypoints: self.n_keypoints,
        };
        let mut buf = serde_json::to_vec(&header)?;
        buf.push(b'\n');
        for m in [self.w1.as_slice(), self.b1.as_slice(), self.w2.as_slice(), self.b2.as_slice()] {
            for v in m {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path)?;
        let newline = data
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse(format!("{}: missing header", path.display())))?;
        let header: DetectorHeader = serde_json::from_slice(&data[..newline])?;
        let counts = [
            DETECTOR_HIDDEN * header.input,
            DETECTOR_HIDDEN,
            header.output * DETECTOR_HIDDEN,
            header.output,
        ];
        let expected = counts.iter().sum::<usize>() * 4;
        let body = &data[newline + 1..];
        if body.len() != expected {
            return Err(Error::Parse(format!(
                "{}: expected {expected} weight bytes, got {}",
                path.display(),
                body.len()
            )));
        }
        let mut offset = 0usize;
        let mut take = |count: usize| {
            let vals: Vec<f64> = (0..count)
                .map(|i| {
                    let o = offset + i * 4;
                    f32::from_le_bytes([body[o], body[o + 1], body[o + 2], body[o + 3]]) as f64
                })
                .collect();
            offset += count * 4;
            vals
        };
        let w1 = DMatrix::from_vec(DETECTOR_HIDDEN, header.input, take(counts[0]));
        let b1 = DVector::from_vec(take(counts[1]));
        let w2 = DMatrix::from_vec(header.output, DETECTOR_HIDDEN, take(counts[2]));
        let b2 = DVector::from_vec(take(counts[3]));
        Ok(DetectorParams {
            w1,
            b1,
            w2,
            b2,
            model_id: header.model_id,
            seed: header.seed,
            centroid_clamp: header.centroid_clamp,
            n_keypoints: header.n_keypoints,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectorHeader {
    input: usize,
    hidden: usize,
    output: usize,
    model_id: String,
    seed: u64,
    centroid_clamp: f64,
    n_keypoints: usize,
}

/// Gradient (or momentum velocity) with the same shape as the parameters.
#[derive(Debug, Clone)]
pub struct DetectorGrads {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl DetectorGrads {
    pub fn zeros_like(params: &DetectorParams) -> Self {
        DetectorGrads {
            w1: DMatrix::zeros(params.w1.nrows(), params.w1.ncols()),
            b1: DVector::zeros(params.b1.len()),
            w2: DMatrix::zeros(params.w2.nrows(), params.w2.ncols()),
            b2: DVector::zeros(params.b2.len()),
        }
    }

    pub fn add_assign(&mut self, other: &DetectorGrads) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    pub fn scale(&mut self, factor: f64) {
        self.w1 *= factor;
        self.b1 *= factor;
        self.w2 *= factor;
        self.b2 *= factor;
    }

    pub fn is_zero(&self) -> bool {
        self.w1.iter().all(|v| *v == 0.0)
            && self.b1.iter().all(|v| *v == 0.0)
            && self.w2.iter().all(|v| *v == 0.0)
            && self.b2.iter().all(|v| *v == 0.0)
    }
}

/// SGD hyperparameters (also used for the pre-training epochs).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-2,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 20,
            epochs: 40,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput("momentum must be in [0,1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidInput("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// SGD with momentum and weight decay:
/// `v ← momentum·v + g + weight_decay·θ`, `θ ← θ − lr·v`.
pub fn grad_step(
    params: &mut DetectorParams,
    gradient: &DetectorGrads,
    cfg: &TrainConfig,
    velocity: &mut DetectorGrads,
) {
    assert!(params.shapes_match(gradient) && params.shapes_match(velocity));
    let step = |p: &mut f64, g: f64, v: &mut f64| {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= cfg.learning_rate * *v;
    };
    for ((p, g), v) in params
        .w1
        .iter_mut()
        .zip(gradient.w1.iter())
        .zip(velocity.w1.iter_mut())
    {
        step(p, *g, v);
    }
    for ((p, g), v) in params
        .b1
        .iter_mut()
        .zip(gradient.b1.iter())
        .zip(velocity.b1.iter_mut())
    {
        step(p, *g, v);
    }
    for ((p, g), v) in params
        .w2
        .iter_mut()
        .zip(gradient.w2.iter())
        .zip(velocity.w2.iter_mut())
    {
        step(p, *g, v);
    }
    for ((p, g), v) in params
        .b2
        .iter_mut()
        .zip(gradient.b2.iter())
        .zip(velocity.b2.iter_mut())
    {
        step(p, *g, v);
    }
}

/// Intermediate state of one detector forward pass, kept for
/// backpropagation.
#[derive(Debug, Clone)]
pub struct DetectCache {
    pub descriptor: DVector<f64>,
    pub pre_activation: DVector<f64>,
    pub centroid: Vector3<f64>,
}

/// Runs the detector on a point cloud.
pub fn detect(params: &DetectorParams, x: &PointCloud) -> KeypointSet {
    detect_with_cache(params, x).0
}

/// [`detect`] returning the activations needed for backpropagation.
pub fn detect_with_cache(params: &DetectorParams, x: &PointCloud) -> (KeypointSet, DetectCache) {
    let gnc = GncConfig::new(params.centroid_clamp).expect("clamp validated at construction");
    let (centroid, _) = robust_centroid(x, &gnc);
    // Canonical subsample gauge: start the farthest-point chain at the
    // point most distant from the robust centroid (ties to the lowest
    // index), so the descriptor ordering is stable across similar views
    // instead of scrambling with the cloud size.
    let first = (0..x.len())
        .map(|i| (x.column(i) - centroid).norm_squared())
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let sample = fps_indices_from(x, DESCRIPTOR_SAMPLE.min(x.len()), first);
    let mut descriptor = DVector::zeros(DetectorParams::descriptor_size());
    // Leading block: the centroid expressed in its own frame (zero); the
    // rest is the subsample in centroid frame, in selection order. Short
    // clouds cycle their sample.
    for k in 0..DESCRIPTOR_SAMPLE {
        let idx = sample[k % sample.len()];
        let rel = x.column(idx) - centroid;
        for a in 0..3 {
            descriptor[3 + 3 * k + a] = rel[a];
        }
    }
    let pre_activation = &params.w1 * &descriptor + &params.b1;
    let hidden = pre_activation.map(|v| v.max(0.0));
    let out = &params.w2 * hidden + &params.b2;
    let mut kps = Matrix3xX::zeros(params.n_keypoints);
    for k in 0..params.n_keypoints {
        for a in 0..3 {
            kps[(a, k)] = centroid[a] + out[3 * k + a];
        }
    }
    (
        KeypointSet::new(kps).expect("detector output is finite"),
        DetectCache {
            descriptor,
            pre_activation,
            centroid,
        },
    )
}

/// Backpropagates a keypoint-space gradient (3×N) to parameter space.
pub fn detect_backward(
    params: &DetectorParams,
    cache: &DetectCache,
    keypoint_grad: &Matrix3xX<f64>,
) -> DetectorGrads {
    let out_dim = 3 * params.n_keypoints;
    let mut g_out = DVector::zeros(out_dim);
    for k in 0..params.n_keypoints {
        for a in 0..3 {
            g_out[3 * k + a] = keypoint_grad[(a, k)];
        }
    }
    let hidden = cache.pre_activation.map(|v| v.max(0.0));
    let gw2 = &g_out * hidden.transpose();
    let gb2 = g_out.clone();
    let mut gh = params.w2.transpose() * g_out;
    for (g, pre) in gh.iter_mut().zip(cache.pre_activation.iter()) {
        if *pre <= 0.0 {
            *g = 0.0;
        }
    }
    let gw1 = &gh * cache.descriptor.transpose();
    let gb1 = gh;
    DetectorGrads {
        w1: gw1,
        b1: gb1,
        w2: gw2,
        b2: gb2,
    }
}

/// Self-supervised loss: mean TLS residual between the input cloud and the
/// posed dense model.
pub fn loss_self(x: &PointCloud, t_hat: &Pose, model: &CadModel, c_bar: f64) -> f64 {
    let posed = crate::geometry::apply_pose(t_hat, &model.dense_cloud());
    nearest_distances(x, &posed)
        .values()
        .iter()
        .map(|&d| tls(d, c_bar))
        .sum::<f64>()
        / x.len() as f64
}

/// Cross-supervision loss: bidirectional mean squared closest-point
/// distance between the model posed at `t_hat` and at `t_prime`. As a value
/// it is symmetric in its arguments; as a gradient it flows only through
/// `t_hat`.
pub fn loss_sup(t_hat: &Pose, t_prime: &Pose, model: &CadModel) -> f64 {
    let a = crate::geometry::apply_pose(t_hat, &model.dense_cloud());
    let c = crate::geometry::apply_pose(t_prime, &model.dense_cloud());
    let m = model.dense_len() as f64;
    let forward: f64 = nearest_distances(&a, &c).values().iter().map(|d| d * d).sum();
    let backward: f64 = nearest_distances(&c, &a).values().iter().map(|d| d * d).sum();
    forward / m + backward / m
}

/// Frozen correspondences of the self loss: active (scene point, model
/// point) pairs plus the count of clamped points.
#[derive(Debug, Clone)]
pub struct FrozenSelf {
    pub pairs: Vec<(usize, usize)>,
    pub clamped: usize,
    pub total: usize,
    pub c_bar: f64,
}

/// Associates scene points to the model posed by registering `y_hat`,
/// freezing the correspondence and clamp sets at that pose.
pub fn freeze_self(
    x: &PointCloud,
    y_hat: &KeypointSet,
    model: &CadModel,
    model_tree: &KdTree3,
    c_bar: f64,
) -> Result<FrozenSelf> {
    let (pose, _) = registration_with_diff(y_hat, model.keypoints())?;
    let inv = pose.inverse();
    let cap_sq = c_bar * c_bar;
    let mut pairs = Vec::new();
    let mut clamped = 0usize;
    for i in 0..x.len() {
        let q = inv.transform_point(&x.column(i));
        let (d2, j) = model_tree.nearest_sq_within(&[q.x, q.y, q.z], cap_sq);
        if d2 < cap_sq {
            pairs.push((i, j as usize));
        } else {
            clamped += 1;
        }
    }
    Ok(FrozenSelf {
        pairs,
        clamped,
        total: x.len(),
        c_bar,
    })
}

/// Self loss with frozen correspondences, as a function of the corrected
/// keypoints (the registration stays live).
pub fn loss_self_frozen(
    y_hat: &KeypointSet,
    x: &PointCloud,
    model: &CadModel,
    frozen: &FrozenSelf,
) -> Result<f64> {
    let (pose, _) = registration_with_diff(y_hat, model.keypoints())?;
    let mut total = frozen.clamped as f64 * frozen.c_bar * frozen.c_bar;
    for &(i, j) in &frozen.pairs {
        let m = model.dense_points().column(j).into_owned();
        total += (pose.transform_point(&m) - x.column(i)).norm_squared();
    }
    Ok(total / frozen.total as f64)
}

/// Analytic gradient of [`loss_self_frozen`] with respect to the corrected
/// keypoints.
pub fn loss_self_frozen_grad(
    y_hat: &KeypointSet,
    x: &PointCloud,
    model: &CadModel,
    frozen: &FrozenSelf,
) -> Result<Matrix3xX<f64>> {
    let (pose, diff) = registration_with_diff(y_hat, model.keypoints())?;
    let n = frozen.total as f64;
    let rot = diff.rotation();
    let b_bar = diff.source_centroid();
    let mut g_t = Vector3::zeros();
    let mut g_omega = Vector3::zeros();
    for &(i, j) in &frozen.pairs {
        let m = model.dense_points().column(j).into_owned();
        let e = (pose.transform_point(&m) - x.column(i)) * (2.0 / n);
        g_t += e;
        g_omega += (rot * (m - b_bar)).cross(&e);
    }
    Ok(diff.chain_to_keypoints(&g_t, &g_omega))
}

/// Frozen correspondences of the cross-supervision loss, both directions.
#[derive(Debug, Clone)]
pub struct FrozenSup {
    /// For each model point index i: its nearest target-model index j.
    pub forward: Vec<usize>,
    /// For each target point index j: its nearest model index i.
    pub backward: Vec<usize>,
}

/// Freezes both chamfer directions between the model posed by `y_hat` and
/// the model posed at `t_prime`.
pub fn freeze_sup(
    y_hat: &KeypointSet,
    t_prime: &Pose,
    model: &CadModel,
    model_tree: &KdTree3,
) -> Result<FrozenSup> {
    let (pose, _) = registration_with_diff(y_hat, model.keypoints())?;
    let m = model.dense_len();
    let into_target = t_prime.inverse();
    let into_hat = pose.inverse();
    let mut forward = Vec::with_capacity(m);
    let mut backward = Vec::with_capacity(m);
    for i in 0..m {
        let a = pose.transform_point(&model.dense_points().column(i).into_owned());
        let q = into_target.transform_point(&a);
        forward.push(model_tree.nearest_sq(&[q.x, q.y, q.z]).1 as usize);
    }
    for j in 0..m {
        let c = t_prime.transform_point(&model.dense_points().column(j).into_owned());
        let q = into_hat.transform_point(&c);
        backward.push(model_tree.nearest_sq(&[q.x, q.y, q.z]).1 as usize);
    }
    Ok(FrozenSup { forward, backward })
}

/// Cross-supervision loss with frozen correspondences, as a function of the
/// corrected keypoints behind `t_hat`.
pub fn loss_sup_frozen(
    y_hat: &KeypointSet,
    t_prime: &Pose,
    model: &CadModel,
    frozen: &FrozenSup,
) -> Result<f64> {
    let (pose, _) = registration_with_diff(y_hat, model.keypoints())?;
    let m = model.dense_len() as f64;
    let mut total = 0.0;
    for (i, &j) in frozen.forward.iter().enumerate() {
        let a = pose.transform_point(&model.dense_points().column(i).into_owned());
        let c = t_prime.transform_point(&model.dense_points().column(j).into_owned());
        total += (a - c).norm_squared() / m;
    }
    for (j, &i) in frozen.backward.iter().enumerate() {
        let a = pose.transform_point(&model.dense_points().column(i).into_owned());
        let c = t_prime.transform_point(&model.dense_points().column(j).into_owned());
        total += (a - c).norm_squared() / m;
    }
    Ok(total)
}

/// Analytic gradient of [`loss_sup_frozen`] with respect to the corrected
/// keypoints behind the first pose. Nothing flows into `t_prime`.
pub fn loss_sup_frozen_grad(
    y_hat: &KeypointSet,
    t_prime: &Pose,
    model: &CadModel,
    frozen: &FrozenSup,
) -> Result<Matrix3xX<f64>> {
    let (pose, diff) = registration_with_diff(y_hat, model.keypoints())?;
    let m = model.dense_len() as f64;
    let rot = diff.rotation();
    let b_bar = diff.source_centroid();
    let mut g_t = Vector3::zeros();
    let mut g_omega = Vector3::zeros();
    let mut add_pair = |i: usize, j: usize| {
        let mp = model.dense_points().column(i).into_owned();
        let a = pose.transform_point(&mp);
        let c = t_prime.transform_point(&model.dense_points().column(j).into_owned());
        let e = (a - c) * (2.0 / m);
        g_t += e;
        g_omega += (rot * (mp - b_bar)).cross(&e);
    };
    for (i, &j) in frozen.forward.iter().enumerate() {
        add_pair(i, j);
    }
    for (j, &i) in frozen.backward.iter().enumerate() {
        add_pair(i, j);
    }
    Ok(diff.chain_to_keypoints(&g_t, &g_omega))
}

/// Value of the certificate-gated ensemble loss for one input:
/// `Σₖ oc(X, T̂ᵏ) · [loss_self(X, T̂ᵏ) + Σ_{k′≠k} loss_sup(T̂^{k′}, T̂ᵏ)]`.
pub fn ensemble_loss(
    instances: &[(CertificateResult, Pose)],
    x: &PointCloud,
    model: &CadModel,
    c_bar: f64,
) -> f64 {
    let mut total = 0.0;
    for (k, (cert, pose_k)) in instances.iter().enumerate() {
        if !cert.oc {
            continue;
        }
        total += loss_self(x, pose_k, model, c_bar);
        for (k2, (_, pose_k2)) in instances.iter().enumerate() {
            if k2 != k {
                total += loss_sup(pose_k2, pose_k, model);
            }
        }
    }
    total
}

/// One ensemble member for gradient routing: its certificate and corrected
/// output.
pub struct EnsembleMember<'a> {
    pub cert: &'a CertificateResult,
    pub corrected_pose: &'a Pose,
    pub corrected_keypoints: &'a KeypointSet,
}

/// Per-model gradients of the ensemble loss with respect to each model's
/// corrected keypoints (correction frozen). `None` marks a model no gated
/// term touches. Each cross term `loss_sup(T̂^{k′}, T̂ᵏ)` routes its
/// gradient to model k′ only; the gating certificate belongs to the model
/// providing the target.
pub fn ensemble_keypoint_gradients(
    members: &[EnsembleMember],
    x: &PointCloud,
    model: &CadModel,
    c_bar: f64,
) -> Result<Vec<Option<Matrix3xX<f64>>>> {
    let tree = model.dense_tree();
    let mut grads: Vec<Option<Matrix3xX<f64>>> = vec![None; members.len()];
    for (k, member) in members.iter().enumerate() {
        if !member.cert.oc {
            continue;
        }
        let frozen = freeze_self(x, member.corrected_keypoints, model, &tree, c_bar)?;
        let g_self = loss_self_frozen_grad(member.corrected_keypoints, x, model, &frozen)?;
        accumulate(&mut grads[k], &g_self);
        for (k2, other) in members.iter().enumerate() {
            if k2 == k {
                continue;
            }
            let frozen = freeze_sup(other.corrected_keypoints, member.corrected_pose, model, &tree)?;
            let g_sup = loss_sup_frozen_grad(
                other.corrected_keypoints,
                member.corrected_pose,
                model,
                &frozen,
            )?;
            accumulate(&mut grads[k2], &g_sup);
        }
    }
    Ok(grads)
}

/// Per-iteration training record. The pose-accuracy column is computed
/// against ground truth for monitoring only and never feeds a gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub oc_fraction: Vec<f64>,
    pub mean_self_loss: f64,
    pub mean_sup_loss: f64,
    pub eval_adds_norm: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let models = self.rows.first().map_or(0, |r| r.oc_fraction.len());
        let mut out = String::new();
        out.push_str("iteration");
        for k in 0..models {
            out.push_str(&format!(",oc_frac_m{}", k + 1));
        }
        out.push_str(",self_loss,sup_loss,eval_adds_norm\n");
        for row in &self.rows {
            out.push_str(&row.iteration.to_string());
            for v in &row.oc_fraction {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(
                ",{},{},{}\n",
                row.mean_self_loss, row.mean_sup_loss, row.eval_adds_norm
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Mean combined oc fraction over the first `window` rows.
    pub fn initial_oc(&self, window: usize) -> f64 {
        Self::mean_oc(self.rows.iter().take(window))
    }

    /// Mean combined oc fraction over the last `window` rows.
    pub fn final_oc(&self, window: usize) -> f64 {
        let skip = self.rows.len().saturating_sub(window);
        Self::mean_oc(self.rows.iter().skip(skip))
    }

    fn mean_oc<'a>(rows: impl Iterator<Item = &'a TrainLogRow>) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for row in rows {
            if !row.oc_fraction.is_empty() {
                total +=
                    row.oc_fraction.iter().sum::<f64>() / row.oc_fraction.len() as f64;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// Everything the self-training loop needs per scene and model, produced by
/// the parallel forward pass.
struct ModelForward {
    cert: CertificateResult,
    correction: CorrectionResult,
    cache: DetectCache,
}

struct SceneForward {
    per_model: Vec<ModelForward>,
    eval_adds_norm: f64,
}

/// Inference output of the ensemble: the first observably correct corrected
/// pose in declared model order, else the corrected pose of the first
/// model.
pub fn ensemble_infer(
    detectors: &[DetectorParams],
    x: &PointCloud,
    detected_mask: &crate::certificates::BinaryMask,
    model: &CadModel,
    camera: &CameraIntrinsics,
    corrector_cfg: &CorrectorConfig,
    cert_cfg: &CertificateConfig,
) -> Result<(Pose, Option<usize>)> {
    let tree = model.dense_tree();
    let mut fallback = None;
    for (k, params) in detectors.iter().enumerate() {
        let y_tilde = detect(params, x);
        let res = solve_correction_with_tree(&y_tilde, model, &tree, x, corrector_cfg)?;
        let cert = observable_correctness_with_tree(
            x,
            detected_mask,
            &res.corrected_pose,
            model,
            &tree,
            camera,
            cert_cfg,
        )?;
        if cert.oc {
            return Ok((res.corrected_pose, Some(k)));
        }
        if fallback.is_none() {
            fallback = Some(res.corrected_pose);
        }
    }
    Ok((fallback.expect("at least one detector"), None))
}

/// Supervised pre-training: minimizes the mean squared keypoint error
/// against ground-truth keypoints by SGD. Returns the trained parameters
/// and the per-epoch mean loss.
pub fn pretrain_supervised(
    mut params: DetectorParams,
    scenes: &[SceneSample],
    cfg: &TrainConfig,
) -> Result<(DetectorParams, Vec<f64>)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidInput("no pre-training scenes".into()));
    }
    let mut velocity = DetectorGrads::zeros_like(&params);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let outputs: Vec<(f64, DetectorGrads)> = chunk
                .par_iter()
                .map(|&si| {
                    let scene = &scenes[si];
                    let (y_tilde, cache) = detect_with_cache(&params, &scene.x);
                    let n = params.n_keypoints as f64;
                    let residual = y_tilde.points() - scene.y_star.points();
                    let loss = residual.norm_squared() / n;
                    let kp_grad = residual * (2.0 / n);
                    (loss, detect_backward(&params, &cache, &kp_grad))
                })
                .collect();
            let mut grad = DetectorGrads::zeros_like(&params);
            let mut batch_loss = 0.0;
            for (loss, g) in &outputs {
                batch_loss += loss;
                grad.add_assign(g);
            }
            grad.scale(1.0 / chunk.len() as f64);
            epoch_loss += batch_loss;
            grad_step(&mut params, &grad, cfg, &mut velocity);
        }
        epoch_losses.push(epoch_loss / scenes.len() as f64);
    }
    Ok((params, epoch_losses))
}

/// Certificate-gated ensemble self-training over a pool of unlabeled
/// scenes (ground truth in the samples is read only for the monitoring
/// column of the log).
///
/// Per iteration: a seeded batch is drawn with replacement; each detector
/// runs detect → correct → certify per scene; the gated ensemble loss
/// produces per-model keypoint gradients (correction frozen) which
/// backpropagate into each detector; models whose accumulated gradient is
/// identically zero are left untouched, so zero-certificate batches change
/// nothing.
#[allow(clippy::too_many_arguments)]
pub fn self_train(
    mut detectors: Vec<DetectorParams>,
    scenes: &[SceneSample],
    model: &CadModel,
    camera: &CameraIntrinsics,
    corrector_cfg: &CorrectorConfig,
    cert_cfg: &CertificateConfig,
    train_cfg: &TrainConfig,
    iterations: usize,
) -> Result<(Vec<DetectorParams>, TrainLog)> {
    train_cfg.validate()?;
    corrector_cfg.validate()?;
    cert_cfg.validate()?;
    if detectors.is_empty() {
        return Err(Error::InvalidInput("need at least one detector".into()));
    }
    if scenes.is_empty() {
        return Err(Error::InvalidInput("need at least one scene".into()));
    }
    let tree = model.dense_tree();
    // Reduced model for cross-supervision terms and the monitoring metric;
    // farthest-point ordering keeps the extremes, so the subsample spans
    // the full object.
    let eval_indices = fps_indices(&model.dense_cloud(), 192.min(model.dense_len()), 1);
    let eval_points: Vec<Vector3<f64>> = eval_indices
        .iter()
        .map(|&i| model.dense_points().column(i).into_owned())
        .collect();
    let sup_indices = fps_indices(&model.dense_cloud(), 256.min(model.dense_len()), 2);
    let sup_cols: Vec<Vector3<f64>> = sup_indices
        .iter()
        .map(|&i| model.dense_points().column(i).into_owned())
        .collect();
    let sup_model = CadModel::with_diameter(
        Matrix3xX::from_columns(&sup_cols),
        model.keypoints().clone(),
        model.diameter(),
    )?;
    let sup_tree = sup_model.dense_tree();

    let k_models = detectors.len();
    let mut velocities: Vec<DetectorGrads> =
        detectors.iter().map(DetectorGrads::zeros_like).collect();
    let mut log = TrainLog::default();

    for it in 0..iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.seed, it as u64));
        let batch: Vec<usize> = (0..train_cfg.batch_size)
            .map(|_| rng.random_range(0..scenes.len()))
            .collect();

        let forwards: Vec<SceneForward> = batch
            .par_iter()
            .map(|&si| forward_scene(&detectors, &scenes[si], model, &tree, camera, corrector_cfg, cert_cfg, &eval_points))
            .collect::<Result<Vec<_>>>()?;

        // Gated gradients, reduced in batch order.
        let mut grads: Vec<DetectorGrads> =
            detectors.iter().map(DetectorGrads::zeros_like).collect();
        let mut oc_counts = vec![0usize; k_models];
        let mut self_loss_sum = 0.0;
        let mut self_loss_count = 0usize;
        let mut sup_loss_sum = 0.0;
        let mut sup_loss_count = 0usize;
        let mut eval_sum = 0.0;

        let scene_grads: Vec<Vec<Option<DetectorGrads>>> = batch
            .par_iter()
            .zip(&forwards)
            .map(|(&si, fwd)| {
                scene_gradients(
                    &detectors,
                    &scenes[si],
                    fwd,
                    model,
                    &tree,
                    &sup_model,
                    &sup_tree,
                    corrector_cfg.c_bar,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        // Loss bookkeeping reuses the sequential pass for deterministic
        // accumulation.
        for (fwd, per_scene) in forwards.iter().zip(&scene_grads) {
            eval_sum += fwd.eval_adds_norm;
            for (k, mf) in fwd.per_model.iter().enumerate() {
                if mf.cert.oc {
                    oc_counts[k] += 1;
                    self_loss_sum += mf.correction.final_objective;
                    self_loss_count += 1;
                    for k2 in 0..k_models {
                        if k2 != k {
                            sup_loss_sum += eval_pose_distance(
                                &fwd.per_model[k2].correction.corrected_pose,
                                &mf.correction.corrected_pose,
                                &eval_points,
                            );
                            sup_loss_count += 1;
                        }
                    }
                }
            }
            for (k, g) in per_scene.iter().enumerate() {
                if let Some(g) = g {
                    grads[k].add_assign(g);
                }
            }
        }

        for k in 0..k_models {
            if grads[k].is_zero() {
                continue;
            }
            grads[k].scale(1.0 / train_cfg.batch_size as f64);
            grad_step(&mut detectors[k], &grads[k], train_cfg, &mut velocities[k]);
        }

        log.rows.push(TrainLogRow {
            iteration: it,
            oc_fraction: oc_counts
                .iter()
                .map(|&c| c as f64 / train_cfg.batch_size as f64)
                .collect(),
            mean_self_loss: if self_loss_count > 0 {
                self_loss_sum / self_loss_count as f64
            } else {
                0.0
            },
            mean_sup_loss: if sup_loss_count > 0 {
                sup_loss_sum / sup_loss_count as f64
            } else {
                0.0
            },
            eval_adds_norm: eval_sum / train_cfg.batch_size as f64,
        });
    }
    Ok((detectors, log))
}

/// Mean closest-point distance between the eval subsample posed two ways
/// (monitoring metric; brute force over the reduced sample).
fn eval_pose_distance(a: &Pose, b: &Pose, eval_points: &[Vector3<f64>]) -> f64 {
    let posed_a: Vec<Vector3<f64>> = eval_points.iter().map(|p| a.transform_point(p)).collect();
    let posed_b: Vec<Vector3<f64>> = eval_points.iter().map(|p| b.transform_point(p)).collect();
    let mut total = 0.0;
    for pa in &posed_a {
        let mut best = f64::INFINITY;
        for pb in &posed_b {
            best = best.min((pa - pb).norm_squared());
        }
        total += best.sqrt();
    }
    total / posed_a.len() as f64
}

#[allow(clippy::too_many_arguments)]
fn forward_scene(
    detectors: &[DetectorParams],
    scene: &SceneSample,
    model: &CadModel,
    tree: &KdTree3,
    camera: &CameraIntrinsics,
    corrector_cfg: &CorrectorConfig,
    cert_cfg: &CertificateConfig,
    eval_points: &[Vector3<f64>],
) -> Result<SceneForward> {
    let mut per_model = Vec::with_capacity(detectors.len());
    let mut eval_total = 0.0;
    for params in detectors {
        let (y_tilde, cache) = detect_with_cache(params, &scene.x);
        let correction = solve_correction_with_tree(&y_tilde, model, tree, &scene.x, corrector_cfg)?;
        let cert = observable_correctness_with_tree(
            &scene.x,
            &scene.mask,
            &correction.corrected_pose,
            model,
            tree,
            camera,
            cert_cfg,
        )?;
        eval_total +=
            eval_pose_distance(&correction.corrected_pose, &scene.t_star, eval_points)
                / model.diameter();
        per_model.push(ModelForward {
            cert,
            correction,
            cache,
        });
    }
    Ok(SceneForward {
        eval_adds_norm: eval_total / detectors.len() as f64,
        per_model,
    })
}

/// Gated per-model parameter gradients for one scene. The self-loss clamp
/// matches the corrector clamp.
fn scene_gradients(
    detectors: &[DetectorParams],
    scene: &SceneSample,
    fwd: &SceneForward,
    model: &CadModel,
    tree: &KdTree3,
    sup_model: &CadModel,
    sup_tree: &KdTree3,
    c_bar: f64,
) -> Result<Vec<Option<DetectorGrads>>> {
    let k_models = detectors.len();
    let mut kp_grads: Vec<Option<Matrix3xX<f64>>> = vec![None; k_models];
    for (k, mf) in fwd.per_model.iter().enumerate() {
        if !mf.cert.oc {
            continue;
        }
        // Self term on the certified model.
        let y_hat_k = &mf.correction.corrected_keypoints;
        let frozen = freeze_self(&scene.x, y_hat_k, model, tree, c_bar)?;
        let g_self = loss_self_frozen_grad(y_hat_k, &scene.x, model, &frozen)?;
        accumulate(&mut kp_grads[k], &g_self);
        // Cross terms: every other model is pulled toward this certified
        // pose. The reduced model keeps the chamfer affordable in the loop.
        for (k2, mf2) in fwd.per_model.iter().enumerate() {
            if k2 == k {
                continue;
            }
            let y_hat_k2 = &mf2.correction.corrected_keypoints;
            let frozen = freeze_sup(y_hat_k2, &mf.correction.corrected_pose, sup_model, sup_tree)?;
            let g_sup = loss_sup_frozen_grad(
                y_hat_k2,
                &mf.correction.corrected_pose,
                sup_model,
                &frozen,
            )?;
            accumulate(&mut kp_grads[k2], &g_sup);
        }
    }
    let grads = detectors
        .iter()
        .zip(&fwd.per_model)
        .zip(kp_grads)
        .map(|((params, mf), kp)| kp.map(|g| detect_backward(params, &mf.cache, &g)))
        .collect();
    Ok(grads)
}

fn accumulate(slot: &mut Option<Matrix3xX<f64>>, grad: &Matrix3xX<f64>) {
    match slot {
        Some(g) => *g += grad,
        None => *slot = Some(grad.clone()),
    }
}
