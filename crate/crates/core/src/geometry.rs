//! SE(3) pose and point-set types, outlier-free keypoint registration with
//! its analytic differential, the truncated-least-squares loss,
//! nearest-neighbor score sets, and pose-accuracy metrics.
//!
//! Everything here is a pure function over immutable inputs and safe to call
//! concurrently.

use nalgebra::{DMatrix, Matrix3, Matrix3xX, Vector3};

use crate::error::{Error, Result};
use crate::kdtree::{dist_sq, KdTree3};

/// Elementwise tolerance for rotation orthonormality and determinant checks.
pub const ROTATION_TOL: f64 = 1e-9;

/// Number of pairs above which [`nearest_distances`] switches from the
/// brute-force scan to a kd-tree. Results are bit-identical either way.
pub const BRUTE_FORCE_PAIR_LIMIT: usize = 1_000_000;

/// A rigid transform: orthonormal rotation (det = +1) plus translation in
/// meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    /// Validates orthonormality and determinant to [`ROTATION_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((gram[(i, j)] - target).abs());
            }
        }
        if max_dev > ROTATION_TOL {
            return Err(Error::InvalidInput(format!(
                "rotation is not orthonormal (deviation {max_dev:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidInput(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about a unit axis by `angle` radians (Rodrigues formula).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let a = axis.normalize();
        let k = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
        let rotation = Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
        Pose {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Composition: `self` applied after `other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Frobenius rotation distance plus translation L2 distance, used by
    /// round-trip tests.
    pub fn error_to(&self, other: &Pose) -> (f64, f64) {
        (
            (self.rotation - other.rotation).norm(),
            (self.translation - other.translation).norm(),
        )
    }
}

/// JSON-friendly pose record (row-major rotation).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PoseJson {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseJson {
    fn from(pose: &Pose) -> Self {
        let r = pose.rotation();
        PoseJson {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [
                pose.translation()[0],
                pose.translation()[1],
                pose.translation()[2],
            ],
        }
    }
}

impl TryFrom<&PoseJson> for Pose {
    type Error = Error;

    fn try_from(js: &PoseJson) -> Result<Pose> {
        let r = Matrix3::from_fn(|i, j| js.rotation[i][j]);
        let t = Vector3::new(js.translation[0], js.translation[1], js.translation[2]);
        Pose::new(r, t)
    }
}

/// A 3×n point set in meters with optional d×n per-point features
/// (RGB-like features use d = 3, values in [0, 1]).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Matrix3xX<f64>,
    features: Option<DMatrix<f64>>,
}

impl PointCloud {
    pub fn new(points: Matrix3xX<f64>) -> Result<Self> {
        Self::with_features(points, None)
    }

    pub fn with_features(points: Matrix3xX<f64>, features: Option<DMatrix<f64>>) -> Result<Self> {
        if points.ncols() == 0 {
            return Err(Error::InvalidInput("point cloud must be non-empty".into()));
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(
                "point cloud contains non-finite coordinates".into(),
            ));
        }
        if let Some(f) = &features {
            if f.ncols() != points.ncols() {
                return Err(Error::DimensionMismatch {
                    what: "feature columns",
                    expected: points.ncols(),
                    actual: f.ncols(),
                });
            }
            if !f.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(
                    "features contain non-finite values".into(),
                ));
            }
        }
        Ok(PointCloud { points, features })
    }

    pub fn from_columns(cols: &[Vector3<f64>]) -> Result<Self> {
        Self::new(Matrix3xX::from_columns(cols))
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &Matrix3xX<f64> {
        &self.points
    }

    pub fn features(&self) -> Option<&DMatrix<f64>> {
        self.features.as_ref()
    }

    #[inline]
    pub fn column(&self, i: usize) -> Vector3<f64> {
        self.points.column(i).into_owned()
    }

    pub(crate) fn to_arrays(&self) -> Vec<[f64; 3]> {
        (0..self.len())
            .map(|i| [self.points[(0, i)], self.points[(1, i)], self.points[(2, i)]])
            .collect()
    }

    /// Column subset in the given index order; features follow.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("empty selection".into()));
        }
        let pts = Matrix3xX::from_columns(
            &indices
                .iter()
                .map(|&i| self.points.column(i).into_owned())
                .collect::<Vec<_>>(),
        );
        let feats = self.features.as_ref().map(|f| {
            let cols: Vec<_> = indices.iter().map(|&i| f.column(i).into_owned()).collect();
            DMatrix::from_columns(&cols)
        });
        PointCloud::with_features(pts, feats)
    }
}

/// N ≥ 3 annotated or detected keypoints, 3×N in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: Matrix3xX<f64>,
}

impl KeypointSet {
    pub fn new(points: Matrix3xX<f64>) -> Result<Self> {
        if points.ncols() < 3 {
            return Err(Error::InvalidInput(format!(
                "keypoint set needs at least 3 points, got {}",
                points.ncols()
            )));
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(
                "keypoints contain non-finite coordinates".into(),
            ));
        }
        Ok(KeypointSet { points })
    }

    pub fn from_columns(cols: &[Vector3<f64>]) -> Result<Self> {
        Self::new(Matrix3xX::from_columns(cols))
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &Matrix3xX<f64> {
        &self.points
    }

    #[inline]
    pub fn column(&self, i: usize) -> Vector3<f64> {
        self.points.column(i).into_owned()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let n = self.len() as f64;
        self.points.column_sum() / n
    }

    /// Elementwise sum, used to apply a keypoint correction.
    pub fn offset_by(&self, delta: &Matrix3xX<f64>) -> Result<KeypointSet> {
        if delta.ncols() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "keypoint correction columns",
                expected: self.len(),
                actual: delta.ncols(),
            });
        }
        KeypointSet::new(&self.points + delta)
    }
}

/// The known-object prior: a dense surface sample, its annotated keypoints,
/// and the object diameter (max pairwise distance over the dense sample).
#[derive(Debug, Clone)]
pub struct CadModel {
    dense_points: Matrix3xX<f64>,
    keypoints: KeypointSet,
    diameter: f64,
}

impl CadModel {
    /// Computes the diameter from the dense sample.
    pub fn new(dense_points: Matrix3xX<f64>, keypoints: KeypointSet) -> Result<Self> {
        let diameter = max_pairwise_distance(&dense_points)?;
        Self::with_diameter(dense_points, keypoints, diameter)
    }

    /// Uses a caller-provided diameter (e.g. from a model sidecar file).
    pub fn with_diameter(
        dense_points: Matrix3xX<f64>,
        keypoints: KeypointSet,
        diameter: f64,
    ) -> Result<Self> {
        if dense_points.ncols() == 0 {
            return Err(Error::InvalidInput("dense sample must be non-empty".into()));
        }
        if !dense_points.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(
                "dense sample contains non-finite coordinates".into(),
            ));
        }
        if !(diameter.is_finite() && diameter > 0.0) {
            return Err(Error::InvalidInput(format!(
                "diameter must be positive, got {diameter}"
            )));
        }
        // Keypoints sit on or near the surface: never farther than the
        // diameter from any dense point (tolerance absorbs the case where a
        // keypoint coincides with a diameter endpoint).
        let tol = diameter * 1e-9 + 1e-12;
        for k in 0..keypoints.len() {
            let kp = keypoints.column(k);
            for j in 0..dense_points.ncols() {
                let d = (kp - dense_points.column(j)).norm();
                if d > diameter + tol {
                    return Err(Error::InvalidInput(format!(
                        "keypoint {k} lies {d:.6} m from a dense point, beyond the diameter {diameter:.6} m"
                    )));
                }
            }
        }
        Ok(CadModel {
            dense_points,
            keypoints,
            diameter,
        })
    }

    pub fn dense_points(&self) -> &Matrix3xX<f64> {
        &self.dense_points
    }

    pub fn dense_len(&self) -> usize {
        self.dense_points.ncols()
    }

    pub fn keypoints(&self) -> &KeypointSet {
        &self.keypoints
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn dense_cloud(&self) -> PointCloud {
        PointCloud::new(self.dense_points.clone()).expect("dense sample is validated")
    }

    /// kd-tree over the dense sample in the model frame. Distances to a
    /// posed model can then be computed by moving queries into the model
    /// frame, which is how the corrector avoids rebuilding trees per pose.
    pub fn dense_tree(&self) -> KdTree3 {
        let pts: Vec<[f64; 3]> = (0..self.dense_len())
            .map(|i| {
                [
                    self.dense_points[(0, i)],
                    self.dense_points[(1, i)],
                    self.dense_points[(2, i)],
                ]
            })
            .collect();
        KdTree3::build(&pts)
    }
}

/// Exact max pairwise distance for samples up to 16384 points; above that
/// the candidate set is reduced with farthest-point sampling first (extreme
/// points are selected almost immediately, so the result is exact for any
/// realistic surface sample).
pub fn max_pairwise_distance(points: &Matrix3xX<f64>) -> Result<f64> {
    let n = points.ncols();
    if n == 0 {
        return Err(Error::InvalidInput("empty point set".into()));
    }
    let cols: Vec<Vector3<f64>> = (0..n).map(|i| points.column(i).into_owned()).collect();
    let candidates: Vec<Vector3<f64>> = if n <= 16384 {
        cols
    } else {
        farthest_point_indices(&cols, 4096)
            .into_iter()
            .map(|i| cols[i])
            .collect()
    };
    let mut best: f64 = 0.0;
    for i in 0..candidates.len() {
        for j in (i + 1)..candidates.len() {
            let d2 = (candidates[i] - candidates[j]).norm_squared();
            if d2 > best {
                best = d2;
            }
        }
    }
    Ok(best.sqrt())
}

/// Greedy farthest-point ordering starting from index 0 (internal helper for
/// diameter estimation; the seeded public variant lives in `robust_points`).
fn farthest_point_indices(points: &[Vector3<f64>], count: usize) -> Vec<usize> {
    let n = points.len();
    let count = count.min(n);
    let mut selected = Vec::with_capacity(count);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = 0usize;
    selected.push(current);
    for _ in 1..count {
        let p = points[current];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, q) in points.iter().enumerate() {
            let d2 = (p - q).norm_squared();
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best.0 {
                best = (min_d2[i], i);
            }
        }
        current = best.1;
        selected.push(current);
    }
    selected
}

/// Nonnegative per-point distance scores in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidInput("score set must be non-empty".into()));
        }
        if !scores.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(Error::InvalidInput(
                "scores must be finite and nonnegative".into(),
            ));
        }
        Ok(ScoreSet { scores })
    }

    pub fn values(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Applies `pose` to every column; features carry through unchanged.
pub fn apply_pose(pose: &Pose, cloud: &PointCloud) -> PointCloud {
    let mut pts = cloud.points().clone();
    for mut col in pts.column_iter_mut() {
        let moved = pose.transform_point(&col.clone_owned());
        col.copy_from(&moved);
    }
    PointCloud {
        points: pts,
        features: cloud.features.clone(),
    }
}

/// Applies `pose` to every keypoint.
pub fn apply_pose_keypoints(pose: &Pose, kps: &KeypointSet) -> KeypointSet {
    let mut pts = kps.points().clone();
    for mut col in pts.column_iter_mut() {
        let moved = pose.transform_point(&col.clone_owned());
        col.copy_from(&moved);
    }
    KeypointSet { points: pts }
}

/// Truncated least squares loss: `min(z², c̄²)`.
#[inline]
pub fn tls(z: f64, c_bar: f64) -> f64 {
    debug_assert!(z >= 0.0 && c_bar > 0.0);
    (z * z).min(c_bar * c_bar)
}

/// Registration context retained for differentiating through the
/// closed-form solution (see [`registration_with_diff`]).
#[derive(Debug, Clone)]
pub struct RegistrationDiff {
    rotation: Matrix3<f64>,
    /// K = R·H − tr(R·H)·I, the implicit-function matrix for the rotation.
    k_matrix: Matrix3<f64>,
    b_centroid: Vector3<f64>,
    b_source: Matrix3xX<f64>,
    n_keypoints: usize,
}

impl RegistrationDiff {
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// Centroid of the registration source keypoints; the lever arm for
    /// rotation gradients is taken about this point.
    pub fn source_centroid(&self) -> &Vector3<f64> {
        &self.b_centroid
    }

    /// Chains a gradient on the rigid motion back to the 3×N source
    /// keypoints.
    ///
    /// Callers accumulate, over all cost terms that touch a moved point
    /// `R·m + t` with per-point cost gradient `e` (∂cost/∂(moved point)):
    ///   - `g_t = Σ e`
    ///   - `g_omega = Σ (R·(m − b̄)) × e`
    ///
    /// and receive ∂cost/∂y for the registration `T = register(y, b)`.
    pub fn chain_to_keypoints(&self, g_t: &Vector3<f64>, g_omega: &Vector3<f64>) -> Matrix3xX<f64> {
        let n = self.n_keypoints;
        let u = self
            .k_matrix
            .transpose()
            .try_inverse()
            .unwrap_or_else(|| pseudo_inverse(&self.k_matrix.transpose()))
            * g_omega;
        let mut grad = Matrix3xX::zeros(n);
        let g_t_mean = g_t / n as f64;
        for k in 0..n {
            let q = self.rotation * (self.b_source.column(k).clone_owned() - self.b_centroid);
            let g = q.cross(&u) + g_t_mean;
            grad.set_column(k, &g);
        }
        grad
    }
}

fn pseudo_inverse(m: &Matrix3<f64>) -> Matrix3<f64> {
    m.svd(true, true)
        .pseudo_inverse(1e-12)
        .unwrap_or_else(|_| Matrix3::zeros())
}

/// Closed-form least-squares registration: the pose minimizing
/// `Σᵢ ‖y[i] − T·b[i]‖²` via centroid subtraction, cross-covariance SVD and
/// the determinant-corrected rotation (sign of the last singular vector is
/// flipped when the determinant is negative).
pub fn register(y: &KeypointSet, b: &KeypointSet) -> Result<Pose> {
    registration_with_diff(y, b).map(|(pose, _)| pose)
}

/// [`register`] plus the context needed to differentiate through it.
pub fn registration_with_diff(
    y: &KeypointSet,
    b: &KeypointSet,
) -> Result<(Pose, RegistrationDiff)> {
    if y.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "keypoint correspondence count",
            expected: b.len(),
            actual: y.len(),
        });
    }
    let n = b.len();
    let y_bar = y.centroid();
    let b_bar = b.centroid();

    let mut b_centered = b.points().clone();
    for mut col in b_centered.column_iter_mut() {
        let c = col.clone_owned() - b_bar;
        col.copy_from(&c);
    }
    // Rotation is unique only when the centered source keypoints span at
    // least a plane.
    let sv = b_centered.clone().svd(false, false).singular_values;
    let (s0, s1) = (sv[0], sv[1]);
    if s1 <= s0 * 1e-10 {
        return Err(Error::DegenerateConfiguration(format!(
            "centered keypoints have rank < 2 (singular values {s0:.3e}, {s1:.3e})"
        )));
    }

    // Cross-covariance H = Σ (b − b̄)(y − ȳ)ᵀ, maximized trace tr(R·H).
    let mut h = Matrix3::zeros();
    for i in 0..n {
        let bc = b.column(i) - b_bar;
        let yc = y.column(i) - y_bar;
        h += bc * yc.transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| {
        Error::DegenerateConfiguration("SVD of cross-covariance failed".into())
    })?;
    let v_t = svd.v_t.ok_or_else(|| {
        Error::DegenerateConfiguration("SVD of cross-covariance failed".into())
    })?;
    let v = v_t.transpose();
    let mut rotation = v * u.transpose();
    if rotation.determinant() < 0.0 {
        let mut v_fixed = v;
        v_fixed.set_column(2, &(-v.column(2)));
        rotation = v_fixed * u.transpose();
    }
    let translation = y_bar - rotation * b_bar;
    let pose = Pose::new(rotation, translation)?;

    let m = rotation * h;
    let k_matrix = m - Matrix3::identity() * m.trace();
    Ok((
        pose,
        RegistrationDiff {
            rotation,
            k_matrix,
            b_centroid: b_bar,
            b_source: b.points().clone(),
            n_keypoints: n,
        },
    ))
}

/// Backend selection for [`nearest_distances_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NnBackend {
    /// Brute force below [`BRUTE_FORCE_PAIR_LIMIT`] pairs, kd-tree above.
    Auto,
    BruteForce,
    KdTree,
}

/// For each point of `x`, the distance to its nearest neighbor in `y`.
pub fn nearest_distances(x: &PointCloud, y: &PointCloud) -> ScoreSet {
    nearest_distances_with(x, y, NnBackend::Auto)
}

/// [`nearest_distances`] with an explicit backend; the two backends are
/// bit-identical.
pub fn nearest_distances_with(x: &PointCloud, y: &PointCloud, backend: NnBackend) -> ScoreSet {
    let xs = x.to_arrays();
    let ys = y.to_arrays();
    let use_tree = match backend {
        NnBackend::Auto => xs.len() * ys.len() > BRUTE_FORCE_PAIR_LIMIT,
        NnBackend::BruteForce => false,
        NnBackend::KdTree => true,
    };
    let scores = if use_tree {
        let tree = KdTree3::build(&ys);
        xs.iter().map(|q| tree.nearest_sq(q).0.sqrt()).collect()
    } else {
        xs.iter()
            .map(|q| {
                ys.iter()
                    .map(|p| dist_sq(q, p))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    };
    ScoreSet { scores }
}

/// Nearest-rank percentile: sort ascending and take the element at index
/// `ceil(p·n) − 1`. `p` is in (0, 1].
pub fn percentile(scores: &ScoreSet, p: f64) -> f64 {
    debug_assert!(p > 0.0 && p <= 1.0);
    let mut sorted = scores.scores.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    // The nudge keeps products like 0.3 × 10 from rounding up to the next
    // rank.
    let rank = (p * n as f64 - 1e-9).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// One-directional ADD-S: the mean distance from the model posed at
/// `t_hat` to its closest point on the model posed at `t_star`.
pub fn adds_metric(t_hat: &Pose, t_star: &Pose, model: &CadModel) -> f64 {
    let a = apply_pose(t_hat, &model.dense_cloud());
    let b = apply_pose(t_star, &model.dense_cloud());
    nearest_distances(&a, &b).mean()
}

/// Grid resolution for the ADD-S area-under-curve integration.
pub const ADDS_AUC_GRID: usize = 100;

/// Area under the accuracy-vs-threshold curve for thresholds in
/// `[0, threshold]`, normalized to [0, 1]. Trapezoidal integration over the
/// empirical CDF on a fixed grid of [`ADDS_AUC_GRID`] intervals.
pub fn adds_auc(per_instance: &[f64], threshold: f64) -> f64 {
    assert!(!per_instance.is_empty() && threshold > 0.0);
    let n = per_instance.len() as f64;
    let acc = |tau: f64| per_instance.iter().filter(|&&d| d <= tau).count() as f64 / n;
    let k = ADDS_AUC_GRID;
    let mut area = 0.0;
    let mut prev = acc(0.0);
    for step in 1..=k {
        let tau = threshold * step as f64 / k as f64;
        let cur = acc(tau);
        area += 0.5 * (prev + cur);
        prev = cur;
    }
    area / k as f64
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        // Uniform rotation from a normalized quaternion with Gaussian
        // entries (Box-Muller from uniform draws).
        let mut normal = || {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let q = [normal(), normal(), normal(), normal()];
        let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub(crate) fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let rotation = random_rotation(rng);
        let translation = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Pose::new(rotation, translation).unwrap()
    }

    pub(crate) fn random_keypoints(rng: &mut ChaCha8Rng, n: usize) -> KeypointSet {
        let cols: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                )
            })
            .collect();
        KeypointSet::from_columns(&cols).unwrap()
    }
}
