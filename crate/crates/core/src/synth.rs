//! Synthetic scene generation: builtin CAD models, depth-buffer
//! self-occlusion, sensor noise, segmentation outliers, mask corruption and
//! pinhole back-projection, composed into labeled scene samples. Every
//! operation is a pure function of its inputs and a seed.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3xX, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::certificates::{BinaryMask, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::geometry::{
    apply_pose, apply_pose_keypoints, CadModel, KeypointSet, PointCloud, Pose, PoseJson,
};

/// Splat radius used when rendering ground-truth masks from visible points.
pub const MASK_SPLAT_RADIUS: usize = 1;

/// Deterministic seed derivation for per-scene and per-stage streams.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut x = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuiltinKind {
    Box,
    Cylinder,
    LBracket,
}

impl std::str::FromStr for BuiltinKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "box" => Ok(BuiltinKind::Box),
            "cylinder" => Ok(BuiltinKind::Cylinder),
            "lbracket" | "l-bracket" => Ok(BuiltinKind::LBracket),
            other => Err(Error::InvalidInput(format!("unknown builtin model '{other}'"))),
        }
    }
}

/// Axis-aligned translation sampling box; rotations are always uniform over
/// the full rotation group.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseBounds {
    pub translation_min: [f64; 3],
    pub translation_max: [f64; 3],
}

impl Default for PoseBounds {
    fn default() -> Self {
        PoseBounds {
            translation_min: [-0.3, -0.2, 1.2],
            translation_max: [0.3, 0.2, 2.2],
        }
    }
}

/// Blob and erosion parameters for segmentation-mask corruption.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MaskCorruption {
    pub blob_count: usize,
    pub blob_radius: usize,
    pub erosion_radius: usize,
}

impl MaskCorruption {
    pub fn none() -> Self {
        MaskCorruption::default()
    }

    /// Moderate corruption used by the shifted-domain experiments.
    pub fn moderate() -> Self {
        MaskCorruption {
            blob_count: 2,
            blob_radius: 4,
            erosion_radius: 3,
        }
    }
}

/// Full generative configuration for one scene distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    #[serde(default = "CameraIntrinsics::default_vga")]
    pub camera: CameraIntrinsics,
    pub pose_bounds: PoseBounds,
    /// Sensor noise standard deviation γ in meters.
    pub gaussian_noise_std: f64,
    /// Outlier rate η in [0, 1).
    pub outlier_rate: f64,
    /// Outlier box size relative to the cloud bounding box, ≥ 1.
    pub outlier_box_scale: f64,
    /// Keypoint noise half-range as a fraction of the diameter (σ).
    pub keypoint_noise_sigma: f64,
    /// Probability f of perturbing each keypoint.
    pub keypoint_noise_prob: f64,
    pub mask_corruption: MaskCorruption,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            camera: CameraIntrinsics::default_vga(),
            pose_bounds: PoseBounds::default(),
            gaussian_noise_std: 0.0,
            outlier_rate: 0.0,
            outlier_box_scale: 1.5,
            keypoint_noise_sigma: 0.0,
            keypoint_noise_prob: 0.8,
            mask_corruption: MaskCorruption::none(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(Error::InvalidInput("outlier_rate must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.keypoint_noise_prob) {
            return Err(Error::InvalidInput(
                "keypoint_noise_prob must be in [0,1]".into(),
            ));
        }
        if self.gaussian_noise_std < 0.0 || self.keypoint_noise_sigma < 0.0 {
            return Err(Error::InvalidInput("noise levels must be nonnegative".into()));
        }
        if self.outlier_box_scale < 1.0 {
            return Err(Error::InvalidInput("outlier_box_scale must be ≥ 1".into()));
        }
        for a in 0..3 {
            if self.pose_bounds.translation_min[a] > self.pose_bounds.translation_max[a] {
                return Err(Error::InvalidInput("empty pose translation box".into()));
            }
        }
        Ok(())
    }
}

/// One labeled synthetic observation.
#[derive(Debug, Clone)]
pub struct SceneSample {
    /// Observed point cloud with RGB-like features.
    pub x: PointCloud,
    /// Corrupted detected mask M.
    pub mask: BinaryMask,
    /// Ground-truth mask M*.
    pub mask_star: BinaryMask,
    /// Ground-truth pose.
    pub t_star: Pose,
    /// Ground-truth keypoints, exactly `t_star · b`.
    pub y_star: KeypointSet,
    pub model_id: String,
    pub seed: u64,
}

/// Deterministic builtin CAD models with extreme-point keypoints.
///
/// The dense sample (2048 points) always contains the keypoints and the
/// extreme points that realize the diameter, so the computed diameter is
/// exact. `size` is the axis-aligned bounding box of the shape; cylinders
/// use `size.x` as the diameter of the circular cross-section and `size.z`
/// as the height.
pub fn builtin_model(kind: BuiltinKind, size: Vector3<f64>, seed: u64) -> Result<CadModel> {
    if !(size.x > 0.0 && size.y > 0.0 && size.z > 0.0) {
        return Err(Error::InvalidInput("model size must be positive".into()));
    }
    const M: usize = 2048;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6D6F64656C));
    let (extremes, keypoint_count, mut sampler) = match kind {
        BuiltinKind::Box => box_surface(size),
        BuiltinKind::Cylinder => cylinder_surface(size),
        BuiltinKind::LBracket => lbracket_surface(size),
    };
    let mut cols = extremes;
    while cols.len() < M {
        cols.push(sampler(&mut rng));
    }
    cols.truncate(M);
    let keypoints = KeypointSet::from_columns(&cols[..keypoint_count])?;
    CadModel::new(Matrix3xX::from_columns(&cols), keypoints)
}

type SurfaceSpec = (
    Vec<Vector3<f64>>,
    usize,
    Box<dyn FnMut(&mut ChaCha8Rng) -> Vector3<f64>>,
);

fn box_surface(size: Vector3<f64>) -> SurfaceSpec {
    let h = size / 2.0;
    let mut corners = Vec::with_capacity(8);
    for &sx in &[-1.0, 1.0] {
        for &sy in &[-1.0, 1.0] {
            for &sz in &[-1.0, 1.0] {
                corners.push(Vector3::new(sx * h.x, sy * h.y, sz * h.z));
            }
        }
    }
    // Face areas decide where random surface points land.
    let areas = [
        size.x * size.y, // z faces
        size.x * size.z, // y faces
        size.y * size.z, // x faces
    ];
    let total: f64 = 2.0 * areas.iter().sum::<f64>();
    let sampler = Box::new(move |rng: &mut ChaCha8Rng| {
        let mut pick = rng.random_range(0.0..total);
        let mut face = 0usize;
        for (i, &a) in areas.iter().enumerate() {
            if pick < 2.0 * a {
                face = i;
                break;
            }
            pick -= 2.0 * a;
        }
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let a = rng.random_range(-1.0..1.0);
        let b = rng.random_range(-1.0..1.0);
        match face {
            0 => Vector3::new(a * h.x, b * h.y, side * h.z),
            1 => Vector3::new(a * h.x, side * h.y, b * h.z),
            _ => Vector3::new(side * h.x, a * h.y, b * h.z),
        }
    });
    (corners, 8, sampler)
}

fn cylinder_surface(size: Vector3<f64>) -> SurfaceSpec {
    let r = size.x / 2.0;
    let hh = size.z / 2.0;
    // Keypoints: rim quadrants alternating between the two rims, plus the
    // axis endpoints on the caps.
    let keypoints = vec![
        Vector3::new(r, 0.0, hh),
        Vector3::new(0.0, r, -hh),
        Vector3::new(-r, 0.0, hh),
        Vector3::new(0.0, -r, -hh),
        Vector3::new(0.0, 0.0, hh),
        Vector3::new(0.0, 0.0, -hh),
    ];
    // Remaining rim quadrants so opposite-rim diameter pairs are present in
    // the dense sample.
    let mut extremes = keypoints.clone();
    extremes.extend([
        Vector3::new(r, 0.0, -hh),
        Vector3::new(0.0, r, hh),
        Vector3::new(-r, 0.0, -hh),
        Vector3::new(0.0, -r, hh),
    ]);
    let lateral = std::f64::consts::TAU * r * size.z;
    let caps = 2.0 * std::f64::consts::PI * r * r;
    let total = lateral + caps;
    let sampler = Box::new(move |rng: &mut ChaCha8Rng| {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        if rng.random_range(0.0..total) < lateral {
            let z = rng.random_range(-hh..hh);
            Vector3::new(r * theta.cos(), r * theta.sin(), z)
        } else {
            let rr = r * rng.random::<f64>().sqrt();
            let z = if rng.random::<bool>() { hh } else { -hh };
            Vector3::new(rr * theta.cos(), rr * theta.sin(), z)
        }
    });
    (extremes, 6, sampler)
}

fn lbracket_surface(size: Vector3<f64>) -> SurfaceSpec {
    // L cross-section in the xy plane, extruded along z and centered on the
    // bounding-box center. Leg thicknesses are half the footprint.
    let (a, b, c) = (size.x, size.y, size.z);
    let (a1, b1) = (a / 2.0, b / 2.0);
    let shift = Vector3::new(a / 2.0, b / 2.0, 0.0);
    let poly = [
        (0.0, 0.0),
        (a, 0.0),
        (a, b1),
        (a1, b1),
        (a1, b),
        (0.0, b),
    ];
    let mut vertices = Vec::with_capacity(12);
    for &z in &[-c / 2.0, c / 2.0] {
        for &(px, py) in &poly {
            vertices.push(Vector3::new(px, py, z) - shift);
        }
    }
    // The L decomposes into two rectangles for exact face sampling.
    let rects = [(0.0, 0.0, a, b1), (0.0, b1, a1, b)];
    let face_area: f64 = rects.iter().map(|r| (r.2 - r.0) * (r.3 - r.1)).sum();
    let perimeter = 2.0 * (a + b); // total side-wall length of the L outline
    let total = 2.0 * face_area + perimeter * c;
    let edges: Vec<((f64, f64), (f64, f64))> = poly
        .iter()
        .zip(poly.iter().cycle().skip(1))
        .map(|(&p, &q)| (p, q))
        .collect();
    let sampler = Box::new(move |rng: &mut ChaCha8Rng| {
        let pick = rng.random_range(0.0..total);
        if pick < 2.0 * face_area {
            // Top or bottom L face.
            let z = if rng.random::<bool>() { c / 2.0 } else { -c / 2.0 };
            let mut t = rng.random_range(0.0..face_area);
            for r in &rects {
                let area = (r.2 - r.0) * (r.3 - r.1);
                if t < area {
                    let x = rng.random_range(r.0..r.2);
                    let y = rng.random_range(r.1..r.3);
                    return Vector3::new(x, y, z) - shift;
                }
                t -= area;
            }
            unreachable!("rectangle decomposition covers the face area");
        }
        // Side wall: pick an outline edge by length.
        let mut t = rng.random_range(0.0..perimeter);
        for &((x0, y0), (x1, y1)) in &edges {
            let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
            if t < len {
                let s = t / len;
                let z = rng.random_range(-c / 2.0..c / 2.0);
                return Vector3::new(x0 + s * (x1 - x0), y0 + s * (y1 - y0), z) - shift;
            }
            t -= len;
        }
        let z = rng.random_range(-c / 2.0..c / 2.0);
        Vector3::new(poly[0].0, poly[0].1, z) - shift
    });
    (vertices, 12, sampler)
}

/// RGB-like per-point features for a model-frame sample: bounding-box
/// normalized coordinates in [0, 1].
pub fn model_frame_features(points: &Matrix3xX<f64>) -> DMatrix<f64> {
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    for c in points.column_iter() {
        for a in 0..3 {
            min[a] = min[a].min(c[a]);
            max[a] = max[a].max(c[a]);
        }
    }
    let extent = max - min;
    DMatrix::from_fn(3, points.ncols(), |a, i| {
        if extent[a] > 0.0 {
            (points[(a, i)] - min[a]) / extent[a]
        } else {
            0.5
        }
    })
}

/// Depth-buffer self-occlusion: points are binned into `bin_px`-sized pixel
/// blocks, and within each block only points within `delta_z` of the
/// minimum depth survive. Points projecting outside the image are dropped.
pub fn occlude(
    posed_dense: &PointCloud,
    camera: &CameraIntrinsics,
    delta_z: f64,
    bin_px: usize,
) -> Result<PointCloud> {
    let bin_px = bin_px.max(1);
    let bins_w = camera.width.div_ceil(bin_px);
    let mut bin_of = vec![usize::MAX; posed_dense.len()];
    let mut min_depth: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
    for i in 0..posed_dense.len() {
        let p = posed_dense.column(i);
        if let Some((u, v)) = camera.project(&p) {
            let bin = (v / bin_px) * bins_w + u / bin_px;
            bin_of[i] = bin;
            let e = min_depth.entry(bin).or_insert(f64::INFINITY);
            if p.z < *e {
                *e = p.z;
            }
        }
    }
    let keep: Vec<usize> = (0..posed_dense.len())
        .filter(|&i| {
            bin_of[i] != usize::MAX
                && posed_dense.column(i).z <= min_depth[&bin_of[i]] + delta_z
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyProjection);
    }
    posed_dense.select(&keep)
}

/// Adds iid Gaussian noise of standard deviation γ to every coordinate.
pub fn inject_noise(cloud: &PointCloud, gamma: f64, seed: u64) -> PointCloud {
    if gamma == 0.0 {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = cloud.points().clone();
    for v in pts.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += gamma * n;
    }
    PointCloud::with_features(pts, cloud.features().cloned()).expect("noise keeps cloud valid")
}

/// Replaces a uniformly chosen ⌊η·n⌋-subset of points with uniform samples
/// in the cloud's bounding box scaled by `box_scale` about its mean.
/// Features of replaced points are resampled uniformly in [0, 1]. Returns
/// the new cloud and the replacement flags.
pub fn inject_outliers(
    cloud: &PointCloud,
    eta: f64,
    box_scale: f64,
    seed: u64,
) -> (PointCloud, Vec<bool>) {
    let n = cloud.len();
    let k = (eta * n as f64).floor() as usize;
    let mut flags = vec![false; n];
    if k == 0 {
        return (cloud.clone(), flags);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mean = cloud.points().column_sum() / n as f64;
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    for c in cloud.points().column_iter() {
        for a in 0..3 {
            min[a] = min[a].min(c[a]);
            max[a] = max[a].max(c[a]);
        }
    }
    let half = (max - min) / 2.0 * box_scale;
    let mut pts = cloud.points().clone();
    let mut feats = cloud.features().cloned();
    for &i in idx.iter().take(k) {
        flags[i] = true;
        for a in 0..3 {
            let h = half[a].max(1e-9);
            pts[(a, i)] = mean[a] + rng.random_range(-h..h);
        }
        if let Some(f) = feats.as_mut() {
            for d in 0..f.nrows() {
                f[(d, i)] = rng.random::<f64>();
            }
        }
    }
    (
        PointCloud::with_features(pts, feats).expect("outlier injection keeps cloud valid"),
        flags,
    )
}

/// Adds disc blobs touching the mask boundary and bites erosion discs out
/// of random boundary regions. The result is never empty.
pub fn corrupt_mask(mask_star: &BinaryMask, corruption: &MaskCorruption, seed: u64) -> BinaryMask {
    if corruption.blob_count == 0
        || (corruption.blob_radius == 0 && corruption.erosion_radius == 0)
    {
        return mask_star.clone();
    }
    let boundary = mask_star.boundary_pixels();
    if boundary.is_empty() {
        return mask_star.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = mask_star.clone();
    if corruption.blob_radius > 0 {
        for _ in 0..corruption.blob_count {
            let &(cx, cy) = &boundary[rng.random_range(0..boundary.len())];
            stamp_disc(&mut mask, cx, cy, corruption.blob_radius, true);
        }
    }
    if corruption.erosion_radius > 0 {
        let with_blobs = mask.clone();
        for _ in 0..corruption.blob_count {
            let &(cx, cy) = &boundary[rng.random_range(0..boundary.len())];
            stamp_disc(&mut mask, cx, cy, corruption.erosion_radius, false);
        }
        if mask.area() == 0 {
            return with_blobs;
        }
    }
    mask
}

fn stamp_disc(mask: &mut BinaryMask, cx: usize, cy: usize, radius: usize, value: bool) {
    let r = radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let x = cx as isize + dx;
            let y = cy as isize + dy;
            if x >= 0 && y >= 0 && (x as usize) < mask.width() && (y as usize) < mask.height() {
                mask.set(x as usize, y as usize, value);
            }
        }
    }
}

/// Back-projects masked pixels with positive depth through the pinhole
/// model; color planes, when given, become point features.
pub fn back_project(
    depth: &DMatrix<f64>,
    mask: &BinaryMask,
    camera: &CameraIntrinsics,
    color: Option<&[DMatrix<f64>; 3]>,
) -> Result<PointCloud> {
    if depth.nrows() != camera.height || depth.ncols() != camera.width {
        return Err(Error::DimensionMismatch {
            what: "depth image",
            expected: camera.height * camera.width,
            actual: depth.nrows() * depth.ncols(),
        });
    }
    let mut cols = Vec::new();
    let mut feats = Vec::new();
    for (u, v) in mask.set_pixels() {
        let z = depth[(v, u)];
        if z <= 0.0 {
            continue;
        }
        cols.push(camera.back_project_pixel(u, v, z));
        if let Some(planes) = color {
            feats.push(Vector3::new(planes[0][(v, u)], planes[1][(v, u)], planes[2][(v, u)]));
        }
    }
    if cols.is_empty() {
        return Err(Error::EmptyMask);
    }
    let features = color.map(|_| {
        DMatrix::from_fn(3, feats.len(), |d, i| feats[i][d])
    });
    PointCloud::with_features(Matrix3xX::from_columns(&cols), features)
}

/// Independently perturbs each keypoint, with probability `f`, by
/// per-coordinate uniform noise in [−σD/2, σD/2].
pub fn perturb_keypoints(
    y_star: &KeypointSet,
    sigma: f64,
    f: f64,
    diameter: f64,
    seed: u64,
) -> KeypointSet {
    let half = sigma * diameter / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = y_star.points().clone();
    for k in 0..pts.ncols() {
        let hit = rng.random::<f64>() < f;
        if hit && half > 0.0 {
            for a in 0..3 {
                pts[(a, k)] += rng.random_range(-half..half);
            }
        }
    }
    KeypointSet::new(pts).expect("perturbation keeps keypoints valid")
}

/// Uniform rotation, translation uniform in the bounds box.
pub fn sample_pose(bounds: &PoseBounds, rng: &mut ChaCha8Rng) -> Pose {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    let rotation = nalgebra::Matrix3::new(
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
        rng.random_range(bounds.translation_min[0]..=bounds.translation_max[0]),
        rng.random_range(bounds.translation_min[1]..=bounds.translation_max[1]),
        rng.random_range(bounds.translation_min[2]..=bounds.translation_max[2]),
    );
    Pose::new(rotation, t).expect("quaternion rotation is orthonormal")
}

/// Occlusion bin size adapted to the projected sample spacing, so the depth
/// buffer reliably culls hidden points at the model's sampling density.
fn occlusion_bin_px(model: &CadModel, camera: &CameraIntrinsics, mean_depth: f64) -> usize {
    let spacing = 1.4 * model.diameter() / (model.dense_len() as f64).sqrt();
    let spacing_px = camera.fx * spacing / mean_depth;
    (2.5 * spacing_px).ceil().max(2.0) as usize
}

/// Samples one labeled scene: pose, self-occluded surface points, mask
/// rendering and corruption, mask-induced outliers, sensor noise, and
/// replacement outliers. Resamples the pose (bounded retries) when the
/// object leaves the frustum.
pub fn generate_scene(model: &CadModel, cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7363656E65));
    let features = model_frame_features(model.dense_points());
    let dense = PointCloud::with_features(model.dense_points().clone(), Some(features))
        .expect("model sample is valid");

    'attempt: for _ in 0..64 {
        let t_star = sample_pose(&cfg.pose_bounds, &mut rng);
        let posed = apply_pose(&t_star, &dense);
        // The whole object must stay in the frustum.
        for i in 0..posed.len() {
            if cfg.camera.project(&posed.column(i)).is_none() {
                continue 'attempt;
            }
        }
        let mean_depth = posed.points().row(2).sum() / posed.len() as f64;
        let bin_px = occlusion_bin_px(model, &cfg.camera, mean_depth);
        let delta_z = (0.01 * model.diameter()).max(1.2 * bin_px as f64 * mean_depth / cfg.camera.fx);
        let visible = match occlude(&posed, &cfg.camera, delta_z, bin_px) {
            Ok(v) => v,
            Err(Error::EmptyProjection) => continue 'attempt,
            Err(e) => return Err(e),
        };

        let mut mask_star = BinaryMask::new(cfg.camera.width, cfg.camera.height);
        let mut pixel_of = Vec::with_capacity(visible.len());
        for i in 0..visible.len() {
            let px = cfg
                .camera
                .project(&visible.column(i))
                .expect("visible points project in-bounds");
            pixel_of.push(px);
            mask_star.set_square(px.0, px.1, MASK_SPLAT_RADIUS);
        }

        let mask = corrupt_mask(
            &mask_star,
            &cfg.mask_corruption,
            derive_seed(seed, 0x6D61736B),
        );

        // Surface points surviving the detected mask.
        let keep: Vec<usize> = (0..visible.len())
            .filter(|&i| mask.get(pixel_of[i].0, pixel_of[i].1))
            .collect();
        if keep.is_empty() {
            continue 'attempt;
        }
        let surviving = visible.select(&keep)?;

        // Mask blobs spawn outlier points at depths around the object.
        let mut cols: Vec<Vector3<f64>> = (0..surviving.len()).map(|i| surviving.column(i)).collect();
        let surv_feats = surviving.features().expect("features attached");
        let mut feats: Vec<Vector3<f64>> = (0..surviving.len())
            .map(|i| {
                Vector3::new(
                    surv_feats[(0, i)],
                    surv_feats[(1, i)],
                    surv_feats[(2, i)],
                )
            })
            .collect();
        let mut blob_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x626C6F62));
        for (u, v) in mask.set_pixels() {
            if !mask_star.get(u, v) {
                let z = mean_depth * blob_rng.random_range(0.5..1.5);
                cols.push(cfg.camera.back_project_pixel(u, v, z));
                feats.push(Vector3::new(
                    blob_rng.random(),
                    blob_rng.random(),
                    blob_rng.random(),
                ));
            }
        }
        let features = DMatrix::from_fn(3, feats.len(), |d, i| feats[i][d]);
        let x_clean =
            PointCloud::with_features(Matrix3xX::from_columns(&cols), Some(features))?;

        let x_noisy = inject_noise(
            &x_clean,
            cfg.gaussian_noise_std,
            derive_seed(seed, 0x6E6F697365),
        );
        let (x, _) = inject_outliers(
            &x_noisy,
            cfg.outlier_rate,
            cfg.outlier_box_scale,
            derive_seed(seed, 0x6F75746C),
        );

        let y_star = apply_pose_keypoints(&t_star, model.keypoints());
        return Ok(SceneSample {
            x,
            mask,
            mask_star,
            t_star,
            y_star,
            model_id: format!("builtin-{}", model.dense_len()),
            seed,
        });
    }
    Err(Error::EmptyProjection)
}

/// Generates `count` scenes with per-scene seeds derived from
/// `cfg.seed`.
pub fn generate_scenes(model: &CadModel, cfg: &SceneConfig, count: usize) -> Result<Vec<SceneSample>> {
    (0..count)
        .map(|i| generate_scene(model, cfg, derive_seed(cfg.seed, i as u64)))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneMeta {
    t_star: PoseJson,
    y_star: Vec<[f64; 3]>,
    model_id: String,
    seed: u64,
    point_count: usize,
    feature_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SceneConfig,
    pub count: usize,
    pub seeds: Vec<u64>,
}

/// Writes a scene dataset: `manifest.json`, per-scene little-endian f32
/// point and feature files, PGM masks, and a JSON metadata record.
pub fn save_scene_dir(dir: &Path, cfg: &SceneConfig, scenes: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        config: cfg.clone(),
        count: scenes.len(),
        seeds: scenes.iter().map(|s| s.seed).collect(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    for (i, scene) in scenes.iter().enumerate() {
        let stem = format!("scene_{i:04}");
        let mut xyz = Vec::with_capacity(scene.x.len() * 12);
        for c in scene.x.points().column_iter() {
            for a in 0..3 {
                xyz.extend_from_slice(&(c[a] as f32).to_le_bytes());
            }
        }
        fs::write(dir.join(format!("{stem}.xyz")), xyz)?;
        let feature_dim = scene.x.features().map_or(0, |f| f.nrows());
        if let Some(f) = scene.x.features() {
            let mut buf = Vec::with_capacity(f.len() * 4);
            for i in 0..f.ncols() {
                for d in 0..f.nrows() {
                    buf.extend_from_slice(&(f[(d, i)] as f32).to_le_bytes());
                }
            }
            fs::write(dir.join(format!("{stem}.feat")), buf)?;
        }
        scene.mask.write_pgm(&dir.join(format!("{stem}_mask.pgm")))?;
        scene
            .mask_star
            .write_pgm(&dir.join(format!("{stem}_maskstar.pgm")))?;
        let meta = SceneMeta {
            t_star: PoseJson::from(&scene.t_star),
            y_star: (0..scene.y_star.len())
                .map(|k| {
                    let c = scene.y_star.column(k);
                    [c[0], c[1], c[2]]
                })
                .collect(),
            model_id: scene.model_id.clone(),
            seed: scene.seed,
            point_count: scene.x.len(),
            feature_dim,
        };
        fs::write(
            dir.join(format!("{stem}_meta.json")),
            serde_json::to_vec_pretty(&meta)?,
        )?;
    }
    Ok(())
}

/// Loads one scene written by [`save_scene_dir`]. Point data round-trips at
/// f32 precision.
pub fn load_scene(dir: &Path, index: usize) -> Result<SceneSample> {
    let stem = format!("scene_{index:04}");
    let meta: SceneMeta =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}_meta.json")))?)?;
    let xyz = fs::read(dir.join(format!("{stem}.xyz")))?;
    if xyz.len() != meta.point_count * 12 {
        return Err(Error::Parse(format!(
            "{stem}.xyz: expected {} bytes, got {}",
            meta.point_count * 12,
            xyz.len()
        )));
    }
    let cols: Vec<Vector3<f64>> = (0..meta.point_count)
        .map(|i| {
            let at = |k: usize| {
                let o = i * 12 + k * 4;
                f32::from_le_bytes([xyz[o], xyz[o + 1], xyz[o + 2], xyz[o + 3]]) as f64
            };
            Vector3::new(at(0), at(1), at(2))
        })
        .collect();
    let features = if meta.feature_dim > 0 {
        let raw = fs::read(dir.join(format!("{stem}.feat")))?;
        let d = meta.feature_dim;
        if raw.len() != meta.point_count * d * 4 {
            return Err(Error::Parse(format!("{stem}.feat: unexpected size")));
        }
        Some(DMatrix::from_fn(d, meta.point_count, |r, i| {
            let o = (i * d + r) * 4;
            f32::from_le_bytes([raw[o], raw[o + 1], raw[o + 2], raw[o + 3]]) as f64
        }))
    } else {
        None
    };
    let x = PointCloud::with_features(Matrix3xX::from_columns(&cols), features)?;
    let mask = BinaryMask::read_pgm(&dir.join(format!("{stem}_mask.pgm")))?;
    let mask_star = BinaryMask::read_pgm(&dir.join(format!("{stem}_maskstar.pgm")))?;
    let t_star = Pose::try_from(&meta.t_star)?;
    let y_star = KeypointSet::from_columns(
        &meta
            .y_star
            .iter()
            .map(|k| Vector3::new(k[0], k[1], k[2]))
            .collect::<Vec<_>>(),
    )?;
    Ok(SceneSample {
        x,
        mask,
        mask_star,
        t_star,
        y_star,
        model_id: meta.model_id,
        seed: meta.seed,
    })
}
