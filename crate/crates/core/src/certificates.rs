//! Observable-correctness certificates: a 3D percentile fit check between
//! the input cloud and the posed model, a 2D mask-overlap check against a
//! rendering of the posed model, and their conjunction.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{percentile, CadModel, PointCloud, Pose, ScoreSet};
use crate::kdtree::KdTree3;

/// Pinhole camera: focal lengths and principal point in pixels.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if !(0.0 <= cx && cx < width as f64 && 0.0 <= cy && cy < height as f64) {
            return Err(Error::InvalidInput(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// VGA camera with centered principal point and f = 500 px.
    pub fn default_vga() -> Self {
        CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }

    /// Projects a camera-frame point to its nearest pixel; `None` when it is
    /// at or behind the camera or lands outside the image.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(usize, usize)> {
        if p.z <= 0.0 {
            return None;
        }
        let u = (self.fx * p.x / p.z + self.cx).round();
        let v = (self.fy * p.y / p.z + self.cy).round();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }

    /// Point at depth `z` on the ray through pixel (u, v). Inverse of
    /// [`CameraIntrinsics::project`] up to half-pixel rounding.
    #[inline]
    pub fn back_project_pixel(&self, u: usize, v: usize, z: f64) -> Vector3<f64> {
        Vector3::new(
            (u as f64 - self.cx) * z / self.fx,
            (v as f64 - self.cy) * z / self.fy,
            z,
        )
    }
}

/// A height×width boolean grid, bit-packed per row.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        let words_per_row = width.div_ceil(64);
        BinaryMask {
            width,
            height,
            words_per_row,
            words: vec![0; words_per_row * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.words[y * self.words_per_row + x / 64] >> (x % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        let w = &mut self.words[y * self.words_per_row + x / 64];
        if value {
            *w |= 1 << (x % 64);
        } else {
            *w &= !(1 << (x % 64));
        }
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> usize {
        debug_assert_eq!(self.words.len(), other.words.len());
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    /// True when every set pixel of `self` is set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn set_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for wi in 0..self.words_per_row {
                let mut w = self.words[y * self.words_per_row + wi];
                while w != 0 {
                    let bit = w.trailing_zeros() as usize;
                    let x = wi * 64 + bit;
                    if x < self.width {
                        out.push((x, y));
                    }
                    w &= w - 1;
                }
            }
        }
        out
    }

    /// Sets a square neighborhood of half-width `radius` around (x, y),
    /// clipped to the grid.
    pub fn set_square(&mut self, x: usize, y: usize, radius: usize) {
        let r = radius as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                    self.set(nx as usize, ny as usize, true);
                }
            }
        }
    }

    /// Morphological dilation with a square structuring element.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        let mut out = self.clone();
        for (x, y) in self.set_pixels() {
            out.set_square(x, y, radius);
        }
        out
    }

    /// Pixels that are set and 4-adjacent to an unset or out-of-grid pixel.
    pub fn boundary_pixels(&self) -> Vec<(usize, usize)> {
        self.set_pixels()
            .into_iter()
            .filter(|&(x, y)| {
                x == 0
                    || y == 0
                    || x + 1 == self.width
                    || y + 1 == self.height
                    || !self.get(x - 1, y)
                    || !self.get(x + 1, y)
                    || !self.get(x, y - 1)
                    || !self.get(x, y + 1)
            })
            .collect()
    }

    /// Serializes as binary PGM (P5), 255 for set pixels.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.width * self.height + 32);
        write!(buf, "P5\n{} {}\n255\n", self.width, self.height)?;
        for y in 0..self.height {
            for x in 0..self.width {
                buf.push(if self.get(x, y) { 255 } else { 0 });
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
        let data = fs::read(path)?;
        let mut fields = Vec::new();
        let mut pos = 0usize;
        // P5 header: magic, width, height, maxval, single whitespace, data.
        while fields.len() < 4 && pos < data.len() {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(std::str::from_utf8(&data[start..pos]).map_err(|_| {
                Error::Parse(format!("{}: non-ASCII pgm header", path.display()))
            })?);
        }
        if fields.len() != 4 || fields[0] != "P5" {
            return Err(Error::Parse(format!("{}: not a P5 pgm", path.display())));
        }
        let width: usize = fields[1]
            .parse()
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let height: usize = fields[2]
            .parse()
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        pos += 1;
        if data.len() < pos + width * height {
            return Err(Error::Parse(format!("{}: pgm body truncated", path.display())));
        }
        let mut mask = BinaryMask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if data[pos + y * width + x] >= 128 {
                    mask.set(x, y, true);
                }
            }
        }
        Ok(mask)
    }
}

/// Thresholds for the observable-correctness checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateConfig {
    /// Percentile level for the 3D check, in (0, 1].
    pub p: f64,
    /// 3D distance threshold in meters.
    pub eps_3d: f64,
    /// 2D overlap slack: the check passes when overlap > 1 − eps_2d.
    pub eps_2d: f64,
    /// Square dilation radius applied to the rendered mask, in pixels.
    pub dilation_radius: usize,
}

impl CertificateConfig {
    /// Defaults: p = 0.9, ε₃D = 4% of the diameter, ε₂D = 0.10, radius 1.
    pub fn for_diameter(diameter: f64) -> Self {
        CertificateConfig {
            p: 0.9,
            eps_3d: 0.04 * diameter,
            eps_2d: 0.10,
            dilation_radius: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidInput("percentile level must be in (0,1]".into()));
        }
        if !(self.eps_3d > 0.0) {
            return Err(Error::InvalidInput("eps_3d must be positive".into()));
        }
        if !(self.eps_2d > 0.0 && self.eps_2d < 1.0) {
            return Err(Error::InvalidInput("eps_2d must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// Outcome of the certificate checks; `oc` is the exact conjunction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CertificateResult {
    pub oc: bool,
    #[serde(rename = "oc3d")]
    pub oc_3d: bool,
    #[serde(rename = "oc2d")]
    pub oc_2d: bool,
    #[serde(rename = "score3d")]
    pub score_3d: f64,
    #[serde(rename = "score2d")]
    pub score_2d: f64,
}

/// 3D certificate: the p-th percentile of the nearest-neighbor distances
/// from `x` to the posed dense model must fall below `eps_3d`.
///
/// Distances are evaluated in the model frame against a kd-tree over the
/// dense sample (rigid transforms preserve them), so the tree is built once
/// per model rather than once per pose.
pub fn cert_3d(
    x: &PointCloud,
    t_hat: &Pose,
    model: &CadModel,
    cfg: &CertificateConfig,
) -> (bool, f64) {
    let tree = model.dense_tree();
    cert_3d_with_tree(x, t_hat, model, &tree, cfg)
}

/// [`cert_3d`] with a caller-cached model-frame tree.
pub fn cert_3d_with_tree(
    x: &PointCloud,
    t_hat: &Pose,
    model: &CadModel,
    model_tree: &KdTree3,
    cfg: &CertificateConfig,
) -> (bool, f64) {
    let scores = model_frame_distances(x, t_hat, model, model_tree);
    let value = percentile(&scores, cfg.p);
    (value < cfg.eps_3d, value)
}

/// Distances from each point of `x` to the model posed at `pose`, computed
/// in the model frame. Scores saturate at twice the model diameter: beyond
/// that a pose is unconditionally wrong and the exact value carries no
/// information, while the capped search keeps far queries cheap.
pub fn model_frame_distances(
    x: &PointCloud,
    pose: &Pose,
    model: &CadModel,
    model_tree: &KdTree3,
) -> ScoreSet {
    let inv = pose.inverse();
    let cap = 2.0 * model.diameter();
    let cap_sq = cap * cap;
    let scores: Vec<f64> = (0..x.len())
        .map(|i| {
            let q = inv.transform_point(&x.column(i));
            model_tree.nearest_sq_within(&[q.x, q.y, q.z], cap_sq).0.sqrt()
        })
        .collect();
    ScoreSet::new(scores).expect("distances are finite and nonnegative")
}

/// Renders the posed dense model by point splatting: every visible point
/// sets its pixel, then the mask is dilated by `dilation_radius`. Points at
/// or behind the camera are skipped.
pub fn render_mask(
    t_hat: &Pose,
    model: &CadModel,
    camera: &CameraIntrinsics,
    cfg: &CertificateConfig,
) -> Result<BinaryMask> {
    let mut mask = BinaryMask::new(camera.width, camera.height);
    let mut any = false;
    for i in 0..model.dense_len() {
        let p = t_hat.transform_point(&model.dense_points().column(i).into_owned());
        if let Some((u, v)) = camera.project(&p) {
            mask.set_square(u, v, cfg.dilation_radius);
            any = true;
        }
    }
    if !any {
        return Err(Error::EmptyProjection);
    }
    Ok(mask)
}

/// 2D certificate: `|M ∩ M̂| / |M| > 1 − eps_2d`.
pub fn cert_2d(
    detected: &BinaryMask,
    rendered: &BinaryMask,
    cfg: &CertificateConfig,
) -> Result<(bool, f64)> {
    if detected.width() != rendered.width() || detected.height() != rendered.height() {
        return Err(Error::DimensionMismatch {
            what: "mask dimensions",
            expected: detected.width() * detected.height(),
            actual: rendered.width() * rendered.height(),
        });
    }
    let area = detected.area();
    if area == 0 {
        return Err(Error::EmptyDetectedMask);
    }
    let ratio = detected.intersection_area(rendered) as f64 / area as f64;
    Ok((ratio > 1.0 - cfg.eps_2d, ratio))
}

/// Runs both checks and returns their conjunction. A pose whose rendering
/// misses the image entirely fails the 2D check (score 0) rather than
/// erroring.
pub fn observable_correctness(
    x: &PointCloud,
    detected_mask: &BinaryMask,
    t_hat: &Pose,
    model: &CadModel,
    camera: &CameraIntrinsics,
    cfg: &CertificateConfig,
) -> Result<CertificateResult> {
    let tree = model.dense_tree();
    observable_correctness_with_tree(x, detected_mask, t_hat, model, &tree, camera, cfg)
}

/// [`observable_correctness`] with a caller-cached model-frame tree.
pub fn observable_correctness_with_tree(
    x: &PointCloud,
    detected_mask: &BinaryMask,
    t_hat: &Pose,
    model: &CadModel,
    model_tree: &KdTree3,
    camera: &CameraIntrinsics,
    cfg: &CertificateConfig,
) -> Result<CertificateResult> {
    let (oc_3d, score_3d) = cert_3d_with_tree(x, t_hat, model, model_tree, cfg);
    let (oc_2d, score_2d) = match render_mask(t_hat, model, camera, cfg) {
        Ok(rendered) => cert_2d(detected_mask, &rendered, cfg)?,
        Err(Error::EmptyProjection) => (false, 0.0),
        Err(e) => return Err(e),
    };
    Ok(CertificateResult {
        oc: oc_3d && oc_2d,
        oc_3d,
        oc_2d,
        score_3d,
        score_2d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3xX;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn cube_sample(m: usize, side: f64, seed: u64) -> Matrix3xX<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = side / 2.0;
        let mut cols = vec![
            Vector3::new(-h, -h, -h),
            Vector3::new(h, -h, -h),
            Vector3::new(-h, h, -h),
            Vector3::new(-h, -h, h),
            Vector3::new(h, h, -h),
            Vector3::new(h, -h, h),
            Vector3::new(-h, h, h),
            Vector3::new(h, h, h),
        ];
        while cols.len() < m {
            // Uniform over the six faces.
            let face = rng.random_range(0..6usize);
            let a = rng.random_range(-h..h);
            let b = rng.random_range(-h..h);
            cols.push(match face {
                0 => Vector3::new(a, b, h),
                1 => Vector3::new(a, b, -h),
                2 => Vector3::new(a, h, b),
                3 => Vector3::new(a, -h, b),
                4 => Vector3::new(h, a, b),
                _ => Vector3::new(-h, a, b),
            });
        }
        Matrix3xX::from_columns(&cols)
    }

    fn cube_model(m: usize, side: f64, seed: u64) -> CadModel {
        let points = cube_sample(m, side, seed);
        let kps = crate::geometry::KeypointSet::new(points.columns(0, 8).into_owned()).unwrap();
        CadModel::new(points, kps).unwrap()
    }

    #[test]
    fn render_single_point_and_dilation() {
        let cam = small_camera();
        let pts = Matrix3xX::from_columns(&[
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 1.0),
        ]);
        let kps = crate::geometry::KeypointSet::new(pts.clone()).unwrap();
        let model = CadModel::with_diameter(pts, kps, 1.0).unwrap();
        let mut cfg = CertificateConfig::for_diameter(1.0);
        cfg.dilation_radius = 0;
        let mask = render_mask(&Pose::identity(), &model, &cam, &cfg).unwrap();
        assert_eq!(mask.area(), 1);
        assert!(mask.get(50, 50));

        cfg.dilation_radius = 1;
        let mask = render_mask(&Pose::identity(), &model, &cam, &cfg).unwrap();
        assert_eq!(mask.area(), 9);
        for dy in 0..3 {
            for dx in 0..3 {
                assert!(mask.get(49 + dx, 49 + dy));
            }
        }
    }

    #[test]
    fn render_mask_grows_with_dilation_radius() {
        let cam = small_camera();
        let model = cube_model(256, 0.4, 31);
        let pose = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let mut cfg = CertificateConfig::for_diameter(model.diameter());
        let mut prev: Option<BinaryMask> = None;
        for radius in 0..3 {
            cfg.dilation_radius = radius;
            let mask = render_mask(&pose, &model, &cam, &cfg).unwrap();
            if let Some(p) = &prev {
                assert!(p.is_subset_of(&mask));
                assert!(mask.area() > p.area());
            }
            prev = Some(mask);
        }
    }

    #[test]
    fn render_mask_area_matches_analytic_face_projection() {
        let cam = CameraIntrinsics::new(40.0, 40.0, 40.0, 40.0, 80, 80).unwrap();
        let model = cube_model(2048, 1.0, 32);
        let pose = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let cfg = CertificateConfig {
            dilation_radius: 1,
            ..CertificateConfig::for_diameter(model.diameter())
        };
        let mask = render_mask(&pose, &model, &cam, &cfg).unwrap();
        // Head-on view: the silhouette is the front face at z = 1.5. A
        // continuous span of s pixels covers s + 1 pixel columns on average,
        // and dilation widens each side by the radius.
        let side_px = 40.0 * 1.0 / 1.5 + 1.0 + 2.0 * cfg.dilation_radius as f64;
        let analytic = side_px * side_px;
        let ratio = mask.area() as f64 / analytic;
        assert!(
            (ratio - 1.0).abs() < 0.10,
            "mask area {} vs analytic {analytic}",
            mask.area()
        );
    }

    #[test]
    fn render_mask_empty_projection_errors() {
        let cam = small_camera();
        let model = cube_model(64, 0.4, 33);
        let behind = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, -3.0)).unwrap();
        assert!(matches!(
            render_mask(&behind, &model, &cam, &CertificateConfig::for_diameter(1.0)),
            Err(Error::EmptyProjection)
        ));
    }

    #[test]
    fn cert_2d_examples() {
        let cfg = CertificateConfig::for_diameter(1.0);
        let mut m = BinaryMask::new(32, 32);
        for i in 0..10 {
            for j in 0..10 {
                m.set(i, j, true);
            }
        }
        let (ok, ratio) = cert_2d(&m, &m, &cfg).unwrap();
        assert!(ok && ratio == 1.0);

        let mut disjoint = BinaryMask::new(32, 32);
        disjoint.set(31, 31, true);
        let (ok, ratio) = cert_2d(&m, &disjoint, &cfg).unwrap();
        assert!(!ok && ratio == 0.0);

        // 100 detected pixels, 93 covered, slack 0.1.
        let mut covered = BinaryMask::new(32, 32);
        let mut count = 0;
        'outer: for i in 0..10 {
            for j in 0..10 {
                covered.set(i, j, true);
                count += 1;
                if count == 93 {
                    break 'outer;
                }
            }
        }
        let (ok, ratio) = cert_2d(&m, &covered, &cfg).unwrap();
        assert!(ok);
        assert!((ratio - 0.93).abs() < 1e-12);

        let empty = BinaryMask::new(32, 32);
        assert!(matches!(
            cert_2d(&empty, &m, &cfg),
            Err(Error::EmptyDetectedMask)
        ));
    }

    #[test]
    fn cert_2d_ratio_one_iff_subset() {
        let mut m = BinaryMask::new(16, 16);
        m.set(3, 3, true);
        m.set(4, 3, true);
        let mut bigger = m.clone();
        bigger.set(9, 9, true);
        let cfg = CertificateConfig::for_diameter(1.0);
        let (_, ratio) = cert_2d(&m, &bigger, &cfg).unwrap();
        assert_eq!(ratio, 1.0);
        let mut partial = m.clone();
        partial.set(4, 3, false);
        let (_, ratio) = cert_2d(&m, &partial, &cfg).unwrap();
        assert!(ratio < 1.0);
    }

    #[test]
    fn cert_3d_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let model = cube_model(512, 0.4, 35);
        let pose = crate::geometry::tests_support::random_pose(&mut rng);
        let x = crate::geometry::apply_pose(&pose, &model.dense_cloud());
        let cfg = CertificateConfig::for_diameter(model.diameter());

        let (ok, score) = cert_3d(&x, &pose, &model, &cfg);
        assert!(ok && score < 1e-12);

        // 5% of points replaced by points 1 m away still pass at p = 0.9.
        let mut pts = x.points().clone();
        let n = pts.ncols();
        for i in 0..(n / 20) {
            let mut c = pts.column_mut(i * 20);
            c[0] += 1.0;
        }
        let corrupted = PointCloud::new(pts).unwrap();
        let (ok, _) = cert_3d(&corrupted, &pose, &model, &cfg);
        assert!(ok);

        // Permutation invariance of the percentile score.
        let mut perm: Vec<usize> = (0..corrupted.len()).collect();
        perm.reverse();
        let shuffled = corrupted.select(&perm).unwrap();
        let (_, s1) = cert_3d(&corrupted, &pose, &model, &cfg);
        let (_, s2) = cert_3d(&shuffled, &pose, &model, &cfg);
        assert_eq!(s1.to_bits(), s2.to_bits());

        // A pose off by half a diameter fails.
        let off = Pose::new(
            *pose.rotation(),
            pose.translation() + Vector3::new(0.5 * model.diameter(), 0.0, 0.0),
        )
        .unwrap();
        let (ok, _) = cert_3d(&x, &off, &model, &cfg);
        assert!(!ok);
    }

    #[test]
    fn observable_correctness_is_exact_conjunction() {
        let cam = small_camera();
        let model = cube_model(512, 0.4, 36);
        let pose = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, 1.5)).unwrap();
        let x = crate::geometry::apply_pose(&pose, &model.dense_cloud());
        let cfg = CertificateConfig::for_diameter(model.diameter());

        let honest = render_mask(&pose, &model, &cam, &cfg).unwrap();
        let res = observable_correctness(&x, &honest, &pose, &model, &cam, &cfg).unwrap();
        assert!(res.oc && res.oc_3d && res.oc_2d);
        assert_eq!(res.oc, res.oc_3d && res.oc_2d);

        // Exact 3D fit but a detected mask entirely outside the projection.
        let mut outside = BinaryMask::new(cam.width, cam.height);
        outside.set(2, 2, true);
        outside.set(3, 2, true);
        let res = observable_correctness(&x, &outside, &pose, &model, &cam, &cfg).unwrap();
        assert!(res.oc_3d && !res.oc_2d && !res.oc);
    }

    #[test]
    fn certificate_json_uses_stable_keys() {
        let res = CertificateResult {
            oc: true,
            oc_3d: true,
            oc_2d: false,
            score_3d: 0.01,
            score_2d: 0.5,
        };
        let json = serde_json::to_string(&res).unwrap();
        assert_eq!(
            json,
            r#"{"oc":true,"oc3d":true,"oc2d":false,"score3d":0.01,"score2d":0.5}"#
        );
    }

    #[test]
    fn pgm_round_trip() {
        let mut mask = BinaryMask::new(70, 40);
        mask.set(0, 0, true);
        mask.set(69, 39, true);
        mask.set(13, 22, true);
        let dir = std::env::temp_dir().join("certpose_mask_tests");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round.pgm");
        mask.write_pgm(&path).unwrap();
        let back = BinaryMask::read_pgm(&path).unwrap();
        assert_eq!(mask, back);
    }
}
