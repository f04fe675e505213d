//! Outlier-robust point-cloud primitives: the graduated non-convexity
//! robust centroid, score-based robust pooling, and the sampling baselines
//! it is compared against (farthest-point and random sampling).

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Parameters of the GNC-TLS solver behind [`robust_centroid`].
#[derive(Debug, Clone)]
pub struct GncConfig {
    /// TLS clamp for the centroid residuals, in meters.
    pub c_bar_centroid: f64,
    /// Multiplicative schedule on the non-convexity parameter, > 1.
    pub mu_update: f64,
    pub max_outer_iters: usize,
    pub convergence_tol: f64,
}

impl GncConfig {
    pub fn new(c_bar_centroid: f64) -> Result<Self> {
        let cfg = GncConfig {
            c_bar_centroid,
            mu_update: 1.4,
            max_outer_iters: 100,
            convergence_tol: 1e-6,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_bar_centroid > 0.0 && self.c_bar_centroid.is_finite()) {
            return Err(Error::InvalidInput("c_bar_centroid must be positive".into()));
        }
        if self.mu_update <= 1.0 {
            return Err(Error::InvalidInput("mu_update must exceed 1".into()));
        }
        if self.max_outer_iters == 0 || self.convergence_tol <= 0.0 {
            return Err(Error::InvalidInput("bad GNC iteration controls".into()));
        }
        Ok(())
    }
}

/// Robust centroid via GNC on the TLS loss.
///
/// Alternates weighted-mean updates with the GNC-TLS weight rule while the
/// non-convexity parameter μ grows by `mu_update` per round. Returns the
/// centroid and the final per-point weights in [0, 1]. If every weight hits
/// zero the plain mean is returned with all-zero weights.
pub fn robust_centroid(cloud: &PointCloud, cfg: &GncConfig) -> (Vector3<f64>, Vec<f64>) {
    let n = cloud.len();
    let pts: Vec<Vector3<f64>> = (0..n).map(|i| cloud.column(i)).collect();
    let plain_mean = pts.iter().sum::<Vector3<f64>>() / n as f64;
    let c2 = cfg.c_bar_centroid * cfg.c_bar_centroid;

    let mut weights = vec![1.0f64; n];
    let mut centroid = plain_mean;

    let r_max_sq = pts
        .iter()
        .map(|p| (p - centroid).norm_squared())
        .fold(0.0f64, f64::max);
    if r_max_sq == 0.0 {
        return (centroid, weights);
    }
    let mut mu = (c2 / (2.0 * r_max_sq - c2)).max(1e-6);

    for _ in 0..cfg.max_outer_iters {
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return (plain_mean, vec![0.0; n]);
        }
        let mut acc = Vector3::zeros();
        for (p, w) in pts.iter().zip(&weights) {
            acc += p * *w;
        }
        centroid = acc / wsum;

        let t_inlier = mu / (mu + 1.0) * c2;
        let t_outlier = (mu + 1.0) / mu * c2;
        let mut max_change = 0.0f64;
        let mut all_binary = true;
        for (i, p) in pts.iter().enumerate() {
            let r2 = (p - centroid).norm_squared();
            let w = if r2 <= t_inlier {
                1.0
            } else if r2 >= t_outlier {
                0.0
            } else {
                all_binary = false;
                (cfg.c_bar_centroid * (mu * (mu + 1.0)).sqrt() / r2.sqrt() - mu).clamp(0.0, 1.0)
            };
            max_change = max_change.max((w - weights[i]).abs());
            weights[i] = w;
        }
        if max_change < cfg.convergence_tol || (all_binary && max_change == 0.0) {
            break;
        }
        mu *= cfg.mu_update;
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return (plain_mean, vec![0.0; n]);
    }
    (centroid, weights)
}

/// Shifts every column by `−x_bar`; features are untouched.
pub fn center_cloud(cloud: &PointCloud, x_bar: &Vector3<f64>) -> PointCloud {
    let mut pts = cloud.points().clone();
    for mut col in pts.column_iter_mut() {
        let c = col.clone_owned() - x_bar;
        col.copy_from(&c);
    }
    PointCloud::with_features(pts, cloud.features().cloned())
        .expect("centering preserves validity")
}

/// Trainable parameters of the robust pooling layer: a per-point scalar MLP
/// (two affine layers with a rectifier between) plus an n×n mixing matrix
/// and bias. The mixing matrix pins the layer to a fixed input size n.
#[derive(Debug, Clone)]
pub struct PoolingParams {
    pub mlp_w1: DMatrix<f64>,
    pub mlp_b1: DVector<f64>,
    pub mlp_w2: DVector<f64>,
    pub mlp_b2: f64,
    pub mixing_matrix: DMatrix<f64>,
    pub mixing_bias: DVector<f64>,
    pub n_prime: usize,
}

impl PoolingParams {
    pub fn new(
        mlp_w1: DMatrix<f64>,
        mlp_b1: DVector<f64>,
        mlp_w2: DVector<f64>,
        mlp_b2: f64,
        mixing_matrix: DMatrix<f64>,
        mixing_bias: DVector<f64>,
        n_prime: usize,
    ) -> Result<Self> {
        let hidden = mlp_w1.nrows();
        if mlp_b1.len() != hidden || mlp_w2.len() != hidden {
            return Err(Error::DimensionMismatch {
                what: "pooling MLP hidden width",
                expected: hidden,
                actual: mlp_b1.len().min(mlp_w2.len()),
            });
        }
        let n = mixing_matrix.nrows();
        if mixing_matrix.ncols() != n || mixing_bias.len() != n {
            return Err(Error::DimensionMismatch {
                what: "pooling mixing matrix",
                expected: n,
                actual: mixing_matrix.ncols().min(mixing_bias.len()),
            });
        }
        if n_prime == 0 || n_prime >= n {
            return Err(Error::InvalidInput(format!(
                "n_prime must satisfy 0 < n_prime < n, got {n_prime} for n = {n}"
            )));
        }
        let params = PoolingParams {
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            mixing_matrix,
            mixing_bias,
            n_prime,
        };
        if !params.all_finite() {
            return Err(Error::InvalidInput("pooling parameters must be finite".into()));
        }
        Ok(params)
    }

    /// Identity mixing with an MLP that passes the first feature coordinate
    /// through unchanged (a pair of rectifiers reconstructs the identity).
    pub fn passthrough(feature_dim: usize, n: usize, n_prime: usize) -> Result<Self> {
        let mut w1 = DMatrix::zeros(2, feature_dim);
        w1[(0, 0)] = 1.0;
        w1[(1, 0)] = -1.0;
        let w2 = DVector::from_vec(vec![1.0, -1.0]);
        PoolingParams::new(
            w1,
            DVector::zeros(2),
            w2,
            0.0,
            DMatrix::identity(n, n),
            DVector::zeros(n),
            n_prime,
        )
    }

    pub fn input_size(&self) -> usize {
        self.mixing_matrix.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp_w1.ncols()
    }

    fn all_finite(&self) -> bool {
        self.mlp_w1.iter().all(|v| v.is_finite())
            && self.mlp_b1.iter().all(|v| v.is_finite())
            && self.mlp_w2.iter().all(|v| v.is_finite())
            && self.mlp_b2.is_finite()
            && self.mixing_matrix.iter().all(|v| v.is_finite())
            && self.mixing_bias.iter().all(|v| v.is_finite())
    }

    fn mlp_scalar(&self, f: &DVector<f64>) -> f64 {
        let hidden = (&self.mlp_w1 * f + &self.mlp_b1).map(|v: f64| v.max(0.0));
        self.mlp_w2.dot(&hidden) + self.mlp_b2
    }
}

/// Per-point scores `s = W·[MLP(f₁), …, MLP(fₙ)]ᵀ + w`.
pub fn pooling_scores(features: &DMatrix<f64>, params: &PoolingParams) -> Result<DVector<f64>> {
    let n = params.input_size();
    if features.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "pooling input points",
            expected: n,
            actual: features.ncols(),
        });
    }
    if features.nrows() != params.feature_dim() {
        return Err(Error::DimensionMismatch {
            what: "pooling feature dimension",
            expected: params.feature_dim(),
            actual: features.nrows(),
        });
    }
    let mlp_out = DVector::from_fn(n, |i, _| {
        params.mlp_scalar(&features.column(i).into_owned())
    });
    Ok(&params.mixing_matrix * mlp_out + &params.mixing_bias)
}

/// Keeps the `n′` highest-scoring columns (ties broken by lower index),
/// preserving the original relative order.
pub fn robust_pool(cloud: &PointCloud, params: &PoolingParams) -> Result<PointCloud> {
    let features = cloud
        .features()
        .ok_or_else(|| Error::InvalidInput("robust_pool requires point features".into()))?;
    let scores = pooling_scores(features, params)?;
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order[..params.n_prime].to_vec();
    selected.sort_unstable();
    cloud.select(&selected)
}

/// Farthest-point sampling order: seed-deterministic first index, then each
/// pick maximizes the minimum distance to the picked set (ties by lowest
/// index). Returns indices in selection order.
pub fn fps_indices(cloud: &PointCloud, n_prime: usize, seed: u64) -> Vec<usize> {
    let n = cloud.len();
    fps_indices_from(cloud, n_prime, (seed % n as u64) as usize)
}

/// [`fps_indices`] starting from an explicit first index.
pub fn fps_indices_from(cloud: &PointCloud, n_prime: usize, first: usize) -> Vec<usize> {
    let n = cloud.len();
    let n_prime = n_prime.min(n);
    let pts: Vec<Vector3<f64>> = (0..n).map(|i| cloud.column(i)).collect();
    let mut selected = Vec::with_capacity(n_prime);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = first.min(n - 1);
    selected.push(current);
    for _ in 1..n_prime {
        let p = pts[current];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, q) in pts.iter().enumerate() {
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

/// Farthest-point subsample of `n′` points (see [`fps_indices`]).
pub fn fps(cloud: &PointCloud, n_prime: usize, seed: u64) -> Result<PointCloud> {
    if n_prime == 0 || n_prime > cloud.len() {
        return Err(Error::InvalidInput(format!(
            "fps n_prime {n_prime} out of range for {} points",
            cloud.len()
        )));
    }
    cloud.select(&fps_indices(cloud, n_prime, seed))
}

/// Index set of a seed-deterministic uniform sample without replacement,
/// in ascending order.
pub fn random_sample_indices(n: usize, n_prime: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n_prime.min(n) {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut chosen = idx[..n_prime.min(n)].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Uniform subsample of `n′` points without replacement.
pub fn random_sample(cloud: &PointCloud, n_prime: usize, seed: u64) -> Result<PointCloud> {
    if n_prime == 0 || n_prime > cloud.len() {
        return Err(Error::InvalidInput(format!(
            "random_sample n_prime {n_prime} out of range for {} points",
            cloud.len()
        )));
    }
    cloud.select(&random_sample_indices(cloud.len(), n_prime, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3xX;

    fn cloud_from(cols: Vec<Vector3<f64>>) -> PointCloud {
        PointCloud::from_columns(&cols).unwrap()
    }

    fn ball_and_box(seed: u64, n_in: usize, n_out: usize) -> (PointCloud, Vector3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center = Vector3::new(1.0, 1.0, 1.0);
        let mut cols = Vec::new();
        for _ in 0..n_in {
            loop {
                let v = Vector3::new(
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.02..0.02),
                );
                if v.norm() <= 0.02 {
                    cols.push(center + v);
                    break;
                }
            }
        }
        for _ in 0..n_out {
            cols.push(Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
        }
        (cloud_from(cols), center)
    }

    #[test]
    fn centroid_of_identical_points() {
        let q = Vector3::new(0.3, -0.2, 1.4);
        let cloud = cloud_from(vec![q; 12]);
        let cfg = GncConfig::new(0.1).unwrap();
        let (c, w) = robust_centroid(&cloud, &cfg);
        assert!((c - q).norm() < 1e-12);
        assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn centroid_agrees_with_mean_without_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cols: Vec<Vector3<f64>> = (0..100)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                )
            })
            .collect();
        let mean = cols.iter().sum::<Vector3<f64>>() / cols.len() as f64;
        let cloud = cloud_from(cols);
        let cfg = GncConfig::new(0.1).unwrap();
        let (c, _) = robust_centroid(&cloud, &cfg);
        assert!((c - mean).norm() < 0.01);
    }

    #[test]
    fn centroid_rejects_30_percent_outliers() {
        let (cloud, center) = ball_and_box(22, 70, 30);
        let cfg = GncConfig::new(0.1).unwrap();
        let (c, w) = robust_centroid(&cloud, &cfg);
        let plain: Vector3<f64> =
            (0..cloud.len()).map(|i| cloud.column(i)).sum::<Vector3<f64>>() / cloud.len() as f64;
        assert!((c - center).norm() < 0.02, "robust error {}", (c - center).norm());
        assert!((plain - center).norm() > 0.1);
        assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn centroid_is_translation_equivariant() {
        let (cloud, _) = ball_and_box(23, 70, 30);
        let cfg = GncConfig::new(0.1).unwrap();
        let (c0, w0) = robust_centroid(&cloud, &cfg);
        let shift = Vector3::new(-3.0, 0.5, 7.25);
        let shifted = center_cloud(&cloud, &(-shift));
        let (c1, w1) = robust_centroid(&shifted, &cfg);
        assert!((c1 - (c0 + shift)).norm() < 1e-9);
        for (a, b) in w0.iter().zip(&w1) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn center_cloud_round_trip() {
        let (cloud, _) = ball_and_box(24, 20, 5);
        let x_bar = Vector3::new(0.4, -1.0, 2.0);
        assert_eq!(center_cloud(&cloud, &Vector3::zeros()), cloud);
        let back = center_cloud(&center_cloud(&cloud, &x_bar), &(-x_bar));
        for i in 0..cloud.len() {
            assert!((back.column(i) - cloud.column(i)).norm() < 1e-12);
        }
        let single = cloud_from(vec![x_bar]);
        let origin = center_cloud(&single, &x_bar);
        assert_eq!(origin.column(0), Vector3::zeros());
    }

    #[test]
    fn pooling_scores_bias_passthrough_and_identity() {
        let n = 5;
        let d = 3;
        // Zero MLP: scores reduce to the bias.
        let params = PoolingParams::new(
            DMatrix::zeros(2, d),
            DVector::zeros(2),
            DVector::zeros(2),
            0.0,
            DMatrix::from_fn(n, n, |i, j| ((i + j) % 3) as f64),
            DVector::from_fn(n, |i, _| (i + 1) as f64),
            2,
        )
        .unwrap();
        let features = DMatrix::from_fn(d, n, |i, j| (i * n + j) as f64);
        let s = pooling_scores(&features, &params).unwrap();
        for i in 0..n {
            assert_eq!(s[i], (i + 1) as f64);
        }

        // Identity mixing + first-coordinate MLP: scores = first feature row.
        let params = PoolingParams::passthrough(d, n, 2).unwrap();
        let s = pooling_scores(&features, &params).unwrap();
        for i in 0..n {
            assert!((s[i] - features[(0, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_scores_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let (n, d, hidden) = (7, 4, 16);
        let params = PoolingParams::new(
            DMatrix::from_fn(hidden, d, |_, _| rng.random_range(-1.0..1.0)),
            DVector::from_fn(hidden, |_, _| rng.random_range(-1.0..1.0)),
            DVector::from_fn(hidden, |_, _| rng.random_range(-1.0..1.0)),
            rng.random_range(-1.0..1.0),
            DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)),
            DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
            3,
        )
        .unwrap();
        let features = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
        let s = pooling_scores(&features, &params).unwrap();
        for i in 0..n {
            let mut oracle = params.mixing_bias[i];
            for j in 0..n {
                let mut mlp = params.mlp_b2;
                for h in 0..hidden {
                    let mut pre = params.mlp_b1[h];
                    for k in 0..d {
                        pre += params.mlp_w1[(h, k)] * features[(k, j)];
                    }
                    mlp += params.mlp_w2[h] * pre.max(0.0);
                }
                oracle += params.mixing_matrix[(i, j)] * mlp;
            }
            assert!((s[i] - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn pooling_rejects_dimension_mismatch() {
        let params = PoolingParams::passthrough(3, 5, 2).unwrap();
        let features = DMatrix::zeros(3, 6);
        assert!(matches!(
            pooling_scores(&features, &params),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn featured_cloud(n: usize, scores: &[f64]) -> PointCloud {
        let cols: Vec<Vector3<f64>> = (0..n).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let features = DMatrix::from_fn(1, n, |_, j| scores[j]);
        PointCloud::with_features(Matrix3xX::from_columns(&cols), Some(features)).unwrap()
    }

    #[test]
    fn robust_pool_selection_rules() {
        // Strictly increasing scores with n' = n − 1 drop the first point.
        let n = 6;
        let scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let cloud = featured_cloud(n, &scores);
        let mut params = PoolingParams::passthrough(1, n, n - 1).unwrap();
        let pooled = robust_pool(&cloud, &params).unwrap();
        assert_eq!(pooled.len(), n - 1);
        assert_eq!(pooled.column(0)[0], 1.0);

        // Constant scores: ties break to the first k indices.
        let cloud = featured_cloud(n, &[0.5; 6]);
        params.n_prime = 3;
        let pooled = robust_pool(&cloud, &params).unwrap();
        for i in 0..3 {
            assert_eq!(pooled.column(i)[0], i as f64);
        }
    }

    #[test]
    fn robust_pool_matches_argsort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let n = 40;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cloud = featured_cloud(n, &scores);
        let params = PoolingParams::passthrough(1, n, 15).unwrap();
        let pooled = robust_pool(&cloud, &params).unwrap();

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut expected = order[..15].to_vec();
        expected.sort_unstable();
        for (i, &idx) in expected.iter().enumerate() {
            assert_eq!(pooled.column(i)[0], idx as f64);
        }
    }

    #[test]
    fn fps_examples() {
        // n' = n returns every point (as a set).
        let (cloud, _) = ball_and_box(27, 10, 5);
        let all = fps_indices(&cloud, cloud.len(), 3);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..cloud.len()).collect::<Vec<_>>());

        // Collinear points starting at 0 pick the far endpoint next.
        let cols: Vec<Vector3<f64>> = (0..=10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let line = cloud_from(cols);
        assert_eq!(fps_indices(&line, 2, 0), vec![0, 10]);
    }

    #[test]
    fn fps_matches_greedy_oracle() {
        let (cloud, _) = ball_and_box(28, 30, 10);
        let got = fps_indices(&cloud, 8, 5);

        // Independent greedy implementation.
        let n = cloud.len();
        let first = (5u64 % n as u64) as usize;
        let mut chosen = vec![first];
        while chosen.len() < 8 {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for i in 0..n {
                let d2 = chosen
                    .iter()
                    .map(|&c| (cloud.column(i) - cloud.column(c)).norm_squared())
                    .fold(f64::INFINITY, f64::min);
                if d2 > best.0 {
                    best = (d2, i);
                }
            }
            chosen.push(best.1);
        }
        assert_eq!(got, chosen);
    }

    #[test]
    fn random_sample_determinism_and_frequency() {
        let (cloud, _) = ball_and_box(29, 8, 2);
        let a = random_sample(&cloud, cloud.len(), 11).unwrap();
        assert_eq!(a.len(), cloud.len());

        let s1 = random_sample_indices(10, 4, 42);
        let s2 = random_sample_indices(10, 4, 42);
        assert_eq!(s1, s2);

        let n = 10;
        let k = 3;
        let reps = 10_000;
        let mut counts = vec![0usize; n];
        for rep in 0..reps {
            for idx in random_sample_indices(n, k, 1000 + rep as u64) {
                counts[idx] += 1;
            }
        }
        let p = k as f64 / n as f64;
        let sigma = (p * (1.0 - p) / reps as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / reps as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma + 0.01,
                "frequency {freq} outside {p} ± 3σ"
            );
        }
    }
}
