//! Outlier-robust 6D object pose estimation from semantic keypoints and
//! point clouds.
//!
//! The pipeline: a keypoint detector proposes detections, the robust
//! corrector refines them against the observed point cloud under a
//! truncated-least-squares loss, observable-correctness certificates decide
//! whether the corrected pose is consistent with the 3D and 2D evidence, and
//! certificate-gated ensemble self-training uses certified outputs as
//! supervision for further training. A synthetic-scene harness generates
//! labeled data for all experiments.

pub mod certificates;
pub mod corrector;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod kdtree;
pub mod model_io;
pub mod plot;
pub mod robust_points;
pub mod synth;

pub use certificates::{
    cert_2d, cert_3d, observable_correctness, render_mask, BinaryMask, CameraIntrinsics,
    CertificateConfig, CertificateResult,
};
pub use error::{Error, Result};
pub use robust_points::{
    center_cloud, fps, pooling_scores, random_sample, robust_centroid, robust_pool, GncConfig,
    PoolingParams,
};
pub use geometry::{
    adds_auc, adds_metric, apply_pose, apply_pose_keypoints, nearest_distances,
    nearest_distances_with, percentile, register, registration_with_diff, tls, CadModel,
    KeypointSet, NnBackend, PointCloud, Pose, RegistrationDiff, ScoreSet,
};
