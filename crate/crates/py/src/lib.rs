//! Python bindings: the main types and operations of the pose-estimation
//! pipeline. Points cross the boundary as lists of (x, y, z) tuples.

use nalgebra::{Matrix3, Matrix3xX, Vector3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use certpose::certificates as cert;
use certpose::corrector;
use certpose::ensemble;
use certpose::geometry;
use certpose::robust_points;
use certpose::synth;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(points: &[(f64, f64, f64)]) -> Matrix3xX<f64> {
    Matrix3xX::from_columns(
        &points
            .iter()
            .map(|&(x, y, z)| Vector3::new(x, y, z))
            .collect::<Vec<_>>(),
    )
}

fn to_tuples(points: &Matrix3xX<f64>) -> Vec<(f64, f64, f64)> {
    points
        .column_iter()
        .map(|c| (c[0], c[1], c[2]))
        .collect()
}

/// A rigid transform (row-major rotation plus translation).
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Pose {
    inner: geometry::Pose,
}

#[pymethods]
impl Pose {
    #[new]
    fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> PyResult<Self> {
        let r = Matrix3::from_fn(|i, j| rotation[i][j]);
        let t = Vector3::new(translation[0], translation[1], translation[2]);
        Ok(Pose {
            inner: geometry::Pose::new(r, t).map_err(err)?,
        })
    }

    #[staticmethod]
    fn identity() -> Self {
        Pose {
            inner: geometry::Pose::identity(),
        }
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        let r = self.inner.rotation();
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ]
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        let t = self.inner.translation();
        [t[0], t[1], t[2]]
    }

    fn transform(&self, points: Vec<(f64, f64, f64)>) -> Vec<(f64, f64, f64)> {
        points
            .iter()
            .map(|&(x, y, z)| {
                let p = self.inner.transform_point(&Vector3::new(x, y, z));
                (p[0], p[1], p[2])
            })
            .collect()
    }

    fn compose(&self, other: &Pose) -> Pose {
        Pose {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> Pose {
        Pose {
            inner: self.inner.inverse(),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Pose(t=[{:.4}, {:.4}, {:.4}])",
            self.inner.translation()[0],
            self.inner.translation()[1],
            self.inner.translation()[2]
        )
    }
}

/// A builtin CAD model: dense surface sample, keypoints and diameter.
#[pyclass]
struct CadModel {
    inner: geometry::CadModel,
}

#[pymethods]
impl CadModel {
    /// kind: "box" | "cylinder" | "lbracket".
    #[staticmethod]
    fn builtin(kind: &str, size: [f64; 3], seed: u64) -> PyResult<Self> {
        let kind: synth::BuiltinKind = kind.parse().map_err(err)?;
        Ok(CadModel {
            inner: synth::builtin_model(kind, Vector3::new(size[0], size[1], size[2]), seed)
                .map_err(err)?,
        })
    }

    #[getter]
    fn diameter(&self) -> f64 {
        self.inner.diameter()
    }

    #[getter]
    fn keypoints(&self) -> Vec<(f64, f64, f64)> {
        to_tuples(self.inner.keypoints().points())
    }

    fn dense_points(&self) -> Vec<(f64, f64, f64)> {
        to_tuples(self.inner.dense_points())
    }

    fn __len__(&self) -> usize {
        self.inner.dense_len()
    }
}

/// One labeled synthetic scene.
#[pyclass]
struct Scene {
    inner: synth::SceneSample,
    camera: cert::CameraIntrinsics,
}

#[pymethods]
impl Scene {
    #[getter]
    fn points(&self) -> Vec<(f64, f64, f64)> {
        to_tuples(self.inner.x.points())
    }

    #[getter]
    fn true_pose(&self) -> Pose {
        Pose {
            inner: self.inner.t_star.clone(),
        }
    }

    #[getter]
    fn true_keypoints(&self) -> Vec<(f64, f64, f64)> {
        to_tuples(self.inner.y_star.points())
    }

    #[getter]
    fn mask_area(&self) -> usize {
        self.inner.mask.area()
    }
}

/// Result of the robust corrector.
#[pyclass]
struct Correction {
    #[pyo3(get)]
    corrected_keypoints: Vec<(f64, f64, f64)>,
    corrected_pose: geometry::Pose,
    #[pyo3(get)]
    final_objective: f64,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    converged: bool,
}

#[pymethods]
impl Correction {
    #[getter]
    fn corrected_pose(&self) -> Pose {
        Pose {
            inner: self.corrected_pose.clone(),
        }
    }
}

/// Certificate outcome.
#[pyclass]
struct Certificate {
    #[pyo3(get)]
    oc: bool,
    #[pyo3(get)]
    oc3d: bool,
    #[pyo3(get)]
    oc2d: bool,
    #[pyo3(get)]
    score3d: f64,
    #[pyo3(get)]
    score2d: f64,
}

/// Generates one synthetic scene of the model.
#[pyfunction]
#[pyo3(signature = (model, seed, gaussian_noise_std=0.0, outlier_rate=0.0, mask_blobs=0))]
fn generate_scene(
    model: &CadModel,
    seed: u64,
    gaussian_noise_std: f64,
    outlier_rate: f64,
    mask_blobs: usize,
) -> PyResult<Scene> {
    let cfg = synth::SceneConfig {
        gaussian_noise_std,
        outlier_rate,
        mask_corruption: synth::MaskCorruption {
            blob_count: mask_blobs,
            blob_radius: 4,
            erosion_radius: 3,
        },
        ..synth::SceneConfig::default()
    };
    let camera = cfg.camera.clone();
    Ok(Scene {
        inner: synth::generate_scene(&model.inner, &cfg, seed).map_err(err)?,
        camera,
    })
}

/// Least-squares registration of keypoints onto model keypoints.
#[pyfunction]
fn register(
    detected: Vec<(f64, f64, f64)>,
    model: &CadModel,
) -> PyResult<Pose> {
    let y = geometry::KeypointSet::new(to_matrix(&detected)).map_err(err)?;
    Ok(Pose {
        inner: geometry::register(&y, model.inner.keypoints()).map_err(err)?,
    })
}

/// Adds uniform noise to each keypoint with the given probability.
#[pyfunction]
fn perturb_keypoints(
    keypoints: Vec<(f64, f64, f64)>,
    sigma: f64,
    probability: f64,
    diameter: f64,
    seed: u64,
) -> PyResult<Vec<(f64, f64, f64)>> {
    let y = geometry::KeypointSet::new(to_matrix(&keypoints)).map_err(err)?;
    Ok(to_tuples(
        synth::perturb_keypoints(&y, sigma, probability, diameter, seed).points(),
    ))
}

/// Runs the robust corrector on detected keypoints against a scene cloud.
#[pyfunction]
#[pyo3(signature = (detected, model, points, robust=true))]
fn solve_correction(
    detected: Vec<(f64, f64, f64)>,
    model: &CadModel,
    points: Vec<(f64, f64, f64)>,
    robust: bool,
) -> PyResult<Correction> {
    let y = geometry::KeypointSet::new(to_matrix(&detected)).map_err(err)?;
    let x = geometry::PointCloud::new(to_matrix(&points)).map_err(err)?;
    let mut cfg = corrector::CorrectorConfig::for_model(&model.inner);
    if !robust {
        cfg.loss_variant = corrector::LossVariant::NonRobust;
    }
    let res = corrector::solve_correction(&y, &model.inner, &x, &cfg).map_err(err)?;
    Ok(Correction {
        corrected_keypoints: to_tuples(res.corrected_keypoints.points()),
        corrected_pose: res.corrected_pose,
        final_objective: res.final_objective,
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// Evaluates the observable-correctness certificate of a pose on a scene.
#[pyfunction]
fn certify(scene: &Scene, pose: &Pose, model: &CadModel) -> PyResult<Certificate> {
    let cfg = cert::CertificateConfig::for_diameter(model.inner.diameter());
    let res = cert::observable_correctness(
        &scene.inner.x,
        &scene.inner.mask,
        &pose.inner,
        &model.inner,
        &scene.camera,
        &cfg,
    )
    .map_err(err)?;
    Ok(Certificate {
        oc: res.oc,
        oc3d: res.oc_3d,
        oc2d: res.oc_2d,
        score3d: res.score_3d,
        score2d: res.score_2d,
    })
}

/// One-directional ADD-S between two poses of a model, in meters.
#[pyfunction]
fn adds_metric(pose_a: &Pose, pose_b: &Pose, model: &CadModel) -> f64 {
    geometry::adds_metric(&pose_a.inner, &pose_b.inner, &model.inner)
}

/// GNC robust centroid; returns (centroid, weights).
#[pyfunction]
fn robust_centroid(
    points: Vec<(f64, f64, f64)>,
    clamp: f64,
) -> PyResult<([f64; 3], Vec<f64>)> {
    let cloud = geometry::PointCloud::new(to_matrix(&points)).map_err(err)?;
    let cfg = robust_points::GncConfig::new(clamp).map_err(err)?;
    let (c, w) = robust_points::robust_centroid(&cloud, &cfg);
    Ok(([c[0], c[1], c[2]], w))
}

/// Farthest-point subsample indices in selection order.
#[pyfunction]
fn fps_indices(points: Vec<(f64, f64, f64)>, count: usize, seed: u64) -> PyResult<Vec<usize>> {
    let cloud = geometry::PointCloud::new(to_matrix(&points)).map_err(err)?;
    if count == 0 || count > cloud.len() {
        return Err(PyValueError::new_err("count out of range"));
    }
    Ok(robust_points::fps_indices(&cloud, count, seed))
}

/// Truncated-least-squares loss between a cloud and a posed model.
#[pyfunction]
fn loss_self(
    points: Vec<(f64, f64, f64)>,
    pose: &Pose,
    model: &CadModel,
    c_bar: f64,
) -> PyResult<f64> {
    let x = geometry::PointCloud::new(to_matrix(&points)).map_err(err)?;
    Ok(ensemble::loss_self(&x, &pose.inner, &model.inner, c_bar))
}

#[pymodule]
fn certpose_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Pose>()?;
    m.add_class::<CadModel>()?;
    m.add_class::<Scene>()?;
    m.add_class::<Correction>()?;
    m.add_class::<Certificate>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_keypoints, m)?)?;
    m.add_function(wrap_pyfunction!(solve_correction, m)?)?;
    m.add_function(wrap_pyfunction!(certify, m)?)?;
    m.add_function(wrap_pyfunction!(adds_metric, m)?)?;
    m.add_function(wrap_pyfunction!(robust_centroid, m)?)?;
    m.add_function(wrap_pyfunction!(fps_indices, m)?)?;
    m.add_function(wrap_pyfunction!(loss_self, m)?)?;
    Ok(())
}
