//! Python bindings: scenes, cameras, the score decoder, distillation,
//! viewpoint search and the correlation metrics.

use aesfield::aesthetic::{self, DecoderWeights, ViewScorer, TEACHER_GRID, THIRDS_SIGMA};
use aesfield::bench::procedural_view;
use aesfield::distill::{fit_field, DistillConfig};
use aesfield::geometry::{pose_from_params, CameraIntrinsics, CameraPose, PoseParams5};
use aesfield::raster::{self, Channels, RenderOptions};
use aesfield::scene::{self, SyntheticKind, SyntheticSpec};
use aesfield::search::{self, SearchConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(aesfield, AesfieldError, PyException);

fn err(e: aesfield::Error) -> PyErr {
    AesfieldError::new_err(e.to_string())
}

fn vec3(v: [f64; 3]) -> nalgebra::Vector3<f64> {
    nalgebra::Vector3::new(v[0], v[1], v[2])
}

#[pyclass(name = "Intrinsics", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyIntrinsics(CameraIntrinsics);

#[pymethods]
impl PyIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> PyResult<Self> {
        CameraIntrinsics::new(fx, fy, cx, cy, width, height).map(PyIntrinsics).map_err(err)
    }

    /// Centered principal point, horizontal field of view in degrees.
    #[staticmethod]
    fn from_fov(width: u32, height: u32, fov_deg: f64) -> PyResult<Self> {
        CameraIntrinsics::from_fov(width, height, fov_deg.to_radians()).map(PyIntrinsics).map_err(err)
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!("Intrinsics(fx={}, fy={}, cx={}, cy={}, width={}, height={})", c.fx, c.fy, c.cx, c.cy, c.width, c.height)
    }
}

#[pyclass(name = "Pose", frozen, from_py_object)]
#[derive(Clone)]
struct PyPose(CameraPose);

#[pymethods]
impl PyPose {
    #[staticmethod]
    fn look_at(eye: [f64; 3], target: [f64; 3]) -> PyResult<Self> {
        CameraPose::look_at(vec3(eye), vec3(target)).map(PyPose).map_err(err)
    }

    /// From `[tx, ty, tz, yaw, pitch]`.
    #[staticmethod]
    fn from_params(params: [f64; 5]) -> PyResult<Self> {
        pose_from_params(&PoseParams5::from_array(params)).map(PyPose).map_err(err)
    }

    /// Row-major 3x4 camera-to-world matrix.
    #[staticmethod]
    fn from_c2w(m: [f64; 12]) -> PyResult<Self> {
        CameraPose::from_c2w(&m).map(PyPose).map_err(err)
    }

    fn params(&self) -> PyResult<[f64; 5]> {
        aesfield::geometry::params_from_pose(&self.0).map(|p| p.to_array()).map_err(err)
    }

    fn c2w(&self) -> [f64; 12] {
        self.0.c2w()
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        let c = self.0.center;
        [c.x, c.y, c.z]
    }

    fn __repr__(&self) -> String {
        let c = self.0.center;
        format!("Pose(center=[{}, {}, {}])", c.x, c.y, c.z)
    }
}

/// A rendered image: planar `data` of `channels * height * width` values
/// and per-pixel `alpha`.
#[pyclass(name = "Image", frozen)]
struct PyImage {
    #[pyo3(get)]
    height: usize,
    #[pyo3(get)]
    width: usize,
    #[pyo3(get)]
    channels: usize,
    #[pyo3(get)]
    data: Vec<f64>,
    #[pyo3(get)]
    alpha: Vec<f64>,
}

#[pymethods]
impl PyImage {
    fn at(&self, c: usize, y: usize, x: usize) -> PyResult<f64> {
        if c >= self.channels || y >= self.height || x >= self.width {
            return Err(pyo3::exceptions::PyIndexError::new_err("pixel index out of range"));
        }
        Ok(self.data[(c * self.height + y) * self.width + x])
    }
}

#[pyclass(name = "Scene", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyScene(scene::Scene);

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        scene::load_scene(path).map(PyScene).map_err(err)
    }

    /// `kind` is `grid`, `random` or `subject+clutter`; `n` overrides the
    /// default size.
    #[staticmethod]
    #[pyo3(signature = (kind, seed, n = None, feature_dim = 32))]
    fn synthetic(kind: &str, seed: u64, n: Option<usize>, feature_dim: usize) -> PyResult<Self> {
        let mut kind = SyntheticKind::by_name(kind).map_err(err)?;
        if let Some(n) = n {
            match &mut kind {
                SyntheticKind::Grid { n: side, .. } => *side = n,
                SyntheticKind::Random { count, .. } => *count = n,
                SyntheticKind::SubjectClutter { subject, .. } => *subject = n,
            }
        }
        scene::make_synthetic_scene(&SyntheticSpec { kind, feature_dim }, seed)
            .map(PyScene)
            .map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        scene::save_scene(&self.0, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.0.feature_dim()
    }

    #[getter]
    fn diagonal(&self) -> f64 {
        self.0.bbox().diagonal()
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        let c = self.0.bbox().center();
        [c.x, c.y, c.z]
    }

    fn features(&self) -> Vec<f64> {
        self.0.features().to_vec()
    }

    /// `mode` is `color` or `features`.
    #[pyo3(signature = (pose, intrinsics, mode = "color"))]
    fn render(&self, pose: &PyPose, intrinsics: &PyIntrinsics, mode: &str) -> PyResult<PyImage> {
        let channels = match mode {
            "color" => Channels::Color,
            "features" => Channels::Features,
            other => return Err(pyo3::exceptions::PyValueError::new_err(format!("unknown render mode '{other}'"))),
        };
        let (img, _) = raster::render(&self.0, &pose.0, &intrinsics.0, channels, &RenderOptions::default()).map_err(err)?;
        Ok(PyImage {
            height: img.height,
            width: img.width,
            channels: img.channels,
            data: img.data,
            alpha: img.alpha,
        })
    }
}

#[pyclass(name = "Decoder", skip_from_py_object)]
#[derive(Clone)]
struct PyDecoder(DecoderWeights);

#[pymethods]
impl PyDecoder {
    /// Truncated-identity projection, zero readout; rule-of-thirds spatial
    /// weights unless `thirds` is false.
    #[new]
    #[pyo3(signature = (teacher_dim, feature_dim, grid = TEACHER_GRID, thirds = true))]
    fn new(teacher_dim: usize, feature_dim: usize, grid: usize, thirds: bool) -> Self {
        let d = DecoderWeights::new(teacher_dim, feature_dim, grid, grid);
        PyDecoder(if thirds { d.with_thirds_spatial(THIRDS_SIGMA) } else { d })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let d: DecoderWeights =
            serde_json::from_str(text).map_err(|e| AesfieldError::new_err(format!("decoder JSON: {e}")))?;
        d.validate().map_err(err)?;
        Ok(PyDecoder(d))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("decoder serializes")
    }

    #[getter]
    fn readout(&self) -> Vec<f64> {
        self.0.readout.clone()
    }

    #[setter]
    fn set_readout(&mut self, readout: Vec<f64>) -> PyResult<()> {
        if readout.len() != self.0.teacher_dim {
            return Err(AesfieldError::new_err(format!(
                "readout needs {} values, got {}",
                self.0.teacher_dim,
                readout.len()
            )));
        }
        self.0.readout = readout;
        Ok(())
    }

    #[getter]
    fn bias(&self) -> f64 {
        self.0.bias
    }

    #[setter]
    fn set_bias(&mut self, bias: f64) {
        self.0.bias = bias;
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.0.feature_dim
    }
}

/// Aesthetic score of one view through the scene's feature block.
#[pyfunction]
fn score_view(scene: &PyScene, pose: &PyPose, intrinsics: &PyIntrinsics, decoder: &PyDecoder) -> PyResult<f64> {
    aesthetic::score_view(&scene.0, scene.0.features(), &pose.0, &intrinsics.0, &decoder.0, &RenderOptions::default())
        .map_err(err)
}

/// Score and 5-DOF gradient at `[tx, ty, tz, yaw, pitch]`.
#[pyfunction]
fn score_and_grad(
    scene: &PyScene,
    params: [f64; 5],
    intrinsics: &PyIntrinsics,
    decoder: &PyDecoder,
) -> PyResult<(f64, [f64; 5])> {
    let scorer =
        ViewScorer::new(&scene.0, scene.0.features(), &decoder.0, &intrinsics.0, &RenderOptions::default()).map_err(err)?;
    let (s, g) = scorer.score_and_grad(&PoseParams5::from_array(params)).map_err(err)?;
    Ok((s.score, g))
}

/// Procedural rule-of-thirds teacher score of the RGB render.
#[pyfunction]
fn teacher_score(scene: &PyScene, pose: &PyPose, intrinsics: &PyIntrinsics) -> PyResult<f64> {
    let v = procedural_view(&scene.0, &pose.0, &intrinsics.0).map_err(err)?;
    v.teacher.score.ok_or_else(|| AesfieldError::new_err("teacher map carries no score"))
}

/// Fits a feature field to procedural teacher maps of `poses`. Returns the
/// scene with the fitted feature block, the decoder and the loss trace.
#[pyfunction]
#[pyo3(signature = (scene, poses, intrinsics, feature_dim = None, config = None))]
fn distill(
    scene: &PyScene,
    poses: Vec<PyPose>,
    intrinsics: &PyIntrinsics,
    feature_dim: Option<usize>,
    config: Option<&str>,
) -> PyResult<(PyScene, PyDecoder, Vec<f64>)> {
    let cfg: DistillConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| AesfieldError::new_err(format!("distill config: {e}")))?,
        None => DistillConfig {
            calibrate_decoder: true,
            ..Default::default()
        },
    };
    let views = poses
        .iter()
        .map(|p| procedural_view(&scene.0, &p.0, &intrinsics.0))
        .collect::<aesfield::Result<Vec<_>>>()
        .map_err(err)?;
    let (h, w, c) = views
        .first()
        .ok_or_else(|| AesfieldError::new_err("need at least one pose"))?
        .teacher
        .shape();
    let d = feature_dim.unwrap_or(scene.0.feature_dim());
    let init = DecoderWeights::new(c, d, h, w).with_thirds_spatial(THIRDS_SIGMA);
    let fit = fit_field(&scene.0, &views, &init, &cfg, &RenderOptions::default()).map_err(err)?;
    let fitted = fit.apply_to(&scene.0).map_err(err)?;
    Ok((PyScene(fitted), PyDecoder(fit.decoder), fit.loss_trace))
}

/// Viewpoint search along `inputs`. `config` is a JSON object of search
/// settings; the report comes back as a JSON string.
#[pyfunction]
#[pyo3(signature = (scene, decoder, intrinsics, inputs, seed, config = None))]
fn suggest(
    scene: &PyScene,
    decoder: &PyDecoder,
    intrinsics: &PyIntrinsics,
    inputs: Vec<PyPose>,
    seed: u64,
    config: Option<&str>,
) -> PyResult<String> {
    let mut cfg: SearchConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| AesfieldError::new_err(format!("search config: {e}")))?,
        None => SearchConfig::default(),
    };
    cfg.seed = seed;
    let poses: Vec<CameraPose> = inputs.iter().map(|p| p.0).collect();
    let report = search::suggest(
        &scene.0,
        scene.0.features(),
        &decoder.0,
        &intrinsics.0,
        &RenderOptions::default(),
        &poses,
        &cfg,
    )
    .map_err(err)?;
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

#[pyfunction]
fn plcc(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    aesfield::metrics::plcc(&x, &y).map_err(err)
}

#[pyfunction]
fn srcc(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    aesfield::metrics::srcc(&x, &y).map_err(err)
}

#[pymodule]
#[pyo3(name = "aesfield")]
fn aesfield_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AesfieldError", m.py().get_type::<AesfieldError>())?;
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyDecoder>()?;
    m.add_function(wrap_pyfunction!(score_view, m)?)?;
    m.add_function(wrap_pyfunction!(score_and_grad, m)?)?;
    m.add_function(wrap_pyfunction!(teacher_score, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(suggest, m)?)?;
    m.add_function(wrap_pyfunction!(plcc, m)?)?;
    m.add_function(wrap_pyfunction!(srcc, m)?)?;
    Ok(())
}
