//! Python bindings: templates, cameras, datasets, the training workflow and
//! image metrics. Images cross the boundary as nested `[C][H][W]` lists.

use std::path::PathBuf;
use std::sync::Arc;

use headgap::config::RunConfig;
use headgap::diffengine::Tensor;
use headgap::gapnet::Identity;
use headgap::headmodel::{pose_mesh, HeadParams, HeadTemplate, SyntheticTemplateConfig};
use headgap::pipeline::{self, Avatar};
use headgap::raster::Camera;
use headgap::synthdata::{self, load_dataset};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(headgap_py, HeadgapError, PyException);

fn err(e: headgap::Error) -> PyErr {
    HeadgapError::new_err(e.to_string())
}

type Image = Vec<Vec<Vec<f64>>>;

fn to_nested(t: &Tensor) -> Image {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    (0..c)
        .map(|k| (0..h).map(|y| t.data()[(k * h + y) * w..(k * h + y + 1) * w].to_vec()).collect())
        .collect()
}

fn from_nested(img: Image) -> PyResult<Tensor> {
    let c = img.len();
    let h = img.first().map_or(0, |p| p.len());
    let w = img.first().and_then(|p| p.first()).map_or(0, |r| r.len());
    if img.iter().any(|p| p.len() != h || p.iter().any(|r| r.len() != w)) {
        return Err(HeadgapError::new_err("image must be a rectangular [C][H][W] list"));
    }
    Tensor::from_vec(&[c, h, w], img.into_iter().flatten().flatten().collect()).map_err(err)
}

#[pyclass(name = "HeadTemplate", frozen)]
struct PyTemplate(Arc<HeadTemplate>);

#[pymethods]
impl PyTemplate {
    #[staticmethod]
    #[pyo3(signature = (rings = 38, segments = 48))]
    fn synthetic(rings: usize, segments: usize) -> PyResult<Self> {
        let cfg = SyntheticTemplateConfig { rings, segments };
        Ok(PyTemplate(Arc::new(HeadTemplate::synthetic(&cfg).map_err(err)?)))
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.0.num_vertices()
    }

    #[getter]
    fn num_faces(&self) -> usize {
        self.0.num_faces()
    }

    /// Posed vertex positions for `params`.
    fn pose_mesh(&self, params: &PyHeadParams) -> PyResult<Vec<[f64; 3]>> {
        pose_mesh(&self.0, &params.0).map_err(err)
    }
}

#[pyclass(name = "HeadParams", skip_from_py_object)]
#[derive(Clone)]
struct PyHeadParams(HeadParams);

#[pymethods]
impl PyHeadParams {
    #[staticmethod]
    fn neutral(template: &PyTemplate) -> Self {
        PyHeadParams(HeadParams::neutral(&template.0))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(PyHeadParams).map_err(|e| HeadgapError::new_err(e.to_string()))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("params serialize")
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.0.beta.clone()
    }

    #[getter]
    fn phi(&self) -> Vec<f64> {
        self.0.phi.clone()
    }

    #[setter]
    fn set_phi(&mut self, phi: Vec<f64>) {
        self.0.phi = phi;
    }

    /// Axis-angle rotation of the `jaw` or `neck` joint.
    fn set_joint(&mut self, template: &PyTemplate, name: &str, axis_angle: [f64; 3]) -> PyResult<()> {
        self.0.set_joint(&template.0, name, axis_angle).map_err(err)
    }
}

#[pyclass(name = "Camera", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCamera(Camera);

#[pymethods]
impl PyCamera {
    #[staticmethod]
    fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> PyResult<Self> {
        Camera::look_at(eye, target, up, focal, width, height).map(PyCamera).map_err(err)
    }

    /// Camera of the synthetic capture rig at the given angles in degrees.
    #[staticmethod]
    fn orbit(azimuth: f64, elevation: f64, resolution: usize) -> PyResult<Self> {
        synthdata::orbit_camera(azimuth, elevation, resolution).map(PyCamera).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }
}

#[pyclass(name = "Avatar")]
struct PyAvatar(Avatar);

#[pymethods]
impl PyAvatar {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Avatar::load(&path).map(PyAvatar).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn phase(&self) -> String {
        self.0.phase.to_string()
    }

    #[getter]
    fn num_identities(&self) -> usize {
        self.0.net.num_identities
    }

    #[getter]
    fn subject(&self) -> Option<PyHeadParams> {
        self.0.subject.clone().map(PyHeadParams)
    }

    /// Refined RGB render; `identity` selects a codebook row, otherwise the
    /// personalized identity is used.
    #[pyo3(signature = (params, camera, identity = None))]
    fn render(&self, params: &PyHeadParams, camera: &PyCamera, identity: Option<usize>) -> PyResult<Image> {
        let id = identity.map(Identity::Codebook);
        let out = self.0.render(&params.0, &camera.0, id.as_ref()).map_err(err)?;
        Ok(to_nested(&out.image))
    }
}

fn config(toml_text: Option<&str>, overrides: Vec<String>) -> PyResult<RunConfig> {
    let base = match toml_text {
        Some(t) => RunConfig::from_toml(t).map_err(err)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&overrides).map_err(err)?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Writes a synthetic dataset described by the `[data]` section.
#[pyfunction]
#[pyo3(signature = (path, config = None, overrides = Vec::new()))]
fn generate_dataset(path: PathBuf, config: Option<&str>, overrides: Vec<String>) -> PyResult<usize> {
    let cfg = self::config(config, overrides)?;
    let template = HeadTemplate::synthetic(&cfg.template).map_err(err)?;
    let data = synthdata::generate_dataset(&template, &cfg.data.spec(cfg.seed)).map_err(err)?;
    std::fs::create_dir_all(&path).map_err(|e| HeadgapError::new_err(e.to_string()))?;
    synthdata::write_dataset(&path, &data).map_err(err)?;
    Ok(data.num_bundles())
}

/// Learns a prior and returns it with the per-step total loss.
#[pyfunction]
#[pyo3(signature = (data, config = None, overrides = Vec::new()))]
fn train_prior(data: PathBuf, config: Option<&str>, overrides: Vec<String>) -> PyResult<(PyAvatar, Vec<f64>)> {
    let cfg = self::config(config, overrides)?;
    let ds = load_dataset(&data).map_err(err)?;
    let (av, report) = pipeline::train_prior(&ds, &cfg, None).map_err(err)?;
    Ok((PyAvatar(av), report.history.iter().map(|b| b.total).collect()))
}

#[pyfunction]
#[pyo3(signature = (prior, data, config = None, overrides = Vec::new()))]
fn invert(prior: &PyAvatar, data: PathBuf, config: Option<&str>, overrides: Vec<String>) -> PyResult<PyAvatar> {
    let cfg = self::config(config, overrides)?;
    let ds = load_dataset(&data).map_err(err)?;
    let shots = pipeline::shot_samples(&ds, &cfg.personalization).map_err(err)?;
    let (av, _) = pipeline::invert(&prior.0, &shots, &cfg.personalization, &cfg.losses, None).map_err(err)?;
    Ok(PyAvatar(av))
}

#[pyfunction]
#[pyo3(signature = (inverted, data, config = None, overrides = Vec::new()))]
fn finetune(inverted: &PyAvatar, data: PathBuf, config: Option<&str>, overrides: Vec<String>) -> PyResult<PyAvatar> {
    let cfg = self::config(config, overrides)?;
    let ds = load_dataset(&data).map_err(err)?;
    let shots = pipeline::shot_samples(&ds, &cfg.personalization).map_err(err)?;
    let (av, _) =
        pipeline::finetune(&inverted.0, &shots, &cfg.personalization, &cfg.losses, cfg.seed, None).map_err(err)?;
    Ok(PyAvatar(av))
}

/// `(psnr, ssim, l1)`; PSNR is `inf` for identical images.
#[pyfunction]
fn metrics(pred: Image, gt: Image) -> PyResult<(f64, f64, f64)> {
    let m = pipeline::metrics(&from_nested(pred)?, &from_nested(gt)?).map_err(err)?;
    Ok((m.psnr, m.ssim, m.l1))
}

#[pymodule]
pub fn headgap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HeadgapError", m.py().get_type::<HeadgapError>())?;
    m.add_class::<PyTemplate>()?;
    m.add_class::<PyHeadParams>()?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyAvatar>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_prior, m)?)?;
    m.add_function(wrap_pyfunction!(invert, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
