//! Python bindings: images, phantoms, the noise schedule, metrics, localization
//! and the pipeline stages.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pseudopet::config::RunConfig as CoreConfig;
use pseudopet::diffusion::{self, NoiseSchedule as CoreSchedule};
use pseudopet::imaging::{self, Atlas, Image as CoreImage, Mask, PhantomConfig};
use pseudopet::localization::{self, LocalizeParams};
use pseudopet::{metrics, pipeline, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) | Error::ConstantDifferenceMap => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Single-channel raster, row-major.
#[pyclass(name = "Image", module = "pseudopet", from_py_object)]
#[derive(Clone)]
struct Image {
    inner: CoreImage,
}

#[pymethods]
impl Image {
    #[new]
    fn new(width: usize, height: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: CoreImage::new(width, height, data).map_err(py_err)? })
    }

    #[staticmethod]
    fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { inner: CoreImage::filled(width, height, value) }
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: imaging::read_image(path).map_err(py_err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        imaging::write_image(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, row: usize, col: usize) -> PyResult<f64> {
        if row >= self.inner.height() || col >= self.inner.width() {
            return Err(PyValueError::new_err("pixel outside image"));
        }
        Ok(self.inner.get(row, col))
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Image) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{}, mean={:.4})", self.inner.width(), self.inner.height(), self.inner.mean())
    }
}

fn wrap(inner: CoreImage) -> Image {
    Image { inner }
}

fn mask_image(m: &Mask) -> CoreImage {
    CoreImage::new(m.width(), m.height(), m.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap()
}

fn image_mask(img: &CoreImage) -> PyResult<Mask> {
    Mask::new(img.width(), img.height(), img.data().iter().map(|&v| v != 0.0).collect()).map_err(py_err)
}

fn image_atlas(img: &CoreImage) -> PyResult<Atlas> {
    if img.data().iter().any(|&v| v.fract() != 0.0 || !(0.0..=8.0).contains(&v)) {
        return Err(PyValueError::new_err("atlas labels must be integers in 0..=8"));
    }
    Atlas::new(img.width(), img.height(), img.data().iter().map(|&v| v as u8).collect()).map_err(py_err)
}

/// Synthetic subject; `gm` and `atlas` are returned as images (0/1 and labels 0..8).
#[pyclass(name = "Phantom", module = "pseudopet", get_all)]
struct Phantom {
    mri: Image,
    pet: Image,
    gm: Image,
    atlas: Image,
    true_region: Option<u8>,
}

#[pyfunction]
#[pyo3(signature = (seed, size = 64, lesion_radius = None, lesion_contrast = 0.3))]
fn generate_phantom(seed: u64, size: usize, lesion_radius: Option<f64>, lesion_contrast: f64) -> PyResult<Phantom> {
    let mut cfg = PhantomConfig::square(size);
    if let Some(r) = lesion_radius {
        cfg = cfg.with_lesion(r, lesion_contrast);
    }
    let s = imaging::generate_phantom(seed, &cfg).map_err(py_err)?;
    let atlas = CoreImage::new(s.atlas.width(), s.atlas.height(), s.atlas.labels().iter().map(|&l| l as f64).collect())
        .map_err(py_err)?;
    Ok(Phantom {
        gm: wrap(mask_image(&s.gm_mask)),
        atlas: wrap(atlas),
        true_region: s.lesion.as_ref().map(|l| l.true_region),
        mri: wrap(s.mri),
        pet: wrap(s.pet),
    })
}

#[pyclass(name = "NoiseSchedule", module = "pseudopet")]
struct NoiseSchedule {
    inner: CoreSchedule,
}

#[pymethods]
impl NoiseSchedule {
    #[new]
    #[pyo3(signature = (steps = 1000, stride = 250, beta_start = 1e-4, beta_end = 0.02))]
    fn new(steps: usize, stride: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(Self { inner: CoreSchedule::new(steps, stride, beta_start, beta_end).map_err(py_err)? })
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        if t > self.inner.steps() {
            return Err(PyValueError::new_err("step outside schedule"));
        }
        Ok(self.inner.alpha_bar(t))
    }

    fn grid(&self) -> Vec<usize> {
        self.inner.grid()
    }

    /// `(coef_x0, coef_xt, variance)` of the stride posterior at `t`.
    fn posterior(&self, t: usize) -> PyResult<(f64, f64, f64)> {
        let c = self.inner.posterior(t).map_err(py_err)?;
        Ok((c.coef_x0, c.coef_xt, c.variance))
    }

    fn forward_sample(&self, x0: &Image, t: usize, eps: &Image) -> PyResult<Image> {
        diffusion::forward_sample(&x0.inner, t, &eps.inner, &self.inner).map(wrap).map_err(py_err)
    }

    fn posterior_sample(&self, x_t: &Image, x0_hat: &Image, t: usize, noise: &Image) -> PyResult<Image> {
        diffusion::posterior_sample(&x_t.inner, &x0_hat.inner, t, &self.inner, &noise.inner).map(wrap).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn ssim(a: &Image, b: &Image, peak: f64) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner, peak).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: &Image, b: &Image, peak: f64) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner, peak).map_err(py_err)
}

#[pyfunction]
fn rmse(a: &Image, b: &Image) -> PyResult<f64> {
    metrics::rmse(&a.inner, &b.inner).map_err(py_err)
}

#[pyfunction]
fn fid(features_a: Vec<Vec<f64>>, features_b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::fid(&features_a, &features_b).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (img, seed = 0))]
fn extract_features(img: &Image, seed: u64) -> PyResult<Vec<f64>> {
    metrics::extract_features(&img.inner, seed).map_err(py_err)
}

#[pyfunction]
fn singular_values(img: &Image) -> Vec<f64> {
    metrics::singular_values(&img.inner)
}

/// Localizes one subject; returns a dict with `detected`, `predicted_region` and
/// `clusters` (list of `(size, peak_z, row, col, region)`).
#[pyfunction]
#[pyo3(signature = (real_pet, pseudo_pet, gm, atlas, z_thresh = -1.65, k_thresh = None, subject_id = "subject"))]
fn localize<'py>(
    py: Python<'py>,
    real_pet: &Image,
    pseudo_pet: &Image,
    gm: &Image,
    atlas: &Image,
    z_thresh: f64,
    k_thresh: Option<usize>,
    subject_id: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let params = LocalizeParams { z_thresh, k_thresh, ..LocalizeParams::default() };
    let r = localization::localize(
        subject_id,
        &real_pet.inner,
        &pseudo_pet.inner,
        &image_mask(&gm.inner)?,
        &image_atlas(&atlas.inner)?,
        &params,
    )
    .map_err(py_err)?;
    let clusters: Vec<(usize, f64, f64, f64, u8)> = r
        .clusters
        .iter()
        .zip(&r.cluster_regions)
        .map(|(c, &region)| (c.size, c.peak_z, c.centroid.0, c.centroid.1, region))
        .collect();
    let d = PyDict::new(py);
    d.set_item("subject", r.subject_id.clone())?;
    d.set_item("detected", r.detected)?;
    d.set_item("predicted_region", r.predicted_region)?;
    d.set_item("clusters", clusters)?;
    d.set_item("report", r.to_text())?;
    Ok(d)
}

/// Run configuration; `text` uses the `key = value` config format.
#[pyclass(name = "RunConfig", module = "pseudopet")]
struct RunConfig {
    inner: CoreConfig,
}

#[pymethods]
impl RunConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreConfig::parse(text).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreConfig::load(path).map_err(py_err)? })
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.inner.out_dir = dir;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }
}

#[pyfunction]
#[pyo3(signature = (cfg, force = false))]
fn cmd_phantom(cfg: &RunConfig, force: bool) -> PyResult<usize> {
    Ok(pipeline::cmd_phantom(&cfg.inner, force).map_err(py_err)?.outputs.len())
}

#[pyfunction]
#[pyo3(signature = (cfg, checkpoint = None))]
fn cmd_train(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> PyResult<()> {
    pipeline::cmd_train(&cfg.inner, checkpoint.as_deref()).map(|_| ()).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (cfg, checkpoint = None))]
fn cmd_synthesize(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> PyResult<usize> {
    Ok(pipeline::cmd_synthesize(&cfg.inner, checkpoint.as_deref()).map_err(py_err)?.outputs.len())
}

/// Returns `(detection_rate, localization_accuracy)`.
#[pyfunction]
#[pyo3(signature = (cfg, pseudo = None))]
fn cmd_localize(cfg: &RunConfig, pseudo: Option<PathBuf>) -> PyResult<(f64, f64)> {
    let (_, s) = pipeline::cmd_localize(&cfg.inner, pseudo.as_deref()).map_err(py_err)?;
    Ok((s.detection_rate, s.localization_accuracy))
}

/// Returns `(mean_ssim, fid)`.
#[pyfunction]
#[pyo3(signature = (cfg, pseudo = None))]
fn cmd_metrics(cfg: &RunConfig, pseudo: Option<PathBuf>) -> PyResult<(f64, f64)> {
    let (_, m) = pipeline::cmd_metrics(&cfg.inner, pseudo.as_deref()).map_err(py_err)?;
    Ok((m.mean_ssim, m.fid))
}

#[pymodule(name = "pseudopet")]
fn pseudopet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Image>()?;
    m.add_class::<Phantom>()?;
    m.add_class::<NoiseSchedule>()?;
    m.add_class::<RunConfig>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(singular_values, m)?)?;
    m.add_function(wrap_pyfunction!(localize, m)?)?;
    m.add_function(wrap_pyfunction!(cmd_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(cmd_train, m)?)?;
    m.add_function(wrap_pyfunction!(cmd_synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(cmd_localize, m)?)?;
    m.add_function(wrap_pyfunction!(cmd_metrics, m)?)?;
    Ok(())
}
