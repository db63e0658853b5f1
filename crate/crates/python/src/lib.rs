//! Python bindings: images, the shift schedule, haze synthesis, metrics,
//! the patch grid and checkpoint-based dehazing and hazing.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use rbdm::cli_io::{translate, Checkpoint};
use rbdm::haze_synth::{self, HazeMode, HazeParams, ScatterField};
use rbdm::tiled_sampler::PatchGrid;
use rbdm::{Direction, Error};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Planar `channels × height × width` image with values in `[-1, 1]`.
#[pyclass(name = "Image", module = "rbdm_py", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: rbdm::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        let inner = rbdm::Image::from_vec(height, width, channels, data).map_err(to_py)?;
        Ok(PyImage { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = rbdm::image_io::load_image(&path).map_err(to_py)?;
        Ok(PyImage { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        rbdm::image_io::save_png(&path, &self.inner).map_err(to_py)
    }

    /// `(height, width, channels)`
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> PyResult<Self> {
        let inner = self.inner.crop(row, col, height, width).map_err(to_py)?;
        Ok(PyImage { inner })
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.inner.shape();
        format!("Image(height={h}, width={w}, channels={c})")
    }
}

#[pyclass(name = "Schedule", module = "rbdm_py")]
pub struct PySchedule {
    inner: rbdm::Schedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps = 15, kappa = 2.0, gamma = 1.0))]
    fn new(steps: usize, kappa: f64, gamma: f64) -> PyResult<Self> {
        let inner = rbdm::Schedule::new(steps, kappa, gamma).map_err(to_py)?;
        Ok(PySchedule { inner })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa()
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    /// `(state coefficient, clean coefficient, variance)` of the step-`t`
    /// posterior.
    fn posterior(&self, t: usize) -> PyResult<(f64, f64, f64)> {
        let p = self.inner.posterior(t).map_err(to_py)?;
        Ok((p.state, p.clean, p.variance))
    }
}

#[pyclass(name = "PatchGrid", module = "rbdm_py")]
pub struct PyPatchGrid {
    inner: PatchGrid,
}

#[pymethods]
impl PyPatchGrid {
    #[new]
    fn new(height: usize, width: usize, patch: usize, stride: usize) -> PyResult<Self> {
        let inner = PatchGrid::new(height, width, patch, stride).map_err(to_py)?;
        Ok(PyPatchGrid { inner })
    }

    fn offsets(&self) -> Vec<(usize, usize)> {
        self.inner.offsets().to_vec()
    }

    /// Row-major count of windows covering each pixel.
    fn coverage(&self) -> Vec<u32> {
        self.inner.coverage()
    }
}

/// A trained denoiser loaded from a checkpoint.
#[pyclass(name = "Model", module = "rbdm_py")]
pub struct PyModel {
    net: rbdm::UNet<f32>,
    schedule: rbdm::Schedule,
}

impl PyModel {
    fn run(&self, py: Python<'_>, image: &PyImage, direction: Direction, seed: u64, patch: usize, stride: usize) -> PyResult<PyImage> {
        let multiple = self.net.config().size_multiple();
        let (out, _) = py
            .detach(|| translate(&self.net, &self.schedule, &image.inner, direction, patch, stride, multiple, seed))
            .map_err(to_py)?;
        Ok(PyImage { inner: out })
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(to_py)?;
        Ok(PyModel {
            net: ckpt.network().map_err(to_py)?,
            schedule: ckpt.schedule().map_err(to_py)?,
        })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.net.params().len()
    }

    #[pyo3(signature = (image, seed = 0, patch = 64, stride = 32))]
    fn dehaze(&self, py: Python<'_>, image: PyImage, seed: u64, patch: usize, stride: usize) -> PyResult<PyImage> {
        self.run(py, &image, Direction::Dehaze, seed, patch, stride)
    }

    #[pyo3(signature = (image, seed = 0, patch = 64, stride = 32))]
    fn hazify(&self, py: Python<'_>, image: PyImage, seed: u64, patch: usize, stride: usize) -> PyResult<PyImage> {
        self.run(py, &image, Direction::Hazify, seed, patch, stride)
    }
}

#[pyfunction]
fn psnr(a: PyImage, b: PyImage) -> PyResult<f64> {
    rbdm::metrics::psnr(&a.inner, &b.inner).map_err(to_py)
}

#[pyfunction]
fn ssim(a: PyImage, b: PyImage) -> PyResult<f64> {
    rbdm::metrics::ssim(&a.inner, &b.inner).map_err(to_py)
}

/// Hazes `clear` with a uniform scattering coefficient over the given
/// row-major depth map.
#[pyfunction]
fn apply_asm(clear: PyImage, airlight: [f32; 3], beta: f32, depth: Vec<f32>) -> PyResult<PyImage> {
    let params = HazeParams {
        airlight,
        scatter: ScatterField::Uniform(beta),
        depth,
    };
    let inner = haze_synth::apply_asm(&clear.inner, &params).map_err(to_py)?;
    Ok(PyImage { inner })
}

/// Writes a synthetic paired dataset and returns the number of pairs.
#[pyfunction]
#[pyo3(signature = (n, size, out_dir, seed = 0, mode = "mixed"))]
fn gen_dataset(n: usize, size: usize, out_dir: PathBuf, seed: u64, mode: &str) -> PyResult<usize> {
    let mode: HazeMode = mode.parse().map_err(to_py)?;
    let records = haze_synth::gen_dataset(n, size, mode, seed, &out_dir).map_err(to_py)?;
    Ok(records.len())
}

#[pymodule]
fn rbdm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyPatchGrid>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(apply_asm, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    Ok(())
}
