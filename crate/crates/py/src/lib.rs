//! Python bindings: frames, configuration, the codec, metrics and synthesis.

use std::path::PathBuf;

use ctxcodec::codec_core::VideoCodec as CoreCodec;
use ctxcodec::config::{AblationConfig, CodecConfig as CoreConfig, ModelConfig};
use ctxcodec::evaluation::{self, metrics, RDCurve};
use ctxcodec::frame::Frame as CoreFrame;
use ctxcodec::training::synth::{generate_synthetic_clip, MotionFamily, SynthParams};
use ctxcodec::training::{train_multistage, TrainClip, TrainOptions};
use ctxcodec::{checkpoint, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Data(_) | Error::MissingFrame { .. } | Error::HashMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Planar RGB frame with values in [0, 1].
#[pyclass(name = "Frame", module = "ctxcodec", from_py_object)]
#[derive(Clone)]
pub struct Frame {
    pub inner: CoreFrame,
}

#[pymethods]
impl Frame {
    #[new]
    fn new(width: usize, height: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self { inner: CoreFrame::new(width, height, data).map_err(py_err)? })
    }

    #[staticmethod]
    fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { inner: CoreFrame::filled(width, height, value) }
    }

    /// Build from interleaved 8-bit RGB bytes.
    #[staticmethod]
    fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: CoreFrame::from_rgb8(width, height, rgb).map_err(py_err)? })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    fn to_rgb8<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_rgb8())
    }

    fn __repr__(&self) -> String {
        format!("Frame({}x{})", self.inner.width, self.inner.height)
    }
}

/// Codec configuration.
#[pyclass(name = "CodecConfig", module = "ctxcodec", skip_from_py_object)]
#[derive(Clone)]
pub struct CodecConfig {
    pub inner: CoreConfig,
}

#[pymethods]
impl CodecConfig {
    #[new]
    #[pyo3(signature = (preset = "J", tiny = false, seed = 0, lambda_index = None))]
    fn new(preset: &str, tiny: bool, seed: u64, lambda_index: Option<u8>) -> PyResult<Self> {
        let mut inner = CoreConfig { ablation: AblationConfig::preset(preset).map_err(py_err)?, seed, ..CoreConfig::default() };
        if tiny {
            inner.model = ModelConfig::tiny();
        }
        if let Some(l) = lambda_index {
            inner.rate.lambda_index = l;
        }
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreConfig::from_toml_str(text).map_err(py_err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> u64 {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.rate.lambda()
    }
}

fn frames_in(frames: &[Frame]) -> Vec<CoreFrame> {
    frames.iter().map(|f| f.inner.clone()).collect()
}

fn frames_out(frames: Vec<CoreFrame>) -> Vec<Frame> {
    frames.into_iter().map(|inner| Frame { inner }).collect()
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Neural video codec.
#[pyclass(name = "VideoCodec", module = "ctxcodec", unsendable)]
pub struct VideoCodec {
    pub inner: CoreCodec,
}

#[pymethods]
impl VideoCodec {
    #[new]
    fn new(config: &CodecConfig) -> PyResult<Self> {
        Ok(Self { inner: CoreCodec::new(&config.inner).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load(&path).map_err(py_err)?.0 })
    }

    #[pyo3(signature = (path, note = ""))]
    fn save(&self, path: PathBuf, note: &str) -> PyResult<()> {
        checkpoint::save(&self.inner, &path, note).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> CodecConfig {
        CodecConfig { inner: self.inner.cfg.clone() }
    }

    #[getter]
    fn config_hash(&self) -> u64 {
        self.inner.config_hash()
    }

    /// Returns the bitstream and the encoder-side reconstructions.
    #[pyo3(signature = (frames, intra_period = 8))]
    fn encode<'py>(&self, py: Python<'py>, frames: Vec<Frame>, intra_period: usize) -> PyResult<(Bound<'py, PyBytes>, Vec<Frame>)> {
        let (bytes, recon) = self.inner.encode_sequence(&frames_in(&frames), intra_period).map_err(py_err)?;
        Ok((PyBytes::new(py, &bytes), frames_out(recon)))
    }

    fn decode(&self, data: &[u8]) -> PyResult<Vec<Frame>> {
        Ok(frames_out(self.inner.decode_stream(data).map_err(py_err)?))
    }

    /// Per-frame and aggregate rate-distortion records as a dict.
    #[pyo3(signature = (frames, intra_period = 8, with_ms_ssim = false))]
    fn evaluate<'py>(&self, py: Python<'py>, frames: Vec<Frame>, intra_period: usize, with_ms_ssim: bool) -> PyResult<Bound<'py, PyAny>> {
        let r = evaluation::evaluate_sequence(&self.inner, &frames_in(&frames), intra_period, with_ms_ssim).map_err(py_err)?;
        json_to_py(py, &serde_json::to_string(&r).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
    }

    /// Train in place on clips (lists of frames). Returns the final loss of
    /// each stage that ran.
    #[pyo3(signature = (clips, stages = None, steps = None))]
    fn train(&self, clips: Vec<Vec<Frame>>, stages: Option<Vec<u32>>, steps: Option<[usize; 5]>) -> PyResult<Vec<f64>> {
        let data: Vec<TrainClip> = clips.iter().map(|c| TrainClip { frames: frames_in(c), flows: None }).collect();
        let opts = TrainOptions { stages: stages.unwrap_or_default(), steps, ..TrainOptions::default() };
        let rep = train_multistage(&self.inner, &data, &opts).map_err(py_err)?;
        Ok(rep.stages.iter().map(|s| s.losses.last().copied().unwrap_or(f64::NAN)).collect())
    }
}

#[pyfunction]
fn psnr(a: &Frame, b: &Frame) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner).map_err(py_err)
}

#[pyfunction]
fn ms_ssim(a: &Frame, b: &Frame) -> PyResult<f64> {
    metrics::ms_ssim(&a.inner, &b.inner).map_err(py_err)
}

/// BD-rate in percent of `test` against `anchor`, each a list of `(bpp, quality)`.
#[pyfunction]
fn bd_rate(anchor: Vec<(f64, f64)>, test: Vec<(f64, f64)>) -> PyResult<f64> {
    let a = RDCurve::new("anchor", "", anchor).map_err(py_err)?;
    let t = RDCurve::new("test", "", test).map_err(py_err)?;
    evaluation::bd_rate(&a, &t).map_err(py_err)
}

/// Synthetic clip of the given motion family.
#[pyfunction]
#[pyo3(signature = (family, seed = 0, width = 64, height = 64, frames = 8))]
fn synth_clip(family: &str, seed: u64, width: usize, height: usize, frames: usize) -> PyResult<Vec<Frame>> {
    let fam = MotionFamily::parse(family).map_err(py_err)?;
    let p = SynthParams { width, height, frames, ..SynthParams::default() };
    Ok(frames_out(generate_synthetic_clip(fam, &p, seed).map_err(py_err)?.frames))
}

#[pymodule]
#[pyo3(name = "ctxcodec")]
pub fn ctxcodec_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Frame>()?;
    m.add_class::<CodecConfig>()?;
    m.add_class::<VideoCodec>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ms_ssim, m)?)?;
    m.add_function(wrap_pyfunction!(bd_rate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_clip, m)?)?;
    m.add("PRESETS", ctxcodec::config::PRESETS.to_vec())?;
    Ok(())
}
