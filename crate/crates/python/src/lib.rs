//! Python bindings: survival metrics, generation metrics, synthetic cohorts
//! and inference with a trained checkpoint.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use radsurv::data::{generate_synthetic_cohort, save_dataset, BoundingBox, ImageStorage, Radiograph, SynthConfig};
use radsurv::eval::{bleu_n, cider_d, meteor_variant, rouge_l};
use radsurv::language::normalize;
use radsurv::survival::{concordance_index, coxph_loss, RiskBatch};
use radsurv::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Ordering(_) | Error::Contract(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn risk_batch(risks: Vec<f64>, times: Vec<f64>, events: Vec<bool>) -> PyResult<RiskBatch> {
    RiskBatch::new(risks, times, events).map_err(py_err)
}

/// Harrell's concordance index.
#[pyfunction]
fn concordance(risks: Vec<f64>, times: Vec<f64>, events: Vec<bool>) -> PyResult<f64> {
    concordance_index(&risk_batch(risks, times, events)?).map_err(py_err)
}

/// Negative Cox partial log-likelihood averaged over events.
#[pyfunction]
fn cox_loss(risks: Vec<f64>, times: Vec<f64>, events: Vec<bool>) -> PyResult<f64> {
    coxph_loss(&risk_batch(risks, times, events)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (candidate, reference, n = 4))]
fn bleu(candidate: &str, reference: &str, n: usize) -> PyResult<f64> {
    bleu_n(&normalize(candidate), &normalize(reference), n).map_err(py_err)
}

#[pyfunction]
fn rouge(candidate: &str, reference: &str) -> f64 {
    rouge_l(&normalize(candidate), &normalize(reference))
}

#[pyfunction]
fn meteor(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (normalize(candidate), normalize(reference));
    let c: Vec<&str> = c.iter().map(String::as_str).collect();
    let r: Vec<&str> = r.iter().map(String::as_str).collect();
    meteor_variant(&c, &r)
}

/// Corpus CIDEr-D with one reference per candidate.
#[pyfunction]
fn cider(candidates: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    let c: Vec<Vec<String>> = candidates.iter().map(|s| normalize(s)).collect();
    let r: Vec<Vec<Vec<String>>> = references.iter().map(|s| vec![normalize(s)]).collect();
    cider_d(&c, &r).map_err(py_err)
}

/// Writes a synthetic cohort as JSON lines.
#[pyfunction]
#[pyo3(signature = (n, seed, path, image_size = 224))]
fn write_synthetic_cohort(n: usize, seed: u64, path: PathBuf, image_size: usize) -> PyResult<()> {
    let cfg = SynthConfig { image_size, ..SynthConfig::default() };
    let samples = generate_synthetic_cohort(n, seed, &cfg).map_err(py_err)?;
    save_dataset(&path, &samples, &ImageStorage::Grid).map_err(py_err)
}

/// Normalized box `(x1, y1, x2, y2)`.
#[pyclass(name = "BoundingBox", frozen)]
#[derive(Clone)]
struct PyBoundingBox(BoundingBox);

#[pymethods]
impl PyBoundingBox {
    #[new]
    fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        PyBoundingBox(BoundingBox::new(x1, y1, x2, y2))
    }

    fn to_tuple(&self) -> (f32, f32, f32, f32) {
        let [a, b, c, d] = self.0.to_array();
        (a, b, c, d)
    }

    fn area(&self) -> f32 {
        self.0.area()
    }

    fn iou(&self, other: &PyBoundingBox) -> f32 {
        self.0.iou(&other.0)
    }

    fn is_valid(&self) -> bool {
        self.0.is_valid()
    }

    fn __repr__(&self) -> String {
        let [a, b, c, d] = self.0.to_array();
        format!("BoundingBox({a}, {b}, {c}, {d})")
    }
}

/// A trained checkpoint bundle.
#[pyclass(name = "Model", unsendable)]
struct PyModel(radsurv::pipeline::Model);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        radsurv::pipeline::load_checkpoint(&path).map(PyModel).map_err(py_err)
    }

    /// Final metrics recorded during training.
    #[getter]
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.0.metrics)
    }

    #[getter]
    fn config_toml(&self) -> String {
        self.0.config.to_toml()
    }

    /// Regions, report, risk and region scores for one grayscale image given
    /// as row-major pixels in `[0, 1]`.
    #[pyo3(signature = (pixels, height, width, clinical, detector = None))]
    fn infer<'py>(
        &self,
        py: Python<'py>,
        pixels: Vec<f32>,
        height: usize,
        width: usize,
        clinical: Vec<f32>,
        detector: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let image = Radiograph::new(height, width, pixels).map_err(py_err)?;
        let out = radsurv::pipeline::run_inference(&self.0, &image, &clinical, detector).map_err(py_err)?;
        json_to_py(py, &out)
    }
}

#[pymodule]
pub fn radsurv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(concordance, m)?)?;
    m.add_function(wrap_pyfunction!(cox_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge, m)?)?;
    m.add_function(wrap_pyfunction!(meteor, m)?)?;
    m.add_function(wrap_pyfunction!(cider, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_cohort, m)?)?;
    m.add_class::<PyBoundingBox>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
