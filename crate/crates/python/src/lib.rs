//! Python bindings for the hyperspectral patch classifier.
//!
//! The module mirrors the CLI: `synth`, `sample`, `train`, `evaluate`,
//! `sweep`, and `gradcheck` run the same pipeline entry points and return
//! the same reports as plain dicts. `Scene` and `Model` wrap the two core
//! types for interactive use: synthesize or load a scene, load a trained
//! checkpoint, and run predictions on raw patch spectra.
//!
//! Build with `cargo build -p hyperpatch-python --release`; the resulting
//! `libhyperpatch.so` imports as the `hyperpatch` module once staged on
//! `sys.path` (see `python/smoke_test.py`).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;

use hyperpatch_core::experiment::{
    cmd_eval, cmd_gradcheck, cmd_sample, cmd_sweep, cmd_synth, cmd_train, load_experiment_config,
    EvalOptions,
};
use hyperpatch_core::metrics::{multilabel_report, single_label_report};
use hyperpatch_core::model::{
    ae_forward, classify, load_model, predict_multilabel, Model as CoreModel,
};
use hyperpatch_core::nn::Matrix;
use hyperpatch_core::patch::{split_sizes as core_split_sizes, SamplingMode};
use hyperpatch_core::rng::RngStream;
use hyperpatch_core::scene::{load_scene, save_scene, synth_scene, LabelMap, SceneCube, SynthSpec};
use hyperpatch_core::train::{argmax, Scheme};
use hyperpatch_core::Error as CoreError;

fn to_py_err(e: CoreError) -> PyErr {
    match &e {
        CoreError::Io { .. } => PyIOError::new_err(e.to_string()),
        CoreError::GradCheck(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<SamplingMode> {
    mode.parse::<SamplingMode>().map_err(to_py_err)
}

/// Recursively converts a JSON value into native Python objects, so every
/// report crosses the boundary as dicts, lists, and scalars.
fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    match value {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else if let Some(u) = n.as_u64() {
                u.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        Value::String(s) => s.into_py_any(py),
        Value::Array(items) => {
            let converted: Vec<Py<PyAny>> = items
                .iter()
                .map(|v| json_to_py(py, v))
                .collect::<PyResult<_>>()?;
            PyList::new(py, converted)?.into_py_any(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (key, v) in map {
                dict.set_item(key, json_to_py(py, v)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

fn report_dict<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let json = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &json)
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(PyValueError::new_err(format!(
                "{what} row {i} has {} values but row 0 has {cols}",
                row.len()
            )));
        }
    }
    let mut out = Matrix::zeros(rows.len(), cols);
    for (i, row) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(row);
    }
    Ok(out)
}

/// A hyperspectral scene: a `height x width x bands` reflectance cube plus
/// a per-pixel class label map (0 = unlabeled background).
#[pyclass(module = "hyperpatch")]
struct Scene {
    cube: SceneCube,
    labels: LabelMap,
}

#[pymethods]
impl Scene {
    /// Synthesizes a deterministic blocky scene: labeled square regions
    /// with per-class spectral signatures plus Gaussian noise.
    #[staticmethod]
    #[pyo3(signature = (height, width, bands, class_count, *, amplitude = 1.0, noise_sigma = 0.05, background_fraction = 0.25, region_size = 4, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn synth(
        height: usize,
        width: usize,
        bands: usize,
        class_count: usize,
        amplitude: f64,
        noise_sigma: f64,
        background_fraction: f64,
        region_size: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SynthSpec {
            height,
            width,
            bands,
            class_count,
            amplitude,
            noise_sigma,
            background_fraction,
            region_size,
            seed,
        };
        let (cube, labels) = synth_scene(&spec).map_err(to_py_err)?;
        Ok(Scene { cube, labels })
    }

    /// Loads a scene from its JSON header (binary payloads sit next to it).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (cube, labels) = load_scene(&path).map_err(to_py_err)?;
        Ok(Scene { cube, labels })
    }

    /// Writes the scene under `path` (a JSON header plus `.cube`/`.labels`
    /// payloads), ready for `sample` and the `[scene] path` config key.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_scene(&self.cube, &self.labels, &path).map_err(to_py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.cube.name.clone()
    }

    #[getter]
    fn height(&self) -> usize {
        self.cube.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.cube.width
    }

    #[getter]
    fn bands(&self) -> usize {
        self.cube.bands
    }

    /// Number of classes including the background class 0.
    #[getter]
    fn class_count(&self) -> usize {
        self.cube.class_count
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.cube.class_names.clone()
    }

    /// The reflectance cube as a flat row-major, band-interleaved list
    /// (`height * width * bands` floats).
    fn values(&self) -> Vec<f32> {
        self.cube.values.clone()
    }

    /// The label map as a flat row-major list (`height * width` ints).
    fn label_map(&self) -> Vec<u16> {
        self.labels.labels.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(name={:?}, height={}, width={}, bands={}, class_count={})",
            self.cube.name, self.cube.height, self.cube.width, self.cube.bands,
            self.cube.class_count
        )
    }
}

/// A trained checkpoint: the spectral autoencoder, the classifier head,
/// and the normalization statistics fitted on its training split.
#[pyclass(module = "hyperpatch")]
struct Model {
    inner: CoreModel,
}

impl Model {
    /// Standardizes raw patch spectra with the checkpoint's stored per-band
    /// statistics, mirroring the training-time pipeline.
    fn normalized_features(&self, patches: &[Vec<f64>]) -> PyResult<Matrix> {
        let meta = &self.inner.meta;
        let bands = meta.bands;
        let width = meta.patch_size * meta.patch_size * bands;
        let norm = &self.inner.norm;
        let mut out = Matrix::zeros(patches.len(), width);
        for (i, patch) in patches.iter().enumerate() {
            if patch.len() != width {
                return Err(PyValueError::new_err(format!(
                    "patch {i} has {} values; expected {width} ({px}x{px} pixels x {bands} bands, band-interleaved)",
                    patch.len(),
                    px = meta.patch_size,
                )));
            }
            for (j, (slot, &v)) in out.row_mut(i).iter_mut().zip(patch).enumerate() {
                let b = j % bands;
                *slot = (v - norm.mean[b]) / norm.std[b];
            }
        }
        Ok(out)
    }

    fn hidden_features(&self, patches: &[Vec<f64>]) -> PyResult<Matrix> {
        let features = self.normalized_features(patches)?;
        let mut rng = RngStream::from_seed(0);
        let (hidden, _) = ae_forward(&self.inner.autoencoder, &features, false, &mut rng)
            .map_err(to_py_err)?;
        Ok(hidden)
    }
}

#[pymethods]
impl Model {
    /// Loads a checkpoint saved by `train` from its stem, e.g.
    /// `out/model` for `out/model.params` + `out/model.manifest.json`.
    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: load_model(&stem).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.param_count()
    }

    /// `"multi"` or `"single"`.
    #[getter]
    fn task(&self) -> &'static str {
        self.inner.meta.task.name()
    }

    #[getter]
    fn bands(&self) -> usize {
        self.inner.meta.bands
    }

    /// Scene classes including background, as trained against.
    #[getter]
    fn class_count(&self) -> usize {
        self.inner.meta.class_count
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.meta.patch_size
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.meta.seed
    }

    /// Classifies raw patch spectra (each a band-interleaved list of
    /// `patch_size^2 * bands` floats, unnormalized). Multi-label models
    /// return one 0/1 class-presence list per patch (index 0 =
    /// background); single-label models return one class label per patch
    /// (1-based, matching scene label values).
    fn predict(&self, py: Python<'_>, patches: Vec<Vec<f64>>) -> PyResult<Py<PyAny>> {
        let hidden = self.hidden_features(&patches)?;
        let mut rng = RngStream::from_seed(0);
        let logits = classify(&self.inner.classifier, &hidden, false, &mut rng)
            .map_err(to_py_err)?;
        match self.inner.meta.task {
            SamplingMode::Multi => {
                let rows: Vec<Vec<u8>> = (0..logits.rows())
                    .map(|i| predict_multilabel(logits.row(i)))
                    .collect();
                rows.into_py_any(py)
            }
            SamplingMode::Single => {
                let labels: Vec<usize> = (0..logits.rows())
                    .map(|i| argmax(logits.row(i)) + 1)
                    .collect();
                labels.into_py_any(py)
            }
        }
    }

    /// Encodes raw patch spectra into the autoencoder's bottleneck
    /// features: one list of `patch_size^2 * 32` floats per patch.
    fn encode(&self, patches: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let hidden = self.hidden_features(&patches)?;
        Ok((0..hidden.rows()).map(|i| hidden.row(i).to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(task={:?}, bands={}, class_count={}, parameters={})",
            self.inner.meta.task.name(),
            self.inner.meta.bands,
            self.inner.meta.class_count,
            self.inner.param_count()
        )
    }
}

/// Synthesizes the scene described by a `[synth]`-style TOML spec file and
/// writes it under `out`; returns the scene header path.
#[pyfunction]
fn synth(spec: PathBuf, out: PathBuf) -> PyResult<String> {
    cmd_synth(&spec, &out)
        .map(|p| p.display().to_string())
        .map_err(to_py_err)
}

/// Samples non-overlapping patches from a scene on disk, writes
/// `patches.json` under `out`, and returns the sampling summary (grid,
/// kept/mixed/uniform counts, split sizes) as a dict.
#[pyfunction]
#[pyo3(signature = (scene, out, *, mode = "multi", patch_size = 3, seed = 0))]
fn sample(
    py: Python<'_>,
    scene: PathBuf,
    out: PathBuf,
    mode: &str,
    patch_size: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let summary =
        cmd_sample(&scene, parse_mode(mode)?, patch_size, seed, &out).map_err(to_py_err)?;
    report_dict(py, &summary)
}

/// Runs the full training pipeline from a TOML experiment config and
/// returns the run report as a dict (plus `output_dir`/`report_path`
/// keys). `seed`, `out`, and `mode` override the config like the CLI
/// flags of the same names.
#[pyfunction]
#[pyo3(signature = (config, *, seed = None, out = None, mode = None))]
fn train(
    py: Python<'_>,
    config: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    mode: Option<String>,
) -> PyResult<Py<PyAny>> {
    let mut cfg = load_experiment_config(&config).map_err(to_py_err)?;
    let mode = mode.as_deref().map(parse_mode).transpose()?;
    cfg.apply_overrides(seed, out, mode);
    let run = cmd_train(&cfg).map_err(to_py_err)?;
    let mut json = serde_json::to_value(&run.report)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let extras = json.as_object_mut().expect("run report is an object");
    extras.insert(
        "output_dir".into(),
        run.out_dir.display().to_string().into(),
    );
    extras.insert(
        "report_path".into(),
        run.report_path.display().to_string().into(),
    );
    json_to_py(py, &json)
}

/// Evaluates a checkpoint against a patch manifest, writes `eval.json`
/// under `out`, and returns the evaluation report as a dict. The flags
/// select the cross-protocol comparisons: `filter_uniform` restricts to
/// uniform patches, `topk` scores a single-label checkpoint against
/// multi-label truth, `exclude_background` drops the background column.
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, out, *, filter_uniform = false, topk = false, exclude_background = false))]
fn evaluate(
    py: Python<'_>,
    checkpoint: PathBuf,
    manifest: PathBuf,
    out: PathBuf,
    filter_uniform: bool,
    topk: bool,
    exclude_background: bool,
) -> PyResult<Py<PyAny>> {
    let options = EvalOptions {
        filter_uniform,
        topk,
        exclude_background,
    };
    let (report, path) = cmd_eval(&checkpoint, &manifest, &options, &out).map_err(to_py_err)?;
    let mut json =
        serde_json::to_value(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json.as_object_mut()
        .expect("eval report is an object")
        .insert("eval_path".into(), path.display().to_string().into());
    json_to_py(py, &json)
}

/// Trains every scheme (or the given subset) on one shared scene and
/// split, writes `comparison.csv` and `sweep.json` under the config's
/// output directory, and returns `{csv, csv_path, status_path, failures,
/// runs}` as a dict.
#[pyfunction]
#[pyo3(signature = (config, *, seed = None, out = None, mode = None, schemes = None))]
fn sweep(
    py: Python<'_>,
    config: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    mode: Option<String>,
    schemes: Option<Vec<String>>,
) -> PyResult<Py<PyAny>> {
    let mut cfg = load_experiment_config(&config).map_err(to_py_err)?;
    let mode = mode.as_deref().map(parse_mode).transpose()?;
    cfg.apply_overrides(seed, out, mode);
    let schemes: Vec<Scheme> = match schemes {
        None => Scheme::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| n.parse::<Scheme>().map_err(to_py_err))
            .collect::<PyResult<_>>()?,
    };
    let outcome = cmd_sweep(&cfg, &schemes).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("csv", &outcome.csv)?;
    dict.set_item("csv_path", outcome.csv_path.display().to_string())?;
    dict.set_item("status_path", outcome.status_path.display().to_string())?;
    dict.set_item("failures", outcome.failures)?;
    dict.set_item("runs", report_dict(py, &outcome.runs)?)?;
    dict.into_py_any(py)
}

/// Runs the finite-difference gradient check suite and returns its
/// results as a dict with an `all_passed` flag.
#[pyfunction]
fn gradcheck(py: Python<'_>) -> PyResult<Py<PyAny>> {
    let outcome = cmd_gradcheck().map_err(to_py_err)?;
    let mut json =
        serde_json::to_value(&outcome).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json.as_object_mut()
        .expect("gradcheck outcome is an object")
        .insert("all_passed".into(), outcome.all_passed().into());
    json_to_py(py, &json)
}

/// Scores 0/1 class-presence predictions against 0/1 truth rows:
/// example-based accuracy/precision/recall, Hamming loss, and per-class
/// accuracy, as a dict.
#[pyfunction]
fn multilabel_metrics(
    py: Python<'_>,
    truth: Vec<Vec<f64>>,
    predictions: Vec<Vec<f64>>,
) -> PyResult<Py<PyAny>> {
    let truth = matrix_from_rows(&truth, "truth")?;
    let predictions = matrix_from_rows(&predictions, "predictions")?;
    let report = multilabel_report(&truth, &predictions).map_err(to_py_err)?;
    report_dict(py, &report)
}

/// Scores 0-based single-label predictions against truth: overall
/// accuracy, per-class accuracy (None for absent classes), and the
/// confusion matrix, as a dict.
#[pyfunction]
fn single_label_metrics(
    py: Python<'_>,
    truth: Vec<usize>,
    predictions: Vec<usize>,
    class_count: usize,
) -> PyResult<Py<PyAny>> {
    let report = single_label_report(&truth, &predictions, class_count).map_err(to_py_err)?;
    report_dict(py, &report)
}

/// The deterministic train/valid/test sizes for `n` patches: test takes
/// ceil(n/10), validation ceil of a tenth of the rest.
#[pyfunction]
fn split_sizes(n: usize) -> (usize, usize, usize) {
    core_split_sizes(n)
}

#[pymodule]
fn hyperpatch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Scene>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(multilabel_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(single_label_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(split_sizes, m)?)?;
    Ok(())
}
