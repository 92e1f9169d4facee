//! Python bindings: `import pitsep`.
//!
//! Arrays cross the boundary as nested lists of floats; spectrogram stacks are
//! `[stream][frame][bin]`.

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pitsep_core::assignment::{
    best_perm_bruteforce, best_perm_hungarian, pit_loss as core_pit_loss, CostMatrix,
};
use pitsep_core::config::RunConfig;
use pitsep_core::corpus::{build_dataset, load_split, manifest_path, write_dataset, Split};
use pitsep_core::dsp::{stft, StftConfig, Waveform};
use pitsep_core::inference::{separate as core_separate, AssignmentMode};
use pitsep_core::masking::{softmax_masks as core_softmax, StreamMagnitudes};
use pitsep_core::metrics::{aggregate, eval_report, sdr as core_sdr};
use pitsep_core::model::{load_checkpoint, save_checkpoint, Model as CoreModel};
use pitsep_core::training::train as core_train;
use pitsep_core::{Error, ErrorClass};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Usage => PyValueError::new_err(msg),
        ErrorClass::Data => PyOSError::new_err(msg),
        ErrorClass::Numeric => PyArithmeticError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for pitsep_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn array3(v: Vec<Vec<Vec<f64>>>) -> PyResult<Array3<f64>> {
    let d0 = v.len();
    let d1 = v.first().map_or(0, |r| r.len());
    let d2 = v.first().and_then(|r| r.first()).map_or(0, |r| r.len());
    if v.iter()
        .any(|a| a.len() != d1 || a.iter().any(|r| r.len() != d2))
    {
        return Err(PyValueError::new_err("ragged nested list"));
    }
    let flat: Vec<f64> = v.into_iter().flatten().flatten().collect();
    Ok(Array3::from_shape_vec((d0, d1, d2), flat).expect("shape checked"))
}

fn nested3(a: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    a.outer_iter()
        .map(|m| m.outer_iter().map(|r| r.to_vec()).collect())
        .collect()
}

fn nested2(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn waveform(samples: Vec<f64>, sample_rate: u32) -> PyResult<Waveform> {
    Waveform::new(samples, sample_rate).py()
}

fn parse_mode(name: &str) -> PyResult<AssignmentMode> {
    AssignmentMode::parse(name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown assignment mode '{name}'")))
}

/// Minimum-cost assignment of rows to columns; returns (mapping, total cost).
#[pyfunction]
#[pyo3(signature = (cost, method = "hungarian"))]
fn best_permutation(cost: Vec<Vec<f64>>, method: &str) -> PyResult<(Vec<usize>, f64)> {
    let c = CostMatrix::from_rows(&cost).py()?;
    let (perm, total) = match method {
        "hungarian" => best_perm_hungarian(&c),
        "bruteforce" => best_perm_bruteforce(&c),
        _ => return Err(PyValueError::new_err(format!("unknown method '{method}'"))),
    }
    .py()?;
    Ok((perm.as_slice().to_vec(), total))
}

/// Permutation invariant MSE between estimate and reference stacks; returns (loss, mapping).
#[pyfunction]
fn pit_loss(est: Vec<Vec<Vec<f64>>>, refs: Vec<Vec<Vec<f64>>>) -> PyResult<(f64, Vec<usize>)> {
    let est = StreamMagnitudes::new(array3(est)?).py()?;
    let refs = StreamMagnitudes::new(array3(refs)?).py()?;
    let (loss, perm) = core_pit_loss(&est, &refs).py()?;
    Ok((loss, perm.as_slice().to_vec()))
}

/// Softmax over the stream axis of a `[stream][frame][bin]` logit stack.
#[pyfunction]
fn softmax_masks(logits: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let a = array3(logits)?;
    Ok(nested3(core_softmax(a.view()).values()))
}

/// Scale-invariant signal-to-distortion ratio in dB.
#[pyfunction]
#[pyo3(signature = (estimate, reference, sample_rate = 8000))]
fn sdr(estimate: Vec<f64>, reference: Vec<f64>, sample_rate: u32) -> PyResult<f64> {
    core_sdr(
        &waveform(estimate, sample_rate)?,
        &waveform(reference, sample_rate)?,
    )
    .py()
}

/// Magnitude spectrogram `[frame][bin]` with the default 8 kHz frame geometry.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = 8000, frame_len = 256, hop = 128))]
fn stft_magnitude(
    samples: Vec<f64>,
    sample_rate: u32,
    frame_len: usize,
    hop: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = StftConfig {
        frame_len,
        hop,
        fft_len: frame_len.next_power_of_two(),
        ..StftConfig::default()
    };
    cfg.validate().py()?;
    let spec = stft(&waveform(samples, sample_rate)?, &cfg).py()?;
    Ok(nested2(spec.magnitude().values()))
}

/// Full run configuration, serialized as TOML.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (preset = "desk"))]
    fn new(preset: &str) -> PyResult<Self> {
        RunConfig::preset(preset)
            .map(|inner| Self { inner })
            .ok_or_else(|| PyValueError::new_err(format!("unknown preset '{preset}'")))
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_toml(text).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).py()?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={})", self.inner.seed)
    }
}

/// Stream waveforms and the per-meta-frame output-to-stream trace.
type Separated = (Vec<Vec<f64>>, Vec<Vec<usize>>);

/// A trained (or freshly initialized) separation model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: CoreModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).py()
    }

    #[getter]
    fn streams(&self) -> usize {
        self.inner.layout.streams
    }

    #[getter]
    fn bins(&self) -> usize {
        self.inner.layout.bins
    }

    #[getter]
    fn input_frames(&self) -> usize {
        self.inner.layout.input_frames
    }

    #[getter]
    fn output_frames(&self) -> usize {
        self.inner.layout.output_frames
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate
    }

    #[getter]
    fn epochs_completed(&self) -> usize {
        self.inner.epochs_completed
    }

    /// Separates a mono mixture; returns (one waveform per stream, per-meta-frame trace).
    #[pyo3(signature = (mixture, mode = "default", shift = 1, references = None))]
    fn separate(
        &self,
        py: Python<'_>,
        mixture: Vec<f64>,
        mode: &str,
        shift: usize,
        references: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Separated> {
        let sr = self.inner.sample_rate;
        let mix = waveform(mixture, sr)?;
        let refs = references
            .map(|r| {
                r.into_iter()
                    .map(|s| waveform(s, sr))
                    .collect::<PyResult<Vec<_>>>()
            })
            .transpose()?;
        let mode = parse_mode(mode)?;
        let sep = py
            .detach(|| core_separate(&self.inner, &mix, shift, mode, refs.as_deref()))
            .py()?;
        Ok((
            sep.waveforms
                .into_iter()
                .map(|w| w.into_samples())
                .collect(),
            sep.estimate
                .trace
                .iter()
                .map(|p| p.as_slice().to_vec())
                .collect(),
        ))
    }

    fn __repr__(&self) -> String {
        let l = &self.inner.layout;
        format!(
            "Model(streams={}, bins={}, window={}\\{}, hidden={:?})",
            l.streams,
            l.bins,
            l.input_frames,
            l.output_frames,
            self.inner.hidden()
        )
    }
}

/// Generates the synthetic corpus under `out_dir`; returns mixtures per split.
#[pyfunction]
fn mix_dataset<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    out_dir: PathBuf,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = &config.inner;
    let dataset = py
        .detach(|| -> pitsep_core::Result<_> {
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let d = build_dataset(&cfg.corpus, cfg.seed)?;
            write_dataset(&d, &out_dir)?;
            Ok(d)
        })
        .py()?;
    let counts = PyDict::new(py);
    for split in &dataset.splits {
        counts.set_item(split.manifest.split.name(), split.samples.len())?;
    }
    Ok(counts)
}

/// Trains on `<data_dir>/train.jsonl` and validates on `valid.jsonl`.
/// Returns the best model and the curve as a list of per-epoch dicts.
#[pyfunction]
#[pyo3(signature = (config, data_dir, resume = None))]
fn train<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    data_dir: PathBuf,
    resume: Option<&PyModel>,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let cfg = &config.inner;
    let resume = resume.map(|m| m.inner.clone());
    let (model, curve) = py
        .detach(|| -> pitsep_core::Result<_> {
            let (_, tr) = load_split(&manifest_path(&data_dir, Split::Train))?;
            let (_, va) = load_split(&manifest_path(&data_dir, Split::Valid))?;
            core_train(&cfg.train_config(), &cfg.dsp, &tr, &va, resume)
        })
        .py()?;
    let rows = curve
        .epochs
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("train_mse", r.train_mse)?;
            d.set_item("valid_mse", r.valid_mse)?;
            d.set_item("lr", r.lr)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyModel { inner: model }, rows))
}

/// Scores models on a manifest; returns aggregate rows (split, mode, windows, count, sdri, mse).
#[pyfunction]
#[pyo3(signature = (models, manifest, config = None, with_irm = false))]
fn evaluate<'py>(
    py: Python<'py>,
    models: Vec<PyRef<'py, PyModel>>,
    manifest: PathBuf,
    config: Option<&PyRunConfig>,
    with_irm: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut eval_cfg = config.map(|c| c.inner.metrics.clone()).unwrap_or_default();
    eval_cfg.with_irm |= with_irm;
    let split = manifest
        .file_stem()
        .map_or("test".into(), |s| s.to_string_lossy().into_owned());
    let refs: Vec<&CoreModel> = models.iter().map(|m| &m.inner).collect();
    let records = py
        .detach(|| -> pitsep_core::Result<_> {
            let (records, samples) = load_split(&manifest)?;
            let labeled: Vec<_> = records.into_iter().map(|r| r.id).zip(samples).collect();
            eval_report(&refs, &split, &labeled, &eval_cfg)
        })
        .py()?;
    aggregate(&records)
        .into_iter()
        .map(|a| {
            let d = PyDict::new(py);
            d.set_item("split", a.split)?;
            d.set_item("mode", a.mode.name())?;
            d.set_item("in_window", a.in_window)?;
            d.set_item("out_window", a.out_window)?;
            d.set_item("count", a.count)?;
            d.set_item("sdri", a.sdri)?;
            d.set_item("mse", a.mse)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn pitsep(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(best_permutation, m)?)?;
    m.add_function(wrap_pyfunction!(pit_loss, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_masks, m)?)?;
    m.add_function(wrap_pyfunction!(sdr, m)?)?;
    m.add_function(wrap_pyfunction!(stft_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(mix_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
