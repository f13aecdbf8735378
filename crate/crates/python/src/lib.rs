//! Python bindings: datasets, tokenisers, models, training and the
//! experiment harness.

use faultformer::augment::{augment_sample, AugmentConfig};
use faultformer::experiment::{run_experiment, ExperimentConfig, ModelChoice, Profile};
use faultformer::signal::{load_bundle, save_bundle, synth_generate};
use faultformer::tokenize::{fft, tokenize_constant, tokenize_fourier, TokenizerConfig};
use faultformer::train::{evaluate, Checkpoint, TrainConfig};
use faultformer::Error;
use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Training { .. } | Error::Numeric { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tokenizer_from(kind: &str, d: usize) -> PyResult<TokenizerConfig> {
    match kind {
        "constant" => Ok(TokenizerConfig::constant(d)),
        "cnn" => Ok(TokenizerConfig::Cnn),
        "fourier" => Ok(TokenizerConfig::fourier()),
        other => Err(PyValueError::new_err(format!("unknown tokenizer {other:?}"))),
    }
}

/// Labelled or unlabelled windows of equal length.
#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: faultformer::signal::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (n_classes, per_class, length, noise_sigma=0.1, seed=0))]
    fn synthetic(n_classes: usize, per_class: usize, length: usize, noise_sigma: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: synth_generate(n_classes, per_class, length, noise_sigma, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_bundle(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_bundle(&self.inner, path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes
    }

    #[getter]
    fn window_length(&self) -> usize {
        self.inner.window_length
    }

    /// `(values, label)` of sample `i`; label is None when unlabelled.
    fn sample(&self, i: usize) -> PyResult<(Vec<f64>, Option<u8>)> {
        let s = self
            .inner
            .samples
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("sample {i} out of range")))?;
        Ok((s.values.clone(), s.label))
    }
}

/// A classifier together with its tokenizer.
#[pyclass(name = "Model")]
struct PyModel {
    inner: faultformer::model::Model,
}

#[pymethods]
impl PyModel {
    /// Desk-sized transformer (or a named baseline) with seeded weights.
    #[new]
    #[pyo3(signature = (n_classes, tokenizer="fourier", d=8, arch="transformer", seed=0))]
    fn new(n_classes: usize, tokenizer: &str, d: usize, arch: &str, seed: u64) -> PyResult<Self> {
        let model = match arch {
            "transformer" => ModelChoice::Transformer,
            "cnn" => ModelChoice::Cnn,
            "mlp" => ModelChoice::Mlp,
            other => return Err(PyValueError::new_err(format!("unknown architecture {other:?}"))),
        };
        let cfg = ExperimentConfig {
            tokenizer: tokenizer_from(tokenizer, d)?,
            model,
            profile: Profile::Desk,
            ..ExperimentConfig::default()
        };
        let spec = cfg.model_spec(n_classes).map_err(to_py)?;
        Ok(Self {
            inner: faultformer::model::Model::seeded(spec, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(to_py)?;
        Ok(Self {
            inner: ck.to_model().map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::from_model(&self.inner).save(path).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    /// Eval-mode class logits for one window.
    fn predict(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict(&x).map_err(to_py)
    }

    /// Class-token attention weights per head at `layer`.
    fn attention(&self, x: Vec<f64>, layer: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner.attention_scores(&x, layer).map_err(to_py)
    }

    /// `(loss, accuracy)` on the given indices, without dropout.
    fn evaluate(&self, data: &PyDataset, indices: Vec<usize>) -> PyResult<(f64, f64)> {
        let m = evaluate(&self.inner, &data.inner, &indices).map_err(to_py)?;
        Ok((m.loss, m.accuracy))
    }
}

/// AdamW with one-cycle schedule around a model.
#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: faultformer::train::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (model, n_samples, epochs=10, batch_size=16, max_lr=1e-3, augment_p=0.0, seed=0))]
    fn new(
        model: &PyModel,
        n_samples: usize,
        epochs: u64,
        batch_size: usize,
        max_lr: f64,
        augment_p: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = TrainConfig {
            epochs,
            batch_size,
            max_lr,
            augment: AugmentConfig::with_probability(augment_p),
            ..TrainConfig::default()
        };
        Ok(Self {
            inner: faultformer::train::Trainer::for_epochs(model.inner.clone(), cfg, seed, n_samples).map_err(to_py)?,
        })
    }

    /// One supervised pass; returns `(mean loss, train accuracy)`.
    fn finetune_epoch(&mut self, data: &PyDataset, indices: Vec<usize>) -> PyResult<(f64, f64)> {
        self.inner.finetune_epoch(&data.inner, &indices).map_err(to_py)
    }

    /// One masked-reconstruction pass; returns the mean loss.
    fn pretrain_epoch(&mut self, data: &PyDataset, indices: Vec<usize>) -> PyResult<f64> {
        self.inner.pretrain_epoch(&data.inner, &indices).map_err(to_py)
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.inner.epoch
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.opt.lr
    }

    /// Snapshot of the current weights.
    fn model(&self) -> PyModel {
        PyModel {
            inner: self.inner.model.clone(),
        }
    }
}

/// Runs an experiment config (JSON text) and returns its result rows as
/// `(model, tokenizer, augment_p, n_train, epoch, accuracy)` tuples.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir=None))]
#[allow(clippy::type_complexity)]
fn run(config_json: &str, out_dir: Option<&str>) -> PyResult<Vec<(String, String, f64, usize, Option<u64>, f64)>> {
    let mut cfg = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    if let Some(o) = out_dir {
        cfg.out_dir = o.into();
    }
    let report = run_experiment(&cfg).map_err(to_py)?;
    Ok(report
        .table
        .rows
        .into_iter()
        .map(|r| (r.model, r.tokenizer, r.augment_p, r.n_train, r.epoch, r.accuracy))
        .collect())
}

/// Forward DFT as `(re, im)` pairs.
#[pyfunction]
fn dft(x: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
    Ok(fft(&x).map_err(to_py)?.into_iter().map(|c| (c.re, c.im)).collect())
}

/// Fixed tokenisation of one window as a list of token rows.
#[pyfunction]
#[pyo3(signature = (x, kind="fourier", d=8))]
fn tokenize(x: Vec<f64>, kind: &str, d: usize) -> PyResult<Vec<Vec<f64>>> {
    let t = match tokenizer_from(kind, d)? {
        TokenizerConfig::Constant { d } => tokenize_constant(&x, d),
        TokenizerConfig::Fourier { n_modes, normalize_frequency } => tokenize_fourier(&x, n_modes, normalize_frequency),
        TokenizerConfig::Cnn => return Err(PyValueError::new_err("the cnn tokenizer is learned; use a Model")),
    }
    .map_err(to_py)?;
    Ok((0..t.n_tokens).map(|i| t.row(i).to_vec()).collect())
}

/// One random augmentation draw with probability `p`.
#[pyfunction]
#[pyo3(signature = (x, p=0.9, seed=0))]
fn augment(x: Vec<f64>, p: f64, seed: u64) -> PyResult<Vec<f64>> {
    let cfg = AugmentConfig::with_probability(p);
    cfg.validate().map_err(to_py)?;
    Ok(augment_sample(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)))
}

#[pymodule]
fn faultformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(dft, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    Ok(())
}
