//! Python bindings: `import freqrec_py`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use freqrec::config::{AblationSpec, ModelConfig};
use freqrec::data::{generate_synthetic, load_interactions, SplitKind, SyntheticSpec};
use freqrec::evaluation::{evaluate_model, hr_at_k, ndcg_at_k, rank_of_target, MetricsReport};
use freqrec::experiment::{graft_freq_loss, grid_search, parse_grid};
use freqrec::spectral::{irdft, rdft, ComplexSpectrum};
use freqrec::tensor::Tensor;
use freqrec::{checkpoint, Error, FreqRec, InteractionDataset};
use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Index(m) => PyIndexError::new_err(m),
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn ablation(disable: Option<&str>) -> PyResult<AblationSpec> {
    disable.map_or(Ok(AblationSpec::full()), |s| AblationSpec::parse_list(s).map_err(py_err))
}

fn split_kind(name: &str) -> PyResult<SplitKind> {
    match name {
        "valid" => Ok(SplitKind::Valid),
        "test" => Ok(SplitKind::Test),
        other => Err(PyValueError::new_err(format!("split must be valid or test, got `{other}`"))),
    }
}

fn metrics_dict(r: &MetricsReport) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    out.insert("users".to_string(), r.user_count as f64);
    for (k, v) in &r.hr {
        out.insert(format!("hr@{k}"), *v);
    }
    for (k, v) in &r.ndcg {
        out.insert(format!("ndcg@{k}"), *v);
    }
    out
}

/// Model and training settings. Keyword arguments use the same keys as
/// configuration files.
#[pyclass(name = "Config")]
#[derive(Clone)]
struct PyConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut inner = ModelConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string();
                let value = match value.as_str() {
                    "True" => "true".to_string(),
                    "False" => "false".to_string(),
                    _ => value,
                };
                inner.set(&key, &value).map_err(py_err)?;
            }
        }
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        let mut inner = ModelConfig::default();
        inner.apply_text(text).map_err(py_err)?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(dim={}, alpha={}, beta={}, fusion={})", self.inner.dim, self.inner.alpha, self.inner.beta, self.inner.fusion)
    }
}

/// Per-user interaction sequences.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: InteractionDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_interactions(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_sequences(sequences: BTreeMap<u64, Vec<usize>>) -> PyResult<Self> {
        let items = sequences.values().flatten().copied().max().unwrap_or(0);
        let inner = InteractionDataset::new("python", items, sequences).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (cycles=6, users=200, seq_len=25, noise=0.0, items=30, seed=42))]
    fn synthetic(cycles: usize, users: usize, seq_len: usize, noise: f64, items: usize, seed: u64) -> PyResult<Self> {
        let spec = SyntheticSpec {
            cycle_count: cycles,
            users,
            seq_len,
            noise_rate: noise,
            item_count: items,
        };
        let syn = generate_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
        Ok(Self { inner: syn.dataset })
    }

    #[getter]
    fn user_count(&self) -> usize {
        self.inner.user_count()
    }

    #[getter]
    fn item_count(&self) -> usize {
        self.inner.item_count
    }

    fn sequences(&self) -> BTreeMap<u64, Vec<usize>> {
        self.inner.user_sequences.clone()
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.interaction_count()
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: FreqRec,
    /// One line per epoch from the run that produced this model.
    #[pyo3(get)]
    log: String,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: &PyConfig, item_count: usize) -> PyResult<Self> {
        let inner = FreqRec::new(config.inner.clone(), item_count).map_err(py_err)?;
        Ok(Self {
            inner,
            log: String::new(),
        })
    }

    /// Trains from scratch with early stopping and returns the best model.
    #[staticmethod]
    #[pyo3(signature = (config, dataset, disable=None))]
    fn train(py: Python<'_>, config: &PyConfig, dataset: &PyDataset, disable: Option<&str>) -> PyResult<Self> {
        let spec = ablation(disable)?;
        let (inner, log) = py
            .allow_threads(|| freqrec::train(&config.inner, &dataset.inner, &spec))
            .map_err(py_err)?;
        Ok(Self {
            inner,
            log: log.to_text(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = checkpoint::load(&path).map_err(py_err)?;
        Ok(Self {
            inner,
            log: String::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn item_count(&self) -> usize {
        self.inner.item_count()
    }

    #[pyo3(signature = (dataset, split="test", ks=vec![10, 20], disable=None))]
    fn evaluate(
        &self,
        dataset: &PyDataset,
        split: &str,
        ks: Vec<usize>,
        disable: Option<&str>,
    ) -> PyResult<BTreeMap<String, f64>> {
        let spec = ablation(disable)?;
        let view = dataset.inner.split(split_kind(split)?);
        let report = evaluate_model(&self.inner, &spec, &view, &ks, self.inner.config.batch_size).map_err(py_err)?;
        Ok(metrics_dict(&report))
    }

    /// Scores for every item id after each history; entry 0 is padding.
    #[pyo3(signature = (histories, disable=None))]
    fn score(&self, histories: Vec<Vec<usize>>, disable: Option<&str>) -> PyResult<Vec<Vec<f64>>> {
        let spec = ablation(disable)?;
        let rows: Vec<&[usize]> = histories.iter().map(Vec::as_slice).collect();
        let ids = freqrec::evaluation::history_batch(&rows, self.inner.config.max_len);
        self.inner.score_last(&ids, &spec).map_err(py_err)
    }

    /// Ids of the `k` highest-scoring items after each history.
    #[pyo3(signature = (histories, k=10))]
    fn recommend(&self, histories: Vec<Vec<usize>>, k: usize) -> PyResult<Vec<Vec<usize>>> {
        let scores = self.score(histories, None)?;
        Ok(scores
            .into_iter()
            .map(|s| {
                let mut ids: Vec<usize> = (1..s.len()).collect();
                ids.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                ids.truncate(k);
                ids
            })
            .collect())
    }
}

/// One-sided spectrum of a real 1-D signal as `(real, imag)` lists.
#[pyfunction]
fn rdft_1d(signal: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let n = signal.len();
    let s = rdft(&Tensor::new(vec![n], signal).map_err(py_err)?, 0).map_err(py_err)?;
    Ok((s.real.data().to_vec(), s.imag.data().to_vec()))
}

/// Inverse of [`rdft_1d`] for a signal of length `n`.
#[pyfunction]
fn irdft_1d(real: Vec<f64>, imag: Vec<f64>, n: usize) -> PyResult<Vec<f64>> {
    let bins = real.len();
    let spectrum = ComplexSpectrum {
        real: Tensor::new(vec![bins], real).map_err(py_err)?,
        imag: Tensor::new(vec![bins], imag).map_err(py_err)?,
        axis: 0,
        original_length: n,
    };
    Ok(irdft(&spectrum).map_err(py_err)?.data().to_vec())
}

#[pyfunction]
fn rank(scores: Vec<f64>, target: usize) -> PyResult<usize> {
    rank_of_target(&scores, target).map_err(py_err)
}

#[pyfunction]
fn hit_rate(ranks: Vec<usize>, k: usize) -> f64 {
    hr_at_k(&ranks, k)
}

#[pyfunction]
fn ndcg(ranks: Vec<usize>, k: usize) -> f64 {
    ndcg_at_k(&ranks, k)
}

/// Tab-separated grid table; the best row is marked with `*`.
#[pyfunction]
#[pyo3(signature = (config, dataset, grid, disable=None))]
fn grid_search_table(py: Python<'_>, config: &PyConfig, dataset: &PyDataset, grid: &str, disable: Option<&str>) -> PyResult<String> {
    let spec = ablation(disable)?;
    let axes = parse_grid(grid).map_err(py_err)?;
    let result = py
        .allow_threads(|| grid_search(&config.inner, &axes, &dataset.inner, &spec, false))
        .map_err(py_err)?;
    Ok(result.to_table())
}

/// `key = value` report comparing self-attention with and without the
/// frequency loss.
#[pyfunction]
fn graft_report(py: Python<'_>, config: &PyConfig, dataset: &PyDataset) -> PyResult<String> {
    let report = py
        .allow_threads(|| graft_freq_loss(&config.inner, &dataset.inner))
        .map_err(py_err)?;
    Ok(report.to_text())
}

#[pymodule]
fn freqrec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(rdft_1d, m)?)?;
    m.add_function(wrap_pyfunction!(irdft_1d, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(hit_rate, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg, m)?)?;
    m.add_function(wrap_pyfunction!(grid_search_table, m)?)?;
    m.add_function(wrap_pyfunction!(graft_report, m)?)?;
    Ok(())
}
