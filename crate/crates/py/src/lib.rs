//! Python bindings: plugin modules, distilled sets, the base encoder, forge
//! items and the registry, plus the training and distillation entry points.
//!
//! Structured results (metrics, merge records, configs) cross the boundary
//! as plain dicts and lists. Configuration arguments accept either a dict or
//! a JSON string; omitted fields take their defaults.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use forge_core::datasets::{generate_tasks, read_manifest, read_task, write_tasks, GeneratedTask};
use forge_core::distill::{
    distill, eval_distilled, DistillConfig, DistilledDataset, DistilledEvalConfig,
};
use forge_core::eval::{evaluate_task, MetricsReport};
use forge_core::forge::{InitOptions, Repository};
use forge_core::merge::{fuse, ForgeItem, MergeCoefficients, MergeStrategy};
use forge_core::model::{
    forward, train_plugin, BaseEncoder, EncoderConfig, LabelEmbeddingTable, MixtureEntry,
    PluginModule, TrainConfig,
};
use forge_core::numerics::Tensor;

create_exception!(forge_py, ForgeError, PyException);
create_exception!(forge_py, ValidationError, ForgeError);

fn err(e: forge_core::ForgeError) -> PyErr {
    if e.is_validation() {
        ValidationError::new_err(e.to_string())
    } else {
        ForgeError::new_err(e.to_string())
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for forge_core::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| ForgeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: serde::de::DeserializeOwned + Default>(
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<T> {
    let Some(obj) = config else {
        return Ok(T::default());
    };
    let text: String = match obj.extract::<String>() {
        Ok(s) => s,
        Err(_) => obj
            .py()
            .import("json")?
            .call_method1("dumps", (obj,))?
            .extract()?,
    };
    serde_json::from_str(&text).map_err(|e| ValidationError::new_err(format!("config: {e}")))
}

fn rows_to_tensor(rows: Vec<Vec<f32>>) -> PyResult<Tensor> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(ValidationError::new_err("rows have different lengths"));
    }
    Tensor::matrix(n, d, rows.into_iter().flatten().collect()).py_err()
}

fn parse_strategy(s: &str) -> PyResult<MergeStrategy> {
    s.parse().py_err()
}

#[pyclass(
    name = "PluginModule",
    module = "forge_py",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
pub struct PyPlugin(pub PluginModule);

#[pymethods]
impl PyPlugin {
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        PluginModule::from_bytes(data).py_err().map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path)?;
        Self::from_bytes(&bytes)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Ok(std::fs::write(path, self.0.to_bytes())?)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.to_bytes())
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.num_parameters()
    }

    #[getter]
    fn layers(&self) -> Vec<usize> {
        self.0.layer_ids()
    }

    #[getter]
    fn task_tags(&self) -> Vec<String> {
        self.0.task_tags().to_vec()
    }

    /// Parameter fusion of two compatible modules.
    #[staticmethod]
    fn fuse(main: &PyPlugin, branch: &PyPlugin, w_main: f64, w_branch: f64) -> PyResult<Self> {
        let coeffs = MergeCoefficients::new(w_main, w_branch).py_err()?;
        fuse(&main.0, &branch.0, coeffs).py_err().map(Self)
    }

    fn __repr__(&self) -> String {
        format!(
            "PluginModule(id={}, layers={:?})",
            &self.0.id()[..12],
            self.0.layer_ids()
        )
    }
}

#[pyclass(
    name = "DistilledDataset",
    module = "forge_py",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
pub struct PyDistilled(pub DistilledDataset);

#[pymethods]
impl PyDistilled {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        DistilledDataset::load(&path).py_err().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).py_err()
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id()
    }

    #[getter]
    fn task(&self) -> String {
        self.0.task.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels.clone()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "BaseEncoder", module = "forge_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyBase(pub BaseEncoder);

#[pymethods]
impl PyBase {
    /// Frozen encoder drawn from `seed`; `encoder` overrides the layer widths
    /// and temperature.
    #[staticmethod]
    #[pyo3(signature = (seed, encoder=None))]
    fn seeded(seed: u64, encoder: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let config: EncoderConfig = from_py(encoder)?;
        BaseEncoder::seeded(seed, &config).py_err().map(Self)
    }

    #[getter]
    fn hash(&self) -> String {
        self.0.hash()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.0.embed_dim()
    }

    /// Embeddings of `rows`, with `plugin` applied at full weight if given.
    #[pyo3(signature = (rows, plugin=None))]
    fn embed(&self, rows: Vec<Vec<f32>>, plugin: Option<&PyPlugin>) -> PyResult<Vec<Vec<f32>>> {
        let x = rows_to_tensor(rows)?;
        let out = forward(&self.0, plugin.map(|p| &p.0), &x).py_err()?;
        let (n, _) = out.dims2().py_err()?;
        Ok((0..n).map(|i| out.row(i).to_vec()).collect())
    }
}

#[pyclass(name = "ForgeItem", module = "forge_py", frozen)]
pub struct PyItem(pub ForgeItem);

#[pymethods]
impl PyItem {
    #[getter]
    fn id(&self) -> String {
        self.0.id()
    }

    #[getter]
    fn round(&self) -> u32 {
        self.0.round
    }

    #[getter]
    fn strategy(&self) -> String {
        self.0.strategy().to_string()
    }

    /// Plugin ids the item refers to, in mixture order.
    fn referenced_plugins(&self) -> Vec<String> {
        self.0.referenced_plugins()
    }

    /// `(plugin, coefficient)` pairs of the effective model.
    fn entries(&self) -> Vec<(PyPlugin, f32)> {
        self.0
            .entries()
            .into_iter()
            .map(|e| (PyPlugin(e.plugin.clone()), e.coeff))
            .collect()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.to_bytes())
    }

    fn __repr__(&self) -> String {
        format!(
            "ForgeItem(round={}, strategy={}, id={})",
            self.0.round,
            self.0.strategy(),
            &self.0.id()[..12]
        )
    }
}

#[pyclass(name = "Repository", module = "forge_py", frozen)]
pub struct PyRepo(Repository);

#[pymethods]
impl PyRepo {
    /// Creates a registry; `encoder`, `adapter` and `merge` override the defaults.
    #[staticmethod]
    #[pyo3(signature = (path, strategy="mixture", seed=0, encoder=None, adapter=None, merge=None))]
    fn init(
        path: PathBuf,
        strategy: &str,
        seed: u64,
        encoder: Option<&Bound<'_, PyAny>>,
        adapter: Option<&Bound<'_, PyAny>>,
        merge: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Self> {
        let options = InitOptions {
            strategy: parse_strategy(strategy)?,
            base_seed: seed,
            encoder: from_py(encoder)?,
            adapter: from_py(adapter)?,
            merge: from_py(merge)?,
        };
        Repository::init(&path, &options).py_err().map(Self)
    }

    #[staticmethod]
    fn open(path: PathBuf) -> PyResult<Self> {
        Repository::open(&path).py_err().map(Self)
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.0.root().to_path_buf()
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.0.config())
    }

    fn base(&self) -> PyResult<PyBase> {
        self.0.base().py_err().map(PyBase)
    }

    /// Training configuration whose adapter shape matches the registry.
    #[pyo3(signature = (seed=0))]
    fn train_config(&self, py: Python<'_>, seed: u64) -> PyResult<Py<PyAny>> {
        let cfg = TrainConfig {
            adapter: self.0.config().adapter.clone(),
            seed,
            ..TrainConfig::default()
        };
        to_py(py, &cfg)
    }

    /// Stages and commits a contribution for `task`, defined in the
    /// manifest of `data_dir`. Returns the commit id.
    #[pyo3(signature = (author, data_dir, task, plugin, distilled, metadata=None))]
    fn commit(
        &self,
        author: &str,
        data_dir: PathBuf,
        task: &str,
        plugin: &PyPlugin,
        distilled: &PyDistilled,
        metadata: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<String> {
        let spec = read_manifest(&data_dir)
            .py_err()?
            .tasks
            .into_iter()
            .find(|t| t.name == task)
            .ok_or_else(|| ValidationError::new_err(format!("task {task:?} not in manifest")))?;
        let metadata: serde_json::Value = match metadata {
            Some(m) => from_py(Some(m))?,
            None => serde_json::Value::Null,
        };
        let c = self
            .0
            .stage(&spec, &plugin.0, &distilled.0, metadata)
            .py_err()?;
        self.0.commit(author, c).py_err()
    }

    /// Merges the oldest queued contribution; `None` when the queue is empty.
    fn merge_next(&self, py: Python<'_>) -> PyResult<Option<Py<PyAny>>> {
        match self.0.merge_next() {
            Ok(r) => to_py(py, &r).map(Some),
            Err(forge_core::ForgeError::NothingToMerge) => Ok(None),
            Err(e) => Err(err(e)),
        }
    }

    fn merge_commit(&self, py: Python<'_>, commit: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.merge_commit(commit).py_err()?)
    }

    fn merge_all(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.merge_all().py_err()?)
    }

    fn queue(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.queue().py_err()?)
    }

    fn history(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.history().py_err()?)
    }

    fn tasks(&self) -> PyResult<Vec<String>> {
        Ok(self
            .0
            .tasks()
            .py_err()?
            .into_iter()
            .map(|t| t.name)
            .collect())
    }

    fn main_item(&self) -> PyResult<PyItem> {
        self.0.main_item().py_err().map(PyItem)
    }

    fn checkout(&self, round: u32) -> PyResult<PyItem> {
        self.0.checkout(round).py_err().map(PyItem)
    }

    /// Re-hashes every object; returns the object count.
    fn verify(&self) -> PyResult<usize> {
        self.0.verify().py_err()
    }

    fn verify_replay(&self) -> PyResult<PyItem> {
        self.0.verify_replay().py_err().map(PyItem)
    }

    /// Test metrics of the main item (or of `round`) on every registered task.
    #[pyo3(signature = (data_dir, round=None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        data_dir: PathBuf,
        round: Option<u32>,
    ) -> PyResult<Py<PyAny>> {
        let item = match round {
            Some(r) => self.0.checkout(r),
            None => self.0.main_item(),
        }
        .py_err()?;
        let base = self.0.base().py_err()?;
        let entries = item.entries();
        let mut tasks = Vec::new();
        for spec in self.0.tasks().py_err()? {
            let task = read_task(&data_dir, &spec).py_err()?;
            let table = self.0.label_table(&spec).py_err()?;
            tasks.push(evaluate_task(&base, &entries, &table, &task.test).py_err()?);
        }
        let report = MetricsReport::from_tasks(tasks)
            .py_err()?
            .with_meta("round", item.round)
            .with_meta("item", item.id());
        to_py(py, &report)
    }
}

fn load_task(
    data_dir: &PathBuf,
    task: &str,
    base: &BaseEncoder,
) -> PyResult<(GeneratedTask, LabelEmbeddingTable)> {
    let manifest = read_manifest(data_dir).py_err()?;
    let spec = manifest
        .tasks
        .iter()
        .find(|t| t.name == task)
        .ok_or_else(|| ValidationError::new_err(format!("task {task:?} not in manifest")))?;
    let generated = read_task(data_dir, spec).py_err()?;
    let table =
        LabelEmbeddingTable::for_labels(&spec.name, &spec.labels, base.embed_dim()).py_err()?;
    Ok((generated, table))
}

/// Writes the toy tasks under `out`; returns their names.
#[pyfunction]
#[pyo3(signature = (out, seed=0))]
fn generate_data(out: PathBuf, seed: u64) -> PyResult<Vec<String>> {
    let tasks = generate_tasks(seed).py_err()?;
    std::fs::create_dir_all(&out)?;
    write_tasks(&out, seed, &tasks).py_err()?;
    Ok(tasks.into_iter().map(|t| t.spec.name).collect())
}

/// Trains a plugin on the task's training split; returns it with its test metrics.
#[pyfunction]
#[pyo3(signature = (data_dir, task, base, config=None))]
fn train_branch(
    py: Python<'_>,
    data_dir: PathBuf,
    task: &str,
    base: &PyBase,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<(PyPlugin, Py<PyAny>)> {
    let config: TrainConfig = from_py(config)?;
    let (t, table) = load_task(&data_dir, task, &base.0)?;
    let plugin = train_plugin(&base.0, &table, &t.train, &config).py_err()?;
    let metrics =
        evaluate_task(&base.0, &[MixtureEntry::new(&plugin, 1.0)], &table, &t.test).py_err()?;
    Ok((PyPlugin(plugin), to_py(py, &metrics)?))
}

/// Distils the task's training split; returns the synthetic set with the
/// test metrics of an adapter trained on it alone.
#[pyfunction]
#[pyo3(signature = (data_dir, task, base, config=None, eval_config=None))]
fn distill_task(
    py: Python<'_>,
    data_dir: PathBuf,
    task: &str,
    base: &PyBase,
    config: Option<&Bound<'_, PyAny>>,
    eval_config: Option<&Bound<'_, PyAny>>,
) -> PyResult<(PyDistilled, Py<PyAny>)> {
    let config: DistillConfig = from_py(config)?;
    let eval_config: DistilledEvalConfig = from_py(eval_config)?;
    let (t, table) = load_task(&data_dir, task, &base.0)?;
    let outcome = distill(&t.train, &table, &base.0, &t.spec.input_shape, &config).py_err()?;
    let (_, metrics) =
        eval_distilled(&outcome.dataset, &base.0, &table, &t.test, &eval_config).py_err()?;
    Ok((PyDistilled(outcome.dataset), to_py(py, &metrics)?))
}

#[pymodule]
pub fn forge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ForgeError", m.py().get_type::<ForgeError>())?;
    m.add("ValidationError", m.py().get_type::<ValidationError>())?;
    m.add_class::<PyPlugin>()?;
    m.add_class::<PyDistilled>()?;
    m.add_class::<PyBase>()?;
    m.add_class::<PyItem>()?;
    m.add_class::<PyRepo>()?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(train_branch, m)?)?;
    m.add_function(wrap_pyfunction!(distill_task, m)?)?;
    Ok(())
}
