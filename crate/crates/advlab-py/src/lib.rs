//! Python bindings for the laboratory: datasets, trained models, attacks,
//! and the harness entry points, wrapped thinly over the `advlab` crate.
//!
//! Configuration crosses the boundary as JSON strings — the same documents
//! the CLI reads — so the two front ends cannot drift apart. Reports come
//! back as JSON strings too; call `json.loads` on the Python side.
//!
//! Build and try it:
//!
//! ```text
//! cargo build --release -p advlab-py
//! python3 python/smoke_test.py
//! ```

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use advlab::attacks::{cross_model_attack, report_to_json_value, AttackSpec};
use advlab::dataset::{self, DatasetSpec};
use advlab::defenses::DefenseKind;
use advlab::harness::{self, AnyModel, BoxMode, ExperimentConfig, TableConfig};
use advlab::mlp::argmax_row;
use advlab::numerics::Matrix;

fn to_py_err(e: advlab::Error) -> PyErr {
    match e {
        advlab::Error::Contract(_) | advlab::Error::Format(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(text)
        .map_err(|e| PyValueError::new_err(format!("{what}: invalid JSON config: {e}")))
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py_err)
}

/// A labeled sample matrix with a domain tag, as loaded or synthesized.
#[pyclass(frozen, name = "Dataset")]
struct PyDataset {
    inner: dataset::Dataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn domain(&self) -> &'static str {
        match self.inner.domain() {
            dataset::Domain::ContinuousUnit => "continuous_unit",
            dataset::Domain::Binary => "binary",
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Hex SHA-256 over a canonical encoding of samples, labels, and shape.
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!(
                "row {i} out of range for {} samples",
                self.inner.len()
            )));
        }
        Ok(self.inner.samples().row(i).to_vec())
    }

    fn label(&self, i: usize) -> PyResult<usize> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!(
                "label {i} out of range for {} samples",
                self.inner.len()
            )));
        }
        Ok(self.inner.class_of(i))
    }

    /// Per-class sample counts, index = class.
    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({}, {}×{}, {} classes, {})",
            self.inner.name(),
            self.inner.len(),
            self.inner.input_dim(),
            self.inner.num_classes(),
            self.domain(),
        )
    }
}

/// A trained model — either a plain MLP or the embedding + classifier pair.
#[pyclass(frozen, name = "Model")]
struct PyModel {
    inner: AnyModel,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn kind(&self) -> &'static str {
        match &self.inner {
            AnyModel::Mlp(_) => "mlp",
            AnyModel::LleDnn(_) => "lle_dnn",
        }
    }

    /// Class-probability rows for a batch of samples.
    fn predict_proba(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix_from_rows(rows)?;
        let scores =
            advlab::attacks::Predictor::predict_proba(&self.inner, &x).map_err(to_py_err)?;
        Ok((0..scores.rows()).map(|i| scores.row(i).to_vec()).collect())
    }

    /// Predicted class per sample.
    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let x = matrix_from_rows(rows)?;
        let scores =
            advlab::attacks::Predictor::predict_proba(&self.inner, &x).map_err(to_py_err)?;
        Ok((0..scores.rows()).map(|i| argmax_row(scores.row(i))).collect())
    }

    fn accuracy(&self, data: &PyDataset) -> PyResult<f64> {
        let scores = advlab::attacks::Predictor::predict_proba(&self.inner, data.inner.samples())
            .map_err(to_py_err)?;
        let correct = (0..data.inner.len())
            .filter(|&i| argmax_row(scores.row(i)) == data.inner.class_of(i))
            .count();
        Ok(correct as f64 / data.inner.len() as f64)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        harness::save_model(std::path::Path::new(path), &self.inner).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<PyModel> {
        let inner = harness::load_model(std::path::Path::new(path)).map_err(to_py_err)?;
        Ok(PyModel { inner })
    }

    fn __repr__(&self) -> String {
        format!("Model({})", self.kind())
    }
}

/// Load the MNIST IDX files under `dir` into a stratified, seeded
/// (train, test) subset pair. Sizes of 0 mean "everything".
#[pyfunction]
#[pyo3(signature = (dir, train_size=10_000, test_size=2_000, seed=42))]
fn load_mnist(
    dir: &str,
    train_size: usize,
    test_size: usize,
    seed: u64,
) -> PyResult<(PyDataset, PyDataset)> {
    let spec =
        DatasetSpec::Mnist { dir: std::path::PathBuf::from(dir), train_size, test_size, seed };
    let (train, test) = spec.load().map_err(to_py_err)?;
    Ok((PyDataset { inner: train }, PyDataset { inner: test }))
}

/// Synthesize a dataset pair from a JSON spec, e.g.
/// `{"kind": "gaussian_clusters", "n_train": 400, "n_test": 100,
///   "m": 16, "seed": 7, "separation": 4.0}`.
#[pyfunction]
fn load_dataset(spec_json: &str) -> PyResult<(PyDataset, PyDataset)> {
    let spec: DatasetSpec = parse_json("load_dataset", spec_json)?;
    let (train, test) = spec.load().map_err(to_py_err)?;
    Ok((PyDataset { inner: train }, PyDataset { inner: test }))
}

/// Stratified subsample of `n` rows.
#[pyfunction]
fn subsample(data: &PyDataset, n: usize, seed: u64) -> PyResult<PyDataset> {
    let inner = dataset::subsample(&data.inner, n, seed).map_err(to_py_err)?;
    Ok(PyDataset { inner })
}

/// Train a defense on a dataset. `defense_json` picks the algorithm, e.g.
/// `{"kind": "standard"}`, `{"kind": "adversarial_training", "eps": 0.15}`,
/// `{"kind": "distillation", "temperature": 20.0}`,
/// `{"kind": "lle_dnn", "k": 12, "d": 200}`.
#[pyfunction]
#[pyo3(signature = (defense_json, data, seed=42, epoch_scale=1.0, lle_train_size=3_000))]
fn fit_defense(
    defense_json: &str,
    data: &PyDataset,
    seed: u64,
    epoch_scale: f64,
    lle_train_size: usize,
) -> PyResult<PyModel> {
    let kind: DefenseKind = parse_json("fit_defense", defense_json)?;
    let fitted = harness::fit_defense(&kind, &data.inner, seed, epoch_scale, lle_train_size)
        .map_err(to_py_err)?;
    let inner = match fitted {
        harness::FittedDefense::LleDnn(m) => AnyModel::LleDnn(m),
        harness::FittedDefense::Standard(m)
        | harness::FittedDefense::AdversarialTraining(m)
        | harness::FittedDefense::Distillation(m) => AnyModel::Mlp(m),
    };
    Ok(PyModel { inner })
}

/// Train the surrogate an attacker would use against `target` under the
/// given box mode ("black_box" or "white_box"), mirroring the table's rules.
#[pyfunction]
#[pyo3(signature = (defense_json, box_mode, data, target, seed=42, epoch_scale=1.0))]
fn build_surrogate(
    defense_json: &str,
    box_mode: &str,
    data: &PyDataset,
    target: &PyModel,
    seed: u64,
    epoch_scale: f64,
) -> PyResult<PyModel> {
    let kind: DefenseKind = parse_json("build_surrogate", defense_json)?;
    let mode: BoxMode = parse_json("build_surrogate", &format!("\"{box_mode}\""))?;
    let fitted = match (&target.inner, &kind) {
        (AnyModel::LleDnn(m), DefenseKind::LleDnn { .. }) => {
            harness::FittedDefense::LleDnn(m.clone())
        }
        (AnyModel::Mlp(m), _) => harness::FittedDefense::Standard(m.clone()),
        (AnyModel::LleDnn(_), _) => {
            return Err(PyValueError::new_err(
                "target is an lle_dnn model; the defense kind must be lle_dnn too",
            ))
        }
    };
    let surrogate = harness::build_surrogate(&kind, mode, &data.inner, &fitted, seed, epoch_scale)
        .map_err(to_py_err)?;
    Ok(PyModel { inner: AnyModel::Mlp(surrogate.model) })
}

/// Craft against `surrogate` (a plain MLP), score against `target`, and
/// return the attack report as a JSON string. `attack_json` examples:
/// `{"norm": "linf", "eps": 0.15}`,
/// `{"norm": "l2", "c": 0.1, "steps": 100, "step_size": 0.01}`,
/// `{"norm": "l0", "budget": 40, "direction": "any"}`.
#[pyfunction]
fn attack(
    surrogate: &PyModel,
    target: &PyModel,
    data: &PyDataset,
    attack_json: &str,
) -> PyResult<String> {
    let spec: AttackSpec = parse_json("attack", attack_json)?;
    let mlp = match &surrogate.inner {
        AnyModel::Mlp(m) => m,
        AnyModel::LleDnn(_) => {
            return Err(PyValueError::new_err(
                "surrogates must be plain MLPs; an lle_dnn exposes no input gradients \
                 (attack it through its approximator surrogate instead)",
            ))
        }
    };
    let report = cross_model_attack(mlp, &target.inner, &data.inner, &spec).map_err(to_py_err)?;
    Ok(report_to_json_value(&report).to_string())
}

/// Run one experiment (a defense × box mode × attack list) from a JSON
/// config and return the resulting table as a JSON report string.
#[pyfunction]
fn run_experiment(config_json: &str) -> PyResult<String> {
    let cfg: ExperimentConfig = parse_json("run_experiment", config_json)?;
    let table = harness::run_experiment(&cfg).map_err(to_py_err)?;
    let echo = ExperimentConfig { out: None, ..cfg };
    Ok(table.to_json_value(serde_json::to_value(&echo).unwrap(), true).to_string())
}

/// Run the full resistance grid from a JSON table config; returns the CSV.
/// When `out` is given, `table.csv` and `report.json` land there too.
#[pyfunction]
#[pyo3(signature = (config_json, out=None))]
fn reproduce_table(config_json: &str, out: Option<&str>) -> PyResult<String> {
    let cfg: TableConfig = parse_json("reproduce_table", config_json)?;
    let table = harness::reproduce_table(&cfg, out.map(std::path::Path::new)).map_err(to_py_err)?;
    Ok(table.to_csv())
}

/// Clean accuracy of the LLE-DNN as the embedding dimension varies;
/// returns [(d, accuracy), …]. The config must use an lle_dnn defense.
#[pyfunction]
fn sweep_lle_dim(config_json: &str, dims: Vec<usize>) -> PyResult<Vec<(usize, f64)>> {
    let cfg: ExperimentConfig = parse_json("sweep_lle_dim", config_json)?;
    harness::sweep_lle_dim(&cfg, &dims).map_err(to_py_err)
}

#[pymodule]
fn advlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(load_mnist, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(subsample, m)?)?;
    m.add_function(wrap_pyfunction!(fit_defense, m)?)?;
    m.add_function(wrap_pyfunction!(build_surrogate, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(reproduce_table, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_lle_dim, m)?)?;
    Ok(())
}
