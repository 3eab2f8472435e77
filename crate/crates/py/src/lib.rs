//! Python bindings: tensors, profiles, the synthetic dataset, models,
//! oracles, training and the verification metrics.

use std::path::PathBuf;

use agrgan::data::{self, LabeledImage, SynthConfig};
use agrgan::eval::{self, OracleModels, ScoreSet};
use agrgan::nn::{AgrGan, ConditionVector, ScaleProfile};
use agrgan::train::{self as tr, TrainConfig};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: agrgan::Error) -> PyErr {
    match e {
        agrgan::Error::NonFinite { .. } | agrgan::Error::Threshold { .. } => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Dense row-major f64 array.
#[pyclass(name = "Tensor", module = "agrgan", from_py_object)]
#[derive(Clone)]
pub struct PyTensor(agrgan::tensor::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        agrgan::tensor::Tensor::new(&shape, data).map(PyTensor).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn numel(&self) -> usize {
        self.0.numel()
    }

    fn __len__(&self) -> usize {
        self.0.shape().first().copied().unwrap_or(1)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "ScaleProfile", module = "agrgan", from_py_object, eq)]
#[derive(Clone, PartialEq)]
pub struct PyProfile(ScaleProfile);

#[pymethods]
impl PyProfile {
    #[staticmethod]
    fn desk() -> Self {
        PyProfile(ScaleProfile::desk())
    }

    #[staticmethod]
    fn paper() -> Self {
        PyProfile(ScaleProfile::paper())
    }

    #[staticmethod]
    fn by_name(name: &str) -> PyResult<Self> {
        ScaleProfile::by_name(name).map(PyProfile).map_err(py_err)
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.0.image_size
    }

    #[getter]
    fn enc_dim(&self) -> usize {
        self.0.enc_dim
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

/// Labeled synthetic samples.
#[pyclass(name = "Dataset", module = "agrgan")]
pub struct PyDataset(Vec<LabeledImage>);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (identities=200, per_identity=10, size=32, seed=0))]
    fn synthetic(identities: usize, per_identity: usize, size: usize, seed: u64) -> PyResult<Self> {
        let cfg = SynthConfig {
            identities,
            per_identity,
            size,
            seed,
        };
        data::generate_synthetic(&cfg).map(PyDataset).map_err(py_err)
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        data::read_dataset(&dir).map(PyDataset).map_err(py_err)
    }

    /// Writes the P6 cache; returns the index SHA-256.
    fn write(&self, dir: PathBuf) -> PyResult<String> {
        data::write_dataset(&dir, &self.0, None)
            .map(|m| m.index_sha256)
            .map_err(py_err)
    }

    /// `(train, eval)` split disjoint by identity.
    fn split(&self) -> (PyDataset, PyDataset) {
        let (a, b) = data::split_by_identity(self.0.clone());
        (PyDataset(a), PyDataset(b))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn identities(&self) -> Vec<usize> {
        self.0.iter().map(|s| s.identity).collect()
    }

    fn ages(&self) -> Vec<f64> {
        self.0.iter().map(|s| s.age).collect()
    }

    fn genders(&self) -> Vec<usize> {
        self.0.iter().map(|s| s.gender).collect()
    }

    fn groups(&self) -> Vec<usize> {
        self.0.iter().map(|s| s.group()).collect()
    }

    /// All images stacked into an `N × 3 × S × S` tensor.
    fn images(&self) -> PyResult<PyTensor> {
        let idx: Vec<usize> = (0..self.0.len()).collect();
        data::stack(&self.0, &idx).map(PyTensor).map_err(py_err)
    }
}

/// Representor, generator, both discriminators and the age estimator.
#[pyclass(name = "Model", module = "agrgan", unsendable)]
pub struct PyModel(AgrGan);

fn conditions(groups: &[usize], genders: &[usize]) -> PyResult<Vec<ConditionVector>> {
    if groups.len() != genders.len() {
        return Err(PyValueError::new_err("groups and genders must have equal length"));
    }
    groups
        .iter()
        .zip(genders)
        .map(|(&a, &g)| ConditionVector::new(a, g).map_err(py_err))
        .collect()
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (profile, seed=0))]
    fn new(profile: &PyProfile, seed: u64) -> PyResult<Self> {
        AgrGan::new(profile.0, seed).map(PyModel).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf, profile: &PyProfile) -> PyResult<Self> {
        AgrGan::load(&path, profile.0).map(PyModel).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes()
    }

    #[getter]
    fn profile(&self) -> PyProfile {
        PyProfile(self.0.profile)
    }

    fn encode(&self, images: &PyTensor) -> PyResult<PyTensor> {
        self.0.encode(&images.0).map(PyTensor).map_err(py_err)
    }

    /// `G(R(x), group, gender)` per image.
    fn transform(&self, images: &PyTensor, groups: Vec<usize>, genders: Vec<usize>) -> PyResult<PyTensor> {
        let conds = conditions(&groups, &genders)?;
        self.0.transform(&images.0, &conds).map(PyTensor).map_err(py_err)
    }

    fn generate(&self, codes: &PyTensor, groups: Vec<usize>, genders: Vec<usize>) -> PyResult<PyTensor> {
        let conds = conditions(&groups, &genders)?;
        self.0.generate(&codes.0, &conds).map(PyTensor).map_err(py_err)
    }
}

/// Frozen age oracle, identity embedding and verifier.
#[pyclass(name = "Oracles", module = "agrgan", unsendable)]
pub struct PyOracles(OracleModels);

#[pymethods]
impl PyOracles {
    #[staticmethod]
    #[pyo3(signature = (train, heldout, profile, seed=0))]
    fn pretrain(train: &PyDataset, heldout: &PyDataset, profile: &PyProfile, seed: u64) -> PyResult<Self> {
        OracleModels::pretrain(&train.0, &heldout.0, profile.0, seed)
            .map(PyOracles)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        OracleModels::load(&dir).map(PyOracles).map_err(py_err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.0.save(&dir).map_err(py_err)
    }

    fn checksum(&self) -> String {
        self.0.checksum()
    }

    /// `(age_exact, age_within_one, phi_auc, verifier_auc)` on held-out data.
    fn report(&self) -> (f64, f64, f64, f64) {
        let r = &self.0.report;
        (r.age_exact, r.age_within_one, r.phi_auc, r.verifier_auc)
    }

    fn predict_groups(&self, images: &PyTensor) -> PyResult<Vec<usize>> {
        eval::predict_groups(&self.0.age, &images.0).map_err(py_err)
    }

    /// Mean oracle-predicted group per target group.
    fn aging_eval(&self, model: &PyModel, data: &PyDataset) -> PyResult<Vec<f64>> {
        eval::aging_model_eval(&model.0, &data.0, &self.0)
            .map(|r| r.means())
            .map_err(py_err)
    }

    /// EER per target group.
    fn identity_eval(&self, model: &PyModel, data: &PyDataset) -> PyResult<Vec<f64>> {
        eval::identity_preservation_eval(&model.0, &data.0, &self.0)
            .map(|r| r.eers())
            .map_err(py_err)
    }

    /// `(baseline_eer, agr_eer)` on max-age-gap pairs.
    fn verification_eval(&self, model: &PyModel, data: &PyDataset) -> PyResult<(f64, f64)> {
        eval::verification_gain_eval(&model.0, &data.0, &self.0)
            .map(|r| (r.baseline.eer, r.agr.eer))
            .map_err(py_err)
    }
}

/// Trains from scratch; returns the model and the per-step combined loss.
#[pyfunction]
#[pyo3(signature = (data, oracles, epochs=1, seed=0, batch_size=64, lr=2e-4, beta1=0.5, profile=None, out=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    data: &PyDataset,
    oracles: &PyOracles,
    epochs: usize,
    seed: u64,
    batch_size: usize,
    lr: f64,
    beta1: f64,
    profile: Option<&PyProfile>,
    out: Option<PathBuf>,
) -> PyResult<(PyModel, Vec<f64>)> {
    let profile = profile.map_or(oracles.0.report.profile, |p| p.0);
    let cfg = TrainConfig {
        epochs,
        seed,
        batch_size,
        lr,
        beta1,
        ..TrainConfig::for_profile(profile)
    };
    let res = tr::train(cfg, &data.0, &oracles.0.phi, out.as_deref()).map_err(py_err)?;
    Ok((PyModel(res.model), res.reports.iter().map(|r| r.total).collect()))
}

#[pyfunction]
fn age_to_group(age: f64) -> PyResult<usize> {
    data::age_to_group(age).map_err(py_err)
}

/// One-hot age group followed by one-hot gender.
#[pyfunction]
fn encode_condition(group: usize, gender: usize) -> PyResult<Vec<f64>> {
    data::encode_condition(group, gender).map(|c| c.to_vec()).map_err(py_err)
}

#[pyfunction]
fn normalize(raw: Vec<f64>) -> Vec<f64> {
    data::normalize(&raw)
}

#[pyfunction]
fn denormalize(x: Vec<f64>) -> Vec<f64> {
    data::denormalize(&x)
}

#[pyfunction]
fn compute_eer(genuine: Vec<f64>, impostor: Vec<f64>) -> PyResult<f64> {
    eval::compute_eer(&ScoreSet::new(genuine, impostor)).map_err(py_err)
}

#[pyfunction]
fn roc_curve(genuine: Vec<f64>, impostor: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
    eval::roc_curve(&ScoreSet::new(genuine, impostor)).map_err(py_err)
}

#[pyfunction]
fn auc(genuine: Vec<f64>, impostor: Vec<f64>) -> PyResult<f64> {
    eval::roc_curve(&ScoreSet::new(genuine, impostor))
        .map(|r| eval::auc(&r))
        .map_err(py_err)
}

#[pymodule]
#[pyo3(name = "agrgan")]
fn agrgan_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyProfile>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyOracles>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(age_to_group, m)?)?;
    m.add_function(wrap_pyfunction!(encode_condition, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(denormalize, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add("AGE_GROUPS", agrgan::nn::AGE_GROUPS)?;
    Ok(())
}
