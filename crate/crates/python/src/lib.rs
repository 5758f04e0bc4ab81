//! Python bindings for the `moad` library.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;

use moad::fusion::{self, Aggregator, FusionConfig, LateFusion};
use moad::harness::cv;
use moad::harness::synth::{write_synthetic, SyntheticSpec};
use moad::harness::{metrics, selection, train as train_mod, Dataset, RunConfig, Task};
use moad::numeric::{OuterKind, ParamStore, SeededRng, Tensor};
use moad::survival::{self, SurvivalBatch, SurvivalLabel};
use moad::Error;

type Metrics = BTreeMap<String, f64>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) | Error::Singularity { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_kind(kind: &str) -> PyResult<OuterKind> {
    match kind {
        "product" => Ok(OuterKind::Product),
        "division" => Ok(OuterKind::Division),
        "addition" => Ok(OuterKind::Addition),
        "subtraction" => Ok(OuterKind::Subtraction),
        other => Err(PyValueError::new_err(format!("unknown outer operation '{other}'"))),
    }
}

fn parse_config(json: Option<&str>) -> PyResult<RunConfig> {
    let cfg = match json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// `[c; v]`.
#[pyfunction]
fn append_constant(v: Vec<f64>, c: f64) -> Vec<f64> {
    fusion::append_constant(&v, c)
}

/// Outer arithmetic matrix of two vectors that already carry their constants.
#[pyfunction]
#[pyo3(signature = (w, o, kind, epsilon=1e-8))]
fn outer_op(w: Vec<f64>, o: Vec<f64>, kind: &str, epsilon: f64) -> PyResult<Vec<Vec<f64>>> {
    let t = fusion::outer_op(&w, &o, parse_kind(kind)?, epsilon).map_err(py_err)?;
    Ok(rows_of(&t))
}

/// Shapes produced by the MOAB block for the given widths.
#[pyfunction]
#[pyo3(signature = (slide_dim=256, omic_dim=256, outputs=4, seed=0))]
fn moab_shapes(slide_dim: usize, omic_dim: usize, outputs: usize, seed: u64) -> PyResult<BTreeMap<String, Vec<usize>>> {
    let cfg = FusionConfig::new(Aggregator::Moab, slide_dim, omic_dim, outputs);
    let late = LateFusion::new(cfg).map_err(py_err)?;
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    late.init(&mut store, &mut rng);
    let w = moad::attention::SlideEmbedding((0..slide_dim).map(|_| rng.normal()).collect());
    let o = moad::encoders::EncodedOmic((0..omic_dim).map(|_| rng.normal()).collect());
    let s = fusion::moab_shapes(&cfg, &store, &w, &o).map_err(py_err)?;
    Ok(BTreeMap::from([
        ("interaction".to_string(), s.interaction),
        ("reduced".to_string(), s.reduced),
        ("head_input".to_string(), vec![s.head_input]),
        ("logits".to_string(), vec![s.logits]),
    ]))
}

#[pyfunction]
fn hazards_and_survival(logits: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    survival::hazards_and_survival(&logits)
}

/// Mean censored negative log-likelihood over rows of `logits`.
#[pyfunction]
fn nll_loss(logits: Vec<Vec<f64>>, bins: Vec<usize>, censored: Vec<bool>) -> PyResult<f64> {
    if bins.len() != censored.len() {
        return Err(PyValueError::new_err("bins and censored differ in length"));
    }
    let labels = bins
        .iter()
        .zip(&censored)
        .map(|(&bin, &censored)| SurvivalLabel { time: 0.0, censored, bin })
        .collect();
    let logits = Tensor::from_rows(&logits).map_err(py_err)?;
    survival::nll_loss(&SurvivalBatch { logits, labels }).map_err(py_err)
}

#[pyfunction]
fn concordance_index(risks: Vec<f64>, times: Vec<f64>, censored: Vec<bool>) -> PyResult<f64> {
    survival::concordance_index(&risks, &times, &censored).map_err(py_err)
}

/// Bin edges from the uncensored times.
#[pyfunction]
fn discretize_bins(times: Vec<f64>, censored: Vec<bool>, n_bins: usize) -> PyResult<Vec<f64>> {
    Ok(survival::discretize_bins(&times, &censored, n_bins).map_err(py_err)?.edges)
}

#[pyfunction]
fn select_cpg_features(rows: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<usize>> {
    selection::select_cpg_features(&rows, k).map_err(py_err)
}

#[pyfunction]
fn evaluate_classification(pred: Vec<usize>, truth: Vec<usize>, classes: usize) -> PyResult<BTreeMap<String, f64>> {
    let m = metrics::evaluate_classification(&pred, &truth, classes).map_err(py_err)?;
    let mut out = m.to_map();
    out.insert("accuracy".into(), m.accuracy);
    Ok(out)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).map_err(py_err)
}

/// Writes a planted-signal dataset and returns the number of slides.
#[pyfunction]
#[pyo3(signature = (out, classes=4, slides=200, seed=0, survival=false, omic_features=64, patch_dim=32, min_patches=50, max_patches=200))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    out: PathBuf,
    classes: usize,
    slides: usize,
    seed: u64,
    survival: bool,
    omic_features: usize,
    patch_dim: usize,
    min_patches: usize,
    max_patches: usize,
) -> PyResult<usize> {
    let spec = SyntheticSpec {
        task: if survival { Task::Survival } else { Task::Subtype },
        classes,
        patch_groups: classes / 2,
        slides,
        seed,
        omic_features,
        patch_dim,
        min_patches,
        max_patches,
        ..SyntheticSpec::default()
    };
    Ok(write_synthetic(&spec, &out).map_err(py_err)?.bags.len())
}

/// Runs the finite-difference suite; returns `{case: max relative error}` and
/// whether every case passed.
#[pyfunction]
#[pyo3(signature = (seed=0, instances=10))]
fn gradcheck(seed: u64, instances: usize) -> PyResult<(BTreeMap<String, f64>, bool)> {
    let report = moad::gradcheck::run_suite(seed, instances).map_err(py_err)?;
    let errors = report.cases.iter().map(|c| (c.name.clone(), c.max_rel_error)).collect();
    Ok((errors, report.all_passed()))
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: Dataset::load(&dir).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn slide_ids(&self) -> Vec<String> {
        self.inner.samples.iter().map(|s| s.slide_id.clone()).collect()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn omic_features(&self) -> usize {
        self.inner.omic_features()
    }

    #[getter]
    fn patch_dim(&self) -> usize {
        self.inner.patch_dim()
    }
}

#[pyclass(name = "TrainedModel", frozen)]
struct PyTrainedModel {
    inner: train_mod::TrainedModel,
}

#[pymethods]
impl PyTrainedModel {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyTrainedModel {
            inner: train_mod::TrainedModel::load(&dir).map_err(py_err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(py_err)
    }

    /// `(logits, attention or None)` for one slide.
    fn predict(&self, dataset: &PyDataset, slide_id: &str) -> PyResult<(Vec<f64>, Option<Vec<f64>>)> {
        let sample = dataset
            .inner
            .find(slide_id)
            .ok_or_else(|| PyKeyError::new_err(slide_id.to_string()))?;
        let p = self.inner.predict(sample).map_err(py_err)?;
        Ok((p.logits, p.attention))
    }

    fn evaluate(&self, dataset: &PyDataset) -> PyResult<BTreeMap<String, f64>> {
        let all: Vec<usize> = (0..dataset.inner.len()).collect();
        Ok(self.inner.evaluate(&dataset.inner, &all).map_err(py_err)?.metrics)
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.names().map(str::to_string).collect()
    }

    #[getter]
    fn fusion(&self) -> &'static str {
        self.inner.meta.spec.fusion.name()
    }
}

/// Trains on every slide. `config` is a JSON document; omitted fields take
/// their defaults. Returns the model and its final step loss.
#[pyfunction]
#[pyo3(signature = (dataset, config=None))]
fn train(dataset: &PyDataset, config: Option<&str>) -> PyResult<(PyTrainedModel, f64)> {
    let cfg = parse_config(config)?;
    let all: Vec<usize> = (0..dataset.inner.len()).collect();
    let (model, log) = train_mod::train(&cfg, &dataset.inner, &all).map_err(py_err)?;
    Ok((PyTrainedModel { inner: model }, log.final_loss))
}

/// Cross-validation; returns per-fold metrics and their means.
#[pyfunction]
#[pyo3(signature = (dataset, config=None))]
fn run_cv(dataset: &PyDataset, config: Option<&str>) -> PyResult<(Vec<Metrics>, Metrics)> {
    let cfg = parse_config(config)?;
    let out = cv::run_cv(&cfg, &dataset.inner).map_err(py_err)?;
    Ok((out.report.per_fold, out.report.mean))
}

#[pymodule]
pub fn moadnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(append_constant, m)?)?;
    m.add_function(wrap_pyfunction!(outer_op, m)?)?;
    m.add_function(wrap_pyfunction!(moab_shapes, m)?)?;
    m.add_function(wrap_pyfunction!(hazards_and_survival, m)?)?;
    m.add_function(wrap_pyfunction!(nll_loss, m)?)?;
    m.add_function(wrap_pyfunction!(concordance_index, m)?)?;
    m.add_function(wrap_pyfunction!(discretize_bins, m)?)?;
    m.add_function(wrap_pyfunction!(select_cpg_features, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_classification, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_cv, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainedModel>()?;
    Ok(())
}
