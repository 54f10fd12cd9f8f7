//! Python module `qnncert`: exact quantized networks, interval bounds,
//! complete verification, construction and training.

use std::path::PathBuf;
use std::time::Duration;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use qnncert_core::data::Dataset as CoreDataset;
use qnncert_core::fixedpoint::{QFormat, QTensor};
use qnncert_core::ibp::{propagate as core_propagate, IntervalTensor};
use qnncert_core::io::config::RunConfig;
use qnncert_core::io::idx::load_idx;
use qnncert_core::io::model::{load_model, model_from_json, model_to_json, save_model};
use qnncert_core::network::{classify, forward, QNetwork};
use qnncert_core::synth::{brute_force_verify as core_brute_force, construct_robust_qnn, OracleVerdict, PointDataset1D};
use qnncert_core::train::train as core_train;
use qnncert_core::verify::{verify as core_verify, verify_baseline, Verdict, VerifyConfig};
use qnncert_core::QnnError;

create_exception!(qnncert, QnnCertError, PyException);

fn err(e: QnnError) -> PyErr {
    QnnCertError::new_err(format!("{}: {e}", e.code()))
}

/// An exact fixed-point network.
#[pyclass(name = "Network", module = "qnncert", frozen)]
struct Network {
    inner: QNetwork,
}

impl Network {
    fn tensor(&self, raw: Vec<i64>) -> PyResult<QTensor> {
        let x = QTensor::new(self.inner.input_shape().to_vec(), raw, self.inner.input_format()).map_err(err)?;
        self.inner.check_input(&x).map_err(err)?;
        Ok(x)
    }
}

#[pymethods]
impl Network {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Network {
            inner: load_model(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Network {
            inner: model_from_json(text).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, &path).map_err(err)
    }

    fn to_json(&self) -> String {
        model_to_json(&self.inner)
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape().to_vec()
    }

    #[getter]
    fn input_format(&self) -> String {
        self.inner.input_format().to_string()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    #[getter]
    fn hidden_neurons(&self) -> usize {
        self.inner.hidden_neurons()
    }

    /// Raw logits for a flat list of raw inputs.
    fn forward(&self, x: Vec<i64>) -> PyResult<Vec<i64>> {
        Ok(forward(&self.inner, &self.tensor(x)?).map_err(err)?.raw)
    }

    fn classify(&self, x: Vec<i64>) -> PyResult<usize> {
        classify(&self.inner, &self.tensor(x)?).map_err(err)
    }

    /// Raw logit bounds `(lower, upper)` over the box `[lower, upper]`.
    fn propagate(&self, lower: Vec<i64>, upper: Vec<i64>) -> PyResult<(Vec<i64>, Vec<i64>)> {
        let region = IntervalTensor::new(self.tensor(lower)?, self.tensor(upper)?).map_err(err)?;
        let b = core_propagate(&self.inner, &region).map_err(err)?;
        Ok((b.lower.raw, b.upper.raw))
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(input_shape={:?}, input_format={}, classes={})",
            self.inner.input_shape(),
            self.inner.input_format(),
            self.inner.class_count()
        )
    }
}

/// Labelled samples read from IDX files.
#[pyclass(name = "Dataset", module = "qnncert", frozen)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (images, labels, input_format = "UQ0.8"))]
    fn load_idx(images: PathBuf, labels: PathBuf, input_format: &str) -> PyResult<Self> {
        let f: QFormat = input_format.parse().map_err(err)?;
        Ok(Dataset {
            inner: load_idx(&images, &labels, f).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(raw inputs, label)` of sample `i`.
    fn sample(&self, i: usize) -> PyResult<(Vec<i64>, usize)> {
        if i >= self.inner.len() {
            return Err(pyo3::exceptions::PyIndexError::new_err(i));
        }
        Ok((self.inner.raw_sample(i).to_vec(), self.inner.labels[i]))
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape.clone()
    }
}

/// Decides robustness of `net` at `x` over the closed L-infinity ball of raw
/// radius `eps`. Returns a dict with `verdict`, `reference_class`,
/// `witness` (or None), `reason` (or None) and search statistics.
#[pyfunction]
#[pyo3(signature = (net, x, eps, timeout = None, max_regions = None, baseline = false, workers = 1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn verify<'py>(
    py: Python<'py>,
    net: &Network,
    x: Vec<i64>,
    eps: u32,
    timeout: Option<f64>,
    max_regions: Option<u64>,
    baseline: bool,
    workers: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let x = net.tensor(x)?;
    let cfg = VerifyConfig {
        timeout: timeout.map(Duration::from_secs_f64),
        max_regions,
        workers,
        seed,
        ..VerifyConfig::default()
    };
    let r = py
        .detach(|| {
            if baseline {
                verify_baseline(&net.inner, &x, eps, &cfg)
            } else {
                core_verify(&net.inner, &x, eps, &cfg)
            }
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("verdict", r.verdict.name())?;
    d.set_item("reference_class", r.reference_class)?;
    let (witness, reason) = match &r.verdict {
        Verdict::Vulnerable { witness } => (Some(witness.raw.clone()), None),
        Verdict::Undecided { reason } => (None, Some(format!("{reason:?}").to_lowercase())),
        Verdict::Robust => (None, None),
    };
    d.set_item("witness", witness)?;
    d.set_item("reason", reason)?;
    d.set_item("regions_processed", r.stats.regions_processed)?;
    d.set_item("splits", r.stats.splits)?;
    d.set_item("pgd_calls", r.stats.pgd_calls)?;
    d.set_item("wall_time", r.stats.wall_time.as_secs_f64())?;
    Ok(d)
}

/// Exhaustive check of the closed ball; returns `(verdict, witness)`.
#[pyfunction]
#[pyo3(signature = (net, x, eps, budget = 1_000_000))]
fn brute_force_verify(net: &Network, x: Vec<i64>, eps: u32, budget: u128) -> PyResult<(String, Option<Vec<i64>>)> {
    let x = net.tensor(x)?;
    Ok(match core_brute_force(&net.inner, &x, eps, budget).map_err(err)? {
        OracleVerdict::Robust => ("robust".into(), None),
        OracleVerdict::Vulnerable { witness } => ("vulnerable".into(), Some(witness.raw)),
    })
}

/// Network classifying the open `eps`-ball around each `(x, label)` point
/// with that point's label.
#[pyfunction]
#[pyo3(signature = (points, eps, bits = 8, classes = None))]
fn construct(points: Vec<(i64, usize)>, eps: u32, bits: u32, classes: Option<usize>) -> PyResult<Network> {
    let ds = PointDataset1D::new(points, bits).map_err(err)?;
    Ok(Network {
        inner: construct_robust_qnn(&ds, eps, classes).map_err(err)?,
    })
}

/// Runs a training configuration file and returns the exported network and
/// the logged metrics rows as dicts. Nothing is written to disk.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: PathBuf) -> PyResult<(Network, Vec<Bound<'py, PyDict>>)> {
    let out = py
        .detach(|| -> qnncert_core::Result<_> {
            let cfg = RunConfig::load(&config)?;
            let data = cfg.load_dataset()?;
            core_train(&data, &cfg.arch(&data)?, &cfg.train, |_| {})
        })
        .map_err(err)?;
    let rows = out
        .metrics
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("loss", r.loss)?;
            d.set_item("eps", r.eps)?;
            d.set_item("clean_acc", r.clean_acc)?;
            d.set_item("certified_frac", r.certified_frac)?;
            d.set_item("saturated_neuron_frac", r.saturated_neuron_frac)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((Network { inner: out.network }, rows))
}

#[pymodule]
fn qnncert(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("QnnCertError", m.py().get_type::<QnnCertError>())?;
    m.add_class::<Network>()?;
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_verify, m)?)?;
    m.add_function(wrap_pyfunction!(construct, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
