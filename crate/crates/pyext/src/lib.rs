//! Python bindings for the spiking state-space neuron library.
//!
//! Exposes the neuron primitives (LIF, adLIF, SSM neuron banks), activation
//! functions with surrogate derivatives, the FFT kernel, dataset helpers,
//! and config-driven experiment execution.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use spikessm_core::activations::{ActivationKind, ActivationVariant};
use spikessm_core::bptt::forward_eval;
use spikessm_core::data;
use spikessm_core::error::Error;
use spikessm_core::expcli;
use spikessm_core::network::{
    load_checkpoint, save_checkpoint, CheckpointExtras, Network as CoreNetwork,
};
use spikessm_core::neurons::{
    self, init_layer_params, AdLifParams, LayerRunner, LayerState, LifParams, TrainableFlags,
    TransitionKind,
};
use spikessm_core::numkit::{self, Cpx};
use spikessm_core::training;

fn to_py_err(err: Error) -> PyErr {
    match &err {
        Error::Io { .. } => PyIOError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn parse_transition(name: &str) -> PyResult<TransitionKind> {
    match name {
        "diagonal" => Ok(TransitionKind::Diagonal),
        "non_diagonal_dft" => Ok(TransitionKind::NonDiagonalDft),
        other => Err(PyValueError::new_err(format!(
            "unknown transition {other:?}; expected \"diagonal\" or \"non_diagonal_dft\""
        ))),
    }
}

fn parse_activation(name: &str, theta: f64, width: f64, height: f64) -> PyResult<ActivationKind> {
    let variant = match name {
        "non_signed_spike" => ActivationVariant::NonSignedSpike,
        "signed_spike" => ActivationVariant::SignedSpike,
        "gelu" => ActivationVariant::Gelu,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown activation {other:?}; expected \"non_signed_spike\", \
                 \"signed_spike\" or \"gelu\""
            )))
        }
    };
    let kind = ActivationKind {
        variant,
        theta,
        surrogate_width: width,
        surrogate_height: height,
    };
    kind.validate().map_err(to_py_err)?;
    Ok(kind)
}

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    Ok(match value {
        serde_json::Value::Null => py.None(),
        serde_json::Value::Bool(b) => pyo3::types::PyBool::new(py, *b).to_owned().unbind().into_any(),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.unbind().into_any()
            } else {
                n.as_f64()
                    .unwrap_or(f64::NAN)
                    .into_pyobject(py)?
                    .unbind()
                    .into_any()
            }
        }
        serde_json::Value::String(s) => s.into_pyobject(py)?.unbind().into_any(),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.unbind().into_any()
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            dict.unbind().into_any()
        }
    })
}

/// One discrete LIF step; returns `(u_next, spike)`.
#[pyfunction]
#[pyo3(signature = (alpha, theta, u, s_prev, i))]
fn lif_step(alpha: f64, theta: f64, u: f64, s_prev: f64, i: f64) -> (f64, f64) {
    neurons::lif_step(&LifParams { alpha, theta }, u, s_prev, i)
}

/// One adaptive-LIF step; returns `(u_next, w_next, spike)`.
#[pyfunction]
#[pyo3(signature = (alpha, beta, a, b, theta, u, w, s_prev, i))]
#[allow(clippy::too_many_arguments)]
fn adlif_step(
    alpha: f64,
    beta: f64,
    a: f64,
    b: f64,
    theta: f64,
    u: f64,
    w: f64,
    s_prev: f64,
    i: f64,
) -> (f64, f64, f64) {
    neurons::adlif_step(
        &AdLifParams {
            alpha,
            beta,
            a,
            b,
            theta,
        },
        u,
        w,
        s_prev,
        i,
    )
}

/// S4D-Lin eigenvalue initialization; returns `[(re, im); n]`, all inside
/// the unit disk.
#[pyfunction]
#[pyo3(signature = (n, dt_min=0.001, dt_max=0.1, seed=0))]
fn s4d_lin_init(n: usize, dt_min: f64, dt_max: f64, seed: u64) -> PyResult<Vec<(f64, f64)>> {
    let lam = neurons::s4d_lin_init(n, dt_min, dt_max, seed).map_err(to_py_err)?;
    Ok(lam.into_iter().map(|c| (c.re, c.im)).collect())
}

#[pyfunction]
#[pyo3(signature = (kind, values, theta=1.0, width=0.5, height=1.0))]
fn activate(
    kind: &str,
    values: Vec<f64>,
    theta: f64,
    width: f64,
    height: f64,
) -> PyResult<Vec<f64>> {
    let act = parse_activation(kind, theta, width, height)?;
    spikessm_core::activations::activate(&act, &values).map_err(to_py_err)
}

#[pyfunction]
#[pyo3(signature = (kind, values, theta=1.0, width=0.5, height=1.0))]
fn surrogate_derivative(
    kind: &str,
    values: Vec<f64>,
    theta: f64,
    width: f64,
    height: f64,
) -> PyResult<Vec<f64>> {
    let act = parse_activation(kind, theta, width, height)?;
    spikessm_core::activations::surrogate_derivative(&act, &values).map_err(to_py_err)
}

#[pyfunction]
fn gelu(y: f64) -> f64 {
    spikessm_core::activations::gelu(y)
}

/// Unnormalized forward FFT over `(re, im)` pairs (power-of-two length).
#[pyfunction]
fn fft(values: Vec<(f64, f64)>) -> PyResult<Vec<(f64, f64)>> {
    let x: Vec<Cpx> = values.iter().map(|(re, im)| Cpx::new(*re, *im)).collect();
    let out = numkit::fft(&x).map_err(to_py_err)?;
    Ok(out.into_iter().map(|c| (c.re, c.im)).collect())
}

/// Inverse FFT with `1/n` normalization.
#[pyfunction]
fn ifft(values: Vec<(f64, f64)>) -> PyResult<Vec<(f64, f64)>> {
    let x: Vec<Cpx> = values.iter().map(|(re, im)| Cpx::new(*re, *im)).collect();
    let out = numkit::ifft(&x).map_err(to_py_err)?;
    Ok(out.into_iter().map(|c| (c.re, c.im)).collect())
}

#[pyfunction]
fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    training::cosine_lr(base_lr, step, total_steps)
}

/// A bank of SSM neurons stepped one time step at a time.
#[pyclass]
struct SsmLayer {
    runner: LayerRunner,
    act: ActivationKind,
    state: LayerState,
    h: usize,
    n: usize,
    n_in: usize,
    n_out: usize,
    lambda: Vec<(f64, f64)>,
}

#[pymethods]
impl SsmLayer {
    #[new]
    #[pyo3(signature = (h, n, n_in=1, n_out=1, transition="diagonal", activation="signed_spike", seed=0))]
    fn new(
        h: usize,
        n: usize,
        n_in: usize,
        n_out: usize,
        transition: &str,
        activation: &str,
        seed: u64,
    ) -> PyResult<Self> {
        use rand::SeedableRng;
        let kind = parse_transition(transition)?;
        let act = parse_activation(activation, 1.0, 0.5, 1.0)?;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let params = init_layer_params(
            h,
            n,
            n_in,
            n_out,
            0.001,
            0.1,
            TrainableFlags::default(),
            &mut rng,
        )
        .map_err(to_py_err)?;
        let runner = LayerRunner::new(&params, kind).map_err(to_py_err)?;
        let lambda = (0..h * n)
            .map(|i| {
                let c = params.lambda.get(i);
                (c.re, c.im)
            })
            .collect();
        Ok(SsmLayer {
            runner,
            act,
            state: LayerState::zeros(h, n),
            h,
            n,
            n_in,
            n_out,
            lambda,
        })
    }

    /// Observe-then-advance over one step; returns `(y, spikes)`, each of
    /// length `h * n_out`.
    fn step(&mut self, input: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        if input.len() != self.h * self.n_in {
            return Err(PyValueError::new_err(format!(
                "input has length {}, expected h*n_in = {}",
                input.len(),
                self.h * self.n_in
            )));
        }
        let mut y = vec![0.0; self.h * self.n_out];
        self.runner.step(&mut self.state, &input, &mut y);
        if y.iter().any(|v| !v.is_finite()) || !self.state.is_finite() {
            return Err(PyValueError::new_err("neuron state diverged"));
        }
        let s: Vec<f64> = y.iter().map(|&v| self.act.apply_scalar(v)).collect();
        Ok((y, s))
    }

    fn reset(&mut self) {
        self.state = LayerState::zeros(self.h, self.n);
    }

    #[getter]
    fn lambda(&self) -> Vec<(f64, f64)> {
        self.lambda.clone()
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize, usize) {
        (self.h, self.n, self.n_in, self.n_out)
    }
}

/// A trained or freshly initialized network usable for inference.
#[pyclass]
struct Network {
    inner: CoreNetwork,
}

#[pymethods]
impl Network {
    /// Build a seeded network from a TOML network description (the
    /// contents of a config's `[network]` table).
    #[new]
    fn new(spec_toml: &str, seed: u64) -> PyResult<Self> {
        let spec = expcli::parse_network_spec(spec_toml).map_err(to_py_err)?;
        let inner = CoreNetwork::init(spec, seed).map_err(to_py_err)?;
        Ok(Network { inner })
    }

    /// Evaluate a dense spike-count batch: `counts` is flattened
    /// `[batch, t_len, channels]`. Returns `(loss, accuracy, logits)`.
    fn eval(
        &self,
        py: Python<'_>,
        counts: Vec<u16>,
        labels: Vec<u16>,
        t_len: usize,
    ) -> PyResult<(f64, f64, Vec<Vec<f64>>)> {
        let batch = labels.len();
        if batch == 0 || t_len == 0 || counts.len() % (batch * t_len) != 0 {
            return Err(PyValueError::new_err(
                "counts must flatten a [batch, t_len, channels] tensor",
            ));
        }
        let channels = counts.len() / (batch * t_len);
        let sb = data::SpikeBatch {
            batch,
            t_len,
            channels,
            counts,
            labels: labels.clone(),
        };
        let classes = self.inner.spec.num_classes;
        let inner = &self.inner;
        let (loss, logits) = py.detach(|| forward_eval(inner, &sb)).map_err(to_py_err)?;
        let acc = spikessm_core::bptt::accuracy_from_logits(&logits, &labels, classes);
        let rows = logits.chunks(classes).map(|r| r.to_vec()).collect();
        Ok((loss, acc, rows))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(
            std::path::Path::new(path),
            &self.inner,
            &CheckpointExtras::default(),
        )
        .map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let loaded = load_checkpoint(std::path::Path::new(path)).map_err(to_py_err)?;
        Ok(Network {
            inner: loaded.network,
        })
    }

    #[getter]
    fn spec_json(&self) -> String {
        serde_json::to_string(&self.inner.spec).expect("spec serializes")
    }

    #[getter]
    fn num_trainable_params(&self) -> usize {
        self.inner
            .segment_metas()
            .iter()
            .filter(|m| m.trainable)
            .map(|m| m.len)
            .sum()
    }
}

/// Run a full experiment from a TOML config string; returns the summary
/// (mean/std accuracy, per-trial results) as a dict.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_toml: &str) -> PyResult<Py<PyAny>> {
    let cfg = expcli::parse_config(config_toml).map_err(to_py_err)?;
    let summary = py.detach(|| expcli::cmd_run(&cfg)).map_err(to_py_err)?;
    let value = serde_json::to_value(&summary).expect("summary serializes");
    json_to_py(py, &value)
}

/// Finite-difference gradient checks for a (small) config; returns a list
/// of per-variant dicts with per-segment maximum relative errors.
#[pyfunction]
#[pyo3(signature = (config_toml, tolerance=1e-4))]
fn gradient_check(py: Python<'_>, config_toml: &str, tolerance: f64) -> PyResult<Py<PyAny>> {
    let cfg = expcli::parse_config(config_toml).map_err(to_py_err)?;
    let reports = py
        .detach(|| expcli::cmd_gradcheck(&cfg, tolerance))
        .map_err(to_py_err)?;
    let list = PyList::empty(py);
    for (name, report) in reports {
        let dict = PyDict::new(py);
        dict.set_item("variant", name)?;
        dict.set_item("pass", report.pass)?;
        let segs = PyList::empty(py);
        for seg in &report.segments {
            let s = PyDict::new(py);
            s.set_item("name", &seg.name)?;
            s.set_item("max_rel_err", seg.max_rel_err)?;
            s.set_item("worst_index", seg.worst_index)?;
            s.set_item("pass", seg.pass)?;
            segs.append(s)?;
        }
        dict.set_item("segments", segs)?;
        list.append(dict)?;
    }
    Ok(list.unbind().into_any())
}

/// Deterministic synthetic dataset; returns a dict with flattened count
/// tensors and labels for the train and test splits.
#[pyfunction]
#[pyo3(signature = (classes=2, channels=64, t_len=100, train_per_class=128, test_per_class=64, rate_hi=0.5, rate_lo=0.02, seed=0))]
#[allow(clippy::too_many_arguments)]
fn synthetic_dataset(
    py: Python<'_>,
    classes: usize,
    channels: usize,
    t_len: usize,
    train_per_class: usize,
    test_per_class: usize,
    rate_hi: f64,
    rate_lo: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let spec = data::SyntheticSpec {
        classes,
        channels,
        t_len,
        train_per_class,
        test_per_class,
        rate_hi,
        rate_lo,
    };
    let (train, test) = data::synthetic_dataset(&spec, seed);
    let dict = PyDict::new(py);
    let split = |py: Python<'_>, b: &data::SpikeBatch| -> PyResult<Py<PyAny>> {
        let d = PyDict::new(py);
        d.set_item("batch", b.batch)?;
        d.set_item("t_len", b.t_len)?;
        d.set_item("channels", b.channels)?;
        d.set_item("counts", b.counts.clone())?;
        d.set_item("labels", b.labels.clone())?;
        Ok(d.unbind().into_any())
    };
    dict.set_item("train", split(py, &train)?)?;
    dict.set_item("test", split(py, &test)?)?;
    Ok(dict.unbind().into_any())
}

/// Convert a JSON-lines event file into the binary container format.
#[pyfunction]
#[pyo3(signature = (input, output, channels=700, classes=20, id_offset=0))]
fn convert_jsonl(
    input: &str,
    output: &str,
    channels: u16,
    classes: u16,
    id_offset: u32,
) -> PyResult<usize> {
    data::convert_jsonl_to_container(
        std::path::Path::new(input),
        std::path::Path::new(output),
        channels,
        classes,
        id_offset,
    )
    .map_err(to_py_err)
}

/// Validate a container's checksums and return its basic facts.
#[pyfunction]
fn container_info(py: Python<'_>, path: &str) -> PyResult<Py<PyAny>> {
    let ds = data::read_container(std::path::Path::new(path)).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("samples", ds.len())?;
    dict.set_item("channels", ds.channels)?;
    dict.set_item("classes", ds.classes)?;
    dict.set_item(
        "events",
        ds.records.iter().map(|r| r.num_events()).sum::<usize>(),
    )?;
    Ok(dict.unbind().into_any())
}

#[pymodule]
fn spikessm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lif_step, m)?)?;
    m.add_function(wrap_pyfunction!(adlif_step, m)?)?;
    m.add_function(wrap_pyfunction!(s4d_lin_init, m)?)?;
    m.add_function(wrap_pyfunction!(activate, m)?)?;
    m.add_function(wrap_pyfunction!(surrogate_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(gelu, m)?)?;
    m.add_function(wrap_pyfunction!(fft, m)?)?;
    m.add_function(wrap_pyfunction!(ifft, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(convert_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(container_info, m)?)?;
    m.add_class::<SsmLayer>()?;
    m.add_class::<Network>()?;
    Ok(())
}
