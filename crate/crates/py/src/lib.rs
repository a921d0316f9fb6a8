//! Python bindings for the expert-layer core: matrices, expert banks, the
//! mixed and merged layers, parameter merging, the FLOPs model, and the
//! config-driven run modes.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use meo_core::config::parse_config_str;
use meo_core::cost::{self, ModelProfile, ModelVariant};
use meo_core::expert::{ActivationKind, ActivationPlacement, ExpertBank};
use meo_core::gating::{self, GateLevel, GateParams};
use meo_core::meo::{self, MeoLayer};
use meo_core::moe::MoeLayer;
use meo_core::oracle;
use meo_core::tensor::{Matrix2D, Rng};
use meo_core::{runner, Error};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_activation(name: &str) -> PyResult<ActivationKind> {
    match name {
        "identity" => Ok(ActivationKind::Identity),
        "relu" => Ok(ActivationKind::Relu),
        "gelu" => Ok(ActivationKind::Gelu),
        "tanh" => Ok(ActivationKind::Tanh),
        other => Err(PyValueError::new_err(format!(
            "unknown activation '{other}' (expected identity, relu, gelu, or tanh)"
        ))),
    }
}

fn parse_level(name: &str) -> PyResult<GateLevel> {
    match name {
        "token" => Ok(GateLevel::Token),
        "sequence" => Ok(GateLevel::Sequence),
        "task" => Ok(GateLevel::Task),
        other => Err(PyValueError::new_err(format!(
            "unknown gate level '{other}' (expected token, sequence, or task)"
        ))),
    }
}

fn parse_placement(name: &str) -> PyResult<ActivationPlacement> {
    match name {
        "inside" => Ok(ActivationPlacement::InsideExperts),
        "outside" => Ok(ActivationPlacement::OutsideExperts),
        other => Err(PyValueError::new_err(format!(
            "unknown placement '{other}' (expected inside or outside)"
        ))),
    }
}

fn parse_variant(name: &str) -> PyResult<ModelVariant> {
    match name {
        "vanilla" => Ok(ModelVariant::Vanilla),
        "moe" => Ok(ModelVariant::Moe),
        "meo" => Ok(ModelVariant::Meo),
        "meo_token" => Ok(ModelVariant::MeoToken),
        other => Err(PyValueError::new_err(format!(
            "unknown variant '{other}' (expected vanilla, moe, meo, or meo_token)"
        ))),
    }
}

fn build_gate(
    d_in: usize,
    n: usize,
    level: GateLevel,
    gate_seed: u64,
    num_tasks: Option<usize>,
) -> PyResult<GateParams> {
    match (level, num_tasks) {
        (GateLevel::Task, Some(t)) => GateParams::init_with_tasks(d_in, n, t, gate_seed),
        (GateLevel::Task, None) => {
            return Err(PyValueError::new_err("task-level routing needs num_tasks"))
        }
        (_, _) => GateParams::init(d_in, n, gate_seed),
    }
    .map_err(to_py_err)
}

/// Dense row-major f64 matrix.
#[pyclass(name = "Matrix2D", skip_from_py_object)]
#[derive(Clone)]
struct PyMatrix {
    inner: Matrix2D,
}

#[pymethods]
impl PyMatrix {
    /// Builds from a list of equal-length rows.
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Matrix2D::from_rows(&rows).map(|inner| Self { inner }).map_err(to_py_err)
    }

    #[staticmethod]
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { inner: Matrix2D::zeros(rows, cols) }
    }

    /// Seeded uniform fill over [lo, hi).
    #[staticmethod]
    fn random(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        Self { inner: Matrix2D::random_uniform(rows, cols, lo, hi, &mut rng) }
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    fn get(&self, r: usize, c: usize) -> PyResult<f64> {
        let (rows, cols) = self.inner.shape();
        if r >= rows || c >= cols {
            return Err(PyValueError::new_err(format!(
                "index ({r}, {c}) out of range for {rows}x{cols}"
            )));
        }
        Ok(self.inner.get(r, c))
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        (0..self.inner.rows()).map(|r| self.inner.row(r).to_vec()).collect()
    }

    /// Largest absolute entrywise difference against another matrix.
    fn max_abs_diff(&self, other: &PyMatrix) -> PyResult<f64> {
        self.inner.max_abs_diff(&other.inner).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        let (r, c) = self.inner.shape();
        format!("Matrix2D({r}x{c})")
    }
}

/// A bank of n affine experts sharing one activation.
#[pyclass(name = "ExpertBank", skip_from_py_object)]
#[derive(Clone)]
struct PyExpertBank {
    inner: ExpertBank,
}

#[pymethods]
impl PyExpertBank {
    #[new]
    fn new(n_experts: usize, d_in: usize, d_out: usize, activation: &str, seed: u64) -> PyResult<Self> {
        let act = parse_activation(activation)?;
        ExpertBank::init(n_experts, d_in, d_out, act, seed)
            .map(|inner| Self { inner })
            .map_err(to_py_err)
    }

    #[getter]
    fn n_experts(&self) -> usize {
        self.inner.n_experts()
    }

    #[getter]
    fn d_in(&self) -> usize {
        self.inner.d_in()
    }

    #[getter]
    fn d_out(&self) -> usize {
        self.inner.d_out()
    }

    #[getter]
    fn activation(&self) -> &'static str {
        self.inner.activation().name()
    }

    fn weight(&self, k: usize) -> PyResult<PyMatrix> {
        if k >= self.inner.n_experts() {
            return Err(PyValueError::new_err(format!("expert {k} out of range")));
        }
        Ok(PyMatrix { inner: self.inner.weight(k).clone() })
    }

    fn bias(&self, k: usize) -> PyResult<Vec<f64>> {
        if k >= self.inner.n_experts() {
            return Err(PyValueError::new_err(format!("expert {k} out of range")));
        }
        Ok(self.inner.bias(k).to_vec())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        ExpertBank::load(std::path::Path::new(path)).map(|inner| Self { inner }).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "ExpertBank(n={}, d_in={}, d_out={}, activation={})",
            self.inner.n_experts(),
            self.inner.d_in(),
            self.inner.d_out(),
            self.inner.activation().name(),
        )
    }
}

/// Output mixing: run every selected expert, sum outputs under gate scores.
#[pyclass(name = "MoeLayer")]
struct PyMoeLayer {
    inner: MoeLayer,
    task_level: bool,
}

#[pymethods]
impl PyMoeLayer {
    #[new]
    #[pyo3(signature = (bank, level, m, placement, renormalize, gate_seed, num_tasks=None))]
    fn new(
        bank: &PyExpertBank,
        level: &str,
        m: usize,
        placement: &str,
        renormalize: bool,
        gate_seed: u64,
        num_tasks: Option<usize>,
    ) -> PyResult<Self> {
        let level = parse_level(level)?;
        let placement = parse_placement(placement)?;
        let gate =
            build_gate(bank.inner.d_in(), bank.inner.n_experts(), level, gate_seed, num_tasks)?;
        MoeLayer::new(bank.inner.clone(), gate, level, m, placement, renormalize)
            .map(|inner| Self { inner, task_level: level == GateLevel::Task })
            .map_err(to_py_err)
    }

    #[pyo3(signature = (x, task_id=None))]
    fn forward(&self, x: &PyMatrix, task_id: Option<usize>) -> PyResult<PyMatrix> {
        if self.task_level && task_id.is_none() {
            return Err(PyValueError::new_err("task-level routing needs task_id"));
        }
        let (y, _) = self.inner.forward(&x.inner, task_id).map_err(to_py_err)?;
        Ok(PyMatrix { inner: y })
    }

    /// Selected expert indices and scores per routing group.
    #[pyo3(signature = (x, task_id=None))]
    fn selection(
        &self,
        x: &PyMatrix,
        task_id: Option<usize>,
    ) -> PyResult<(Vec<Vec<usize>>, Vec<Vec<f64>>)> {
        let trace = gating::route(
            &x.inner,
            self.inner.level,
            task_id,
            &self.inner.gate,
            self.inner.m,
            self.inner.renormalize,
        )
        .map_err(to_py_err)?;
        Ok((trace.decision.indices, trace.decision.scores))
    }
}

/// Parameter merging: sum expert weights under gate scores, run once.
#[pyclass(name = "MeoLayer")]
struct PyMeoLayer {
    inner: MeoLayer,
    token_level: bool,
    task_level: bool,
}

#[pymethods]
impl PyMeoLayer {
    #[new]
    #[pyo3(signature = (bank, level, m, renormalize, gate_seed, num_tasks=None))]
    fn new(
        bank: &PyExpertBank,
        level: &str,
        m: usize,
        renormalize: bool,
        gate_seed: u64,
        num_tasks: Option<usize>,
    ) -> PyResult<Self> {
        let level = parse_level(level)?;
        if level == GateLevel::Token {
            return Err(PyValueError::new_err(
                "token-level merging needs a mixer block; use MeoLayer.token_level",
            ));
        }
        let gate =
            build_gate(bank.inner.d_in(), bank.inner.n_experts(), level, gate_seed, num_tasks)?;
        MeoLayer::new(bank.inner.clone(), gate, level, m, renormalize)
            .map(|inner| Self { inner, token_level: false, task_level: level == GateLevel::Task })
            .map_err(to_py_err)
    }

    /// Token-level variant: mixes tokens through a residual bottleneck of
    /// reduction r, then routes the whole sequence once.
    #[staticmethod]
    fn token_level(
        bank: &PyExpertBank,
        m: usize,
        renormalize: bool,
        gate_seed: u64,
        r: usize,
        block_seed: u64,
    ) -> PyResult<Self> {
        let gate = GateParams::init(bank.inner.d_in(), bank.inner.n_experts(), gate_seed)
            .map_err(to_py_err)?;
        MeoLayer::new_token_level(bank.inner.clone(), gate, m, renormalize, r, block_seed)
            .map(|inner| Self { inner, token_level: true, task_level: false })
            .map_err(to_py_err)
    }

    #[pyo3(signature = (x, task_id=None))]
    fn forward(&self, x: &PyMatrix, task_id: Option<usize>) -> PyResult<PyMatrix> {
        if self.task_level && task_id.is_none() {
            return Err(PyValueError::new_err("task-level routing needs task_id"));
        }
        let y = if self.token_level {
            self.inner.token_level_forward(&x.inner).map_err(to_py_err)?.0
        } else {
            self.inner.forward(&x.inner, task_id).map_err(to_py_err)?.0
        };
        Ok(PyMatrix { inner: y })
    }
}

/// Score-weighted sum of the chosen experts' parameters.
/// Returns (merged_weight, merged_bias).
#[pyfunction]
fn merge_experts(
    bank: &PyExpertBank,
    indices: Vec<usize>,
    scores: Vec<f64>,
) -> PyResult<(PyMatrix, Vec<f64>)> {
    let merged = meo::merge_experts(&bank.inner, &indices, &scores).map_err(to_py_err)?;
    Ok((PyMatrix { inner: merged.w_hat }, merged.b_hat))
}

/// Exact forward FLOPs decomposition for a transformer-shaped model.
#[pyfunction]
#[pyo3(signature = (layers, d_model, d_ff, seq_len, vocab, n_experts, m_selected, level, variant, r=64))]
#[allow(clippy::too_many_arguments)]
fn total_flops<'py>(
    py: Python<'py>,
    layers: u64,
    d_model: u64,
    d_ff: u64,
    seq_len: u64,
    vocab: u64,
    n_experts: u64,
    m_selected: u64,
    level: &str,
    variant: &str,
    r: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let profile = ModelProfile {
        layers,
        d_model,
        d_ff,
        seq_len,
        vocab,
        n_experts,
        m_selected,
        level: parse_level(level)?,
        variant: parse_variant(variant)?,
        r,
    };
    let c = cost::total_flops(&profile).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("backbone_flops", c.backbone_flops)?;
    out.set_item("expert_forward_flops", c.expert_forward_flops)?;
    out.set_item("gating_flops", c.gating_flops)?;
    out.set_item("merging_flops", c.merging_flops)?;
    out.set_item("mixing_flops", c.mixing_flops)?;
    out.set_item("bottleneck_flops", c.bottleneck_flops)?;
    out.set_item("total_flops", c.total_flops)?;
    Ok(out)
}

/// Largest entrywise gap between the merged forward and output mixing with
/// the activation applied outside, on one shared routing decision.
#[pyfunction]
#[pyo3(signature = (bank, x, level, m, renormalize, gate_seed, task_id=None, num_tasks=None))]
#[allow(clippy::too_many_arguments)]
fn merged_vs_mixed_gap(
    bank: &PyExpertBank,
    x: &PyMatrix,
    level: &str,
    m: usize,
    renormalize: bool,
    gate_seed: u64,
    task_id: Option<usize>,
    num_tasks: Option<usize>,
) -> PyResult<f64> {
    let level = parse_level(level)?;
    let gate = build_gate(bank.inner.d_in(), bank.inner.n_experts(), level, gate_seed, num_tasks)?;
    let trace =
        gating::route(&x.inner, level, task_id, &gate, m, renormalize).map_err(to_py_err)?;
    let report = oracle::equivalence_gap(
        &x.inner,
        &bank.inner,
        &trace.decision,
        ActivationPlacement::OutsideExperts,
    )
    .map_err(to_py_err)?;
    Ok(report.max_abs_gap)
}

/// Parses a JSON run config, executes its mode, and returns a dict with
/// `report`, `csv`, `ok`, and `failure`.
#[pyfunction]
fn run<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = parse_config_str(config_json).map_err(to_py_err)?;
    let output = runner::execute(&cfg).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("report", output.report)?;
    out.set_item("csv", output.csv)?;
    out.set_item("ok", output.ok)?;
    out.set_item("failure", output.failure)?;
    Ok(out)
}

#[pymodule]
fn meo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMatrix>()?;
    m.add_class::<PyExpertBank>()?;
    m.add_class::<PyMoeLayer>()?;
    m.add_class::<PyMeoLayer>()?;
    m.add_function(wrap_pyfunction!(merge_experts, m)?)?;
    m.add_function(wrap_pyfunction!(total_flops, m)?)?;
    m.add_function(wrap_pyfunction!(merged_vs_mixed_gap, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
