//! Python bindings for the slowbond toolkit.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use slowbond::error::Error;
use slowbond::harness::suites::{run_suite as run_suite_core, SuiteRequest};
use slowbond::heat_kernel::{Generator, SpectralKernel};
use slowbond::model::{Convention, DerivedConstants, ModelParams, RawParams};
use slowbond::rng::replica_rng;
use slowbond::simulator::{init_config, run, InitKind, SimOptions};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidParams(_)
        | Error::InvalidConfig(_)
        | Error::UnknownSuite(_)
        | Error::Config(_)
        | Error::Normalization(_)
        | Error::Cfl { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn params(n: u32, beta_star: f64, slow_bonds: Vec<i64>, window: usize) -> PyResult<ModelParams> {
    let mut raw = RawParams::new(n, beta_star, slow_bonds, window);
    raw.strict_mode = false;
    ModelParams::validate(&raw).map_err(to_py)
}

fn parse_init(name: &str) -> PyResult<InitKind> {
    match name {
        "narrow_wedge" => Ok(InitKind::NarrowWedge),
        "bernoulli_half" => Ok(InitKind::BernoulliHalf),
        other => Err(PyValueError::new_err(format!("unknown initial data {other:?}"))),
    }
}

/// Derived constants `lambda`, `nu` and `c_n` for the given model.
#[pyfunction]
#[pyo3(signature = (n, beta_star, slow_bonds=vec![0], window=65))]
fn constants<'py>(
    py: Python<'py>,
    n: u32,
    beta_star: f64,
    slow_bonds: Vec<i64>,
    window: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let c = DerivedConstants::new(&params(n, beta_star, slow_bonds, window)?);
    let d = PyDict::new(py);
    d.set_item("lambda", c.lambda)?;
    d.set_item("nu", c.nu)?;
    d.set_item("c_n", c.c_n)?;
    d.set_item("sqrt_pq", c.sqrt_pq)?;
    Ok(d)
}

/// Row `x` (a site label) of the slow-bond heat kernel at time `t`.
#[pyfunction]
#[pyo3(signature = (n, beta_star, t, x=0, slow_bonds=vec![0], window=65))]
fn kernel_row(n: u32, beta_star: f64, t: f64, x: i64, slow_bonds: Vec<i64>, window: usize) -> PyResult<Vec<f64>> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(PyValueError::new_err("t must be finite and non-negative"));
    }
    let p = params(n, beta_star, slow_bonds, window)?;
    let ring = p.ring();
    if !ring.contains_label(x) {
        return Err(PyValueError::new_err(format!("label {x} outside the window")));
    }
    let gen = Generator::new(&DerivedConstants::new(&p), Convention::ExactDiffusivity);
    Ok(SpectralKernel::new(&gen).row(t, ring.index(x)))
}

/// One replica of the particle system; returns snapshot times, spins and
/// flux through the origin bond.
#[pyfunction]
#[pyo3(signature = (n, beta_star, t_final, snapshot_dt, window, seed, slow_bonds=vec![0], init="narrow_wedge"))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    n: u32,
    beta_star: f64,
    t_final: f64,
    snapshot_dt: f64,
    window: usize,
    seed: u64,
    slow_bonds: Vec<i64>,
    init: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let p = params(n, beta_star, slow_bonds, window)?;
    let kind = parse_init(init)?;
    let mut rng = replica_rng(seed, 0);
    let c = init_config(&kind, window, &mut rng).map_err(to_py)?;
    let opts = SimOptions {
        record_log: false,
        ..Default::default()
    };
    let (traj, _) = run(&c, &p, t_final, snapshot_dt, &mut rng, &opts).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("times", traj.times)?;
    d.set_item("spins", traj.spins)?;
    d.set_item("flux", traj.flux)?;
    Ok(d)
}

/// Run a verification suite; returns `(passed, rows)` with one dict per
/// statistic row.
#[pyfunction]
#[pyo3(signature = (name, seed=0, n=None, beta_star=None, window=None, replicas=None))]
fn run_suite<'py>(
    py: Python<'py>,
    name: &str,
    seed: u64,
    n: Option<u32>,
    beta_star: Option<f64>,
    window: Option<usize>,
    replicas: Option<usize>,
) -> PyResult<(bool, Vec<Bound<'py, PyDict>>)> {
    let mut req = SuiteRequest::new(seed);
    req.n = n;
    req.beta_star = beta_star;
    req.window = window;
    req.replicas = replicas;
    let out = py.detach(|| run_suite_core(name, &req)).map_err(to_py)?;
    let rows = out
        .stats
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", &r.name)?;
            d.set_item("N", r.n)?;
            d.set_item("beta_star", r.beta_star)?;
            d.set_item("value", r.value)?;
            d.set_item("stderr", r.stderr)?;
            d.set_item("bound", r.bound)?;
            d.set_item("pass", r.pass)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((out.pass(), rows))
}

#[pymodule]
fn slowbond_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(constants, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_row, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    Ok(())
}
