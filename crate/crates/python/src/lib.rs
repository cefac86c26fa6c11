//! Python module `randop`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

use randop::bounds::{self, BoundInputs};
use randop::dominance::{self, ChainKind, DominanceParams};
use randop::empirical::{self, IteratedProblem, OperatorKind};
use randop::exact::{self, SolveKind};
use randop::harness::{self, ExperimentConfig, SgdSpec};
use randop::mdp::{FiniteMdp, QFunction, ValueFunction};
use randop::models;
use randop::stream::SampleBatch;

fn err(e: randop::error::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn parse<T: std::str::FromStr<Err = randop::error::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Finite MDP with cost `c[s][a]`, kernel `P[s][a][j]` and an optional discount.
#[pyclass(name = "Mdp", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMdp(FiniteMdp);

#[pymethods]
impl PyMdp {
    #[new]
    #[pyo3(signature = (cost, kernel, discount=None))]
    fn new(cost: Vec<Vec<f64>>, kernel: Vec<Vec<Vec<f64>>>, discount: Option<f64>) -> PyResult<Self> {
        FiniteMdp::new(cost, kernel, discount).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(json: &str) -> PyResult<Self> {
        FiniteMdp::from_json_str(json).map(Self).map_err(err)
    }

    /// One of the built-in models: single, chain2, chain2-two-action, uniform2, skew2, garnet3.
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        models::by_name(name)
            .map(Self)
            .ok_or_else(|| PyValueError::new_err(format!("unknown model `{name}`")))
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[pyo3(signature = (discount=None))]
    fn with_discount(&self, discount: Option<f64>) -> PyResult<Self> {
        self.0.with_discount(discount).map(Self).map_err(err)
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.0.num_states()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.0.num_actions()
    }

    #[getter]
    fn discount(&self) -> Option<f64> {
        self.0.discount()
    }

    fn next_state(&self, s: usize, a: usize, u: f64) -> PyResult<usize> {
        self.0.next_state(s, a, u).map_err(err)
    }

    fn unichain_coefficient(&self) -> f64 {
        self.0.kernel().unichain_coefficient()
    }

    fn __repr__(&self) -> String {
        let discount = self.0.discount().map_or("None".to_string(), |g| g.to_string());
        format!(
            "Mdp(states={}, actions={}, discount={discount})",
            self.0.num_states(),
            self.0.num_actions()
        )
    }
}

fn value(v: Vec<f64>) -> PyResult<ValueFunction> {
    ValueFunction::new(v).map_err(err)
}

fn q_function(mdp: &FiniteMdp, q: Vec<f64>) -> PyResult<QFunction> {
    QFunction::new(mdp.num_states(), mdp.num_actions(), q).map_err(err)
}

fn batch(draws: Vec<f64>) -> PyResult<SampleBatch> {
    SampleBatch::new(draws).map_err(err)
}

/// Exact fixed point; `kind` is discounted-v, average-v or discounted-q.
#[pyfunction]
#[pyo3(signature = (mdp, kind="discounted-v", tol=exact::DEFAULT_TOL, max_iter=exact::DEFAULT_MAX_ITER))]
fn solve_exact<'py>(
    py: Python<'py>,
    mdp: &PyMdp,
    kind: &str,
    tol: f64,
    max_iter: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let kind: SolveKind = parse(kind)?;
    let res = py.detach(|| exact::solve_fixed_point(&mdp.0, kind, tol, max_iter)).map_err(err)?;
    to_py(py, &res)
}

#[pyfunction]
fn bellman(mdp: &PyMdp, v: Vec<f64>) -> PyResult<Vec<f64>> {
    exact::bellman_discounted(&mdp.0, &value(v)?).map(|v| v.into_inner()).map_err(err)
}

/// Returns `(normalized value, gain)`.
#[pyfunction]
fn relative_bellman(mdp: &PyMdp, v: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
    let (out, g) = exact::relative_bellman(&mdp.0, &value(v)?).map_err(err)?;
    Ok((out.into_inner(), g))
}

/// `q` is flat, state-major.
#[pyfunction]
fn q_bellman(mdp: &PyMdp, q: Vec<f64>) -> PyResult<Vec<f64>> {
    let q = q_function(&mdp.0, q)?;
    Ok(exact::q_bellman(&mdp.0, &q).map_err(err)?.as_slice().to_vec())
}

#[pyfunction]
fn empirical_bellman(mdp: &PyMdp, v: Vec<f64>, draws: Vec<f64>) -> PyResult<Vec<f64>> {
    empirical::empirical_bellman(&mdp.0, &value(v)?, &batch(draws)?)
        .map(|v| v.into_inner())
        .map_err(err)
}

#[pyfunction]
fn empirical_relative_bellman(mdp: &PyMdp, v: Vec<f64>, draws: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
    let (out, g) = empirical::empirical_relative_bellman(&mdp.0, &value(v)?, &batch(draws)?).map_err(err)?;
    Ok((out.into_inner(), g))
}

#[pyfunction]
fn empirical_q(mdp: &PyMdp, q: Vec<f64>, draws: Vec<f64>) -> PyResult<Vec<f64>> {
    let q = q_function(&mdp.0, q)?;
    Ok(empirical::empirical_q(&mdp.0, &q, &batch(draws)?).map_err(err)?.as_slice().to_vec())
}

/// Span contraction coefficient of the empirical kernel built from `draws`.
#[pyfunction]
fn empirical_span_coefficient(mdp: &PyMdp, draws: Vec<f64>) -> PyResult<f64> {
    Ok(empirical::EmpiricalKernel::from_batch(&mdp.0, &batch(draws)?).span_coefficient())
}

/// Runs `replicas` trajectories of the sampled operator `kind`
/// (evi, ervi, eqvi); returns the error paths, one list per replica.
#[pyfunction]
#[pyo3(signature = (mdp, kind, n, iterations, replicas=1, seed=0))]
fn run_iterated(
    py: Python<'_>,
    mdp: &PyMdp,
    kind: &str,
    n: usize,
    iterations: usize,
    replicas: usize,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let problem = IteratedProblem::prepare(parse(kind)?, &mdp.0).map_err(err)?;
    let runs = py
        .detach(|| harness::run_replicas(&problem, n, iterations, replicas, seed))
        .map_err(err)?;
    Ok(runs.into_iter().map(|t| t.errors).collect())
}

/// Gradient iteration on `(x - target)^2 / 2` with uniform noise; returns
/// the distance paths.
#[pyfunction]
#[pyo3(signature = (target, step_size, n, iterations, replicas=1, seed=0, initial=None))]
#[allow(clippy::too_many_arguments)]
fn run_sgd(
    py: Python<'_>,
    target: Vec<f64>,
    step_size: f64,
    n: usize,
    iterations: usize,
    replicas: usize,
    seed: u64,
    initial: Option<Vec<f64>>,
) -> PyResult<Vec<Vec<f64>>> {
    let problem = SgdSpec {
        target_mean: target,
        step_size,
        initial,
    }
    .build()
    .map_err(err)?;
    let runs = py
        .detach(|| harness::run_replicas(&problem, n, iterations, replicas, seed))
        .map_err(err)?;
    Ok(runs.into_iter().map(|t| t.errors).collect())
}

/// Runs a tail experiment from a JSON config; returns the summary as a dict.
/// Nothing is written to disk unless the config names an output path or
/// `RANDOP_OUTPUT_DIR` is set.
#[pyfunction]
fn estimate_tail<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyAny>> {
    let config = ExperimentConfig::from_json_str(config).map_err(err)?;
    let report = py.detach(|| harness::estimate_tail(&config)).map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (mdp, n, k, replicas, epsilon, delta, kind="evi", seed=0, grid=20))]
#[allow(clippy::too_many_arguments)]
fn dominance_experiment<'py>(
    py: Python<'py>,
    mdp: &PyMdp,
    n: usize,
    k: usize,
    replicas: usize,
    epsilon: f64,
    delta: f64,
    kind: &str,
    seed: u64,
    grid: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let problem = IteratedProblem::prepare(parse::<OperatorKind>(kind)?, &mdp.0).map_err(err)?;
    let exp = py
        .detach(|| harness::dominance_experiment(&problem, n, k, replicas, seed, epsilon, delta, grid))
        .map_err(err)?;
    to_py(py, &exp)
}

/// Closed-form stationary law of the `Q` chain; returns
/// `(states, masses, truncated tail mass)`.
#[pyfunction]
#[pyo3(signature = (p, w, tail_cap=1e-12))]
fn stationary_q(p: f64, w: u64, tail_cap: f64) -> PyResult<(Vec<u64>, Vec<f64>, f64)> {
    let d = dominance::stationary_q_closed_form(p, w, tail_cap).map_err(err)?;
    Ok((d.support, d.mass, d.truncation_tail))
}

/// Stationary law of the truncated chain `chain` (P, Q or Y) on `n` states.
#[pyfunction]
#[pyo3(signature = (chain, p, w, n, eta=0, tol=1e-12))]
fn stationary_numeric(chain: &str, p: f64, w: u64, n: usize, eta: u64, tol: f64) -> PyResult<(Vec<u64>, Vec<f64>)> {
    let kind: ChainKind = parse(chain)?;
    let params = DominanceParams::new(p, w, eta).map_err(err)?;
    let d = dominance::stationary_numeric(kind, &params, n, tol).map_err(err)?;
    Ok((d.support, d.mass))
}

/// Coupled `P` and `Q` paths from state 0 driven by the same uniforms.
#[pyfunction]
fn coupled_paths(p: f64, w: u64, length: usize, seed: u64) -> (Vec<u64>, Vec<u64>) {
    dominance::coupled_pq_paths(p, w, length, seed)
}

/// Exact law of `Y_k` from `y0`; returns `(states, masses)`.
#[pyfunction]
fn y_marginal(p: f64, w: u64, eta: u64, y0: u64, k: usize) -> PyResult<(Vec<u64>, Vec<f64>)> {
    let params = DominanceParams::new(p, w, eta).map_err(err)?;
    let d = dominance::y_marginal(&params, y0, k).map_err(err)?;
    Ok((d.support, d.mass))
}

/// `(1 - p^w) / p^w`.
#[pyfunction]
fn tail_bound(p: f64, w: u64) -> PyResult<f64> {
    bounds::tail_bound(p, w).map_err(err)
}

/// `(w/(w+1), 2w/(2w+1))`.
#[pyfunction]
fn thresholds(w: u64) -> (f64, f64) {
    bounds::thresholds(w)
}

/// Hoeffding certificate for discounted value iteration; returns a dict
/// with `gamma1`, `gamma2`, `p`, `w`, `bound` and `valid`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn discounted_certificate<'py>(
    py: Python<'py>,
    kappa: f64,
    epsilon: f64,
    delta: f64,
    discount: f64,
    num_states: usize,
    num_actions: usize,
    cost_sup: f64,
    n: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let inputs = BoundInputs {
        kappa,
        epsilon,
        delta,
        alpha: discount,
        wbar: bounds::wbar_value(discount, cost_sup),
        num_states,
        num_actions,
        cost_sup,
        n,
    };
    let report = bounds::discounted_certificate(&inputs).map_err(err)?;
    to_py(py, &report)
}

/// Smallest `n` meeting the confidence target; returns `(n, w)`.
#[pyfunction]
fn sample_complexity(
    kappa: f64,
    confidence: f64,
    num_states: usize,
    num_actions: usize,
    discount: f64,
    cost_sup: f64,
) -> PyResult<(u64, u64)> {
    let sc = bounds::sample_complexity_discounted(kappa, confidence, num_states, num_actions, discount, cost_sup)
        .map_err(err)?;
    Ok((sc.n, sc.w))
}

#[pymodule]
#[pyo3(name = "randop")]
fn randop_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMdp>()?;
    m.add_function(wrap_pyfunction!(solve_exact, m)?)?;
    m.add_function(wrap_pyfunction!(bellman, m)?)?;
    m.add_function(wrap_pyfunction!(relative_bellman, m)?)?;
    m.add_function(wrap_pyfunction!(q_bellman, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_bellman, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_relative_bellman, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_q, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_span_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(run_iterated, m)?)?;
    m.add_function(wrap_pyfunction!(run_sgd, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_tail, m)?)?;
    m.add_function(wrap_pyfunction!(dominance_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(stationary_q, m)?)?;
    m.add_function(wrap_pyfunction!(stationary_numeric, m)?)?;
    m.add_function(wrap_pyfunction!(coupled_paths, m)?)?;
    m.add_function(wrap_pyfunction!(y_marginal, m)?)?;
    m.add_function(wrap_pyfunction!(tail_bound, m)?)?;
    m.add_function(wrap_pyfunction!(thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(discounted_certificate, m)?)?;
    m.add_function(wrap_pyfunction!(sample_complexity, m)?)?;
    Ok(())
}
