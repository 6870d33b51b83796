//! Python bindings for the core evaluators and simulators.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use betamix::concentration::{self, BoundParams, Moments};
use betamix::mixing::{self, FiniteChain, FiniteJointDistribution};
use betamix::process::{self, ContractiveChainSpec, Innovation, LipschitzMap};
use betamix::regression::{self, Kernel};

fn err(e: betamix::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn joint(table: Vec<Vec<f64>>) -> PyResult<FiniteJointDistribution> {
    FiniteJointDistribution::from_rows(&table).map_err(err)
}

/// Exact beta coefficient of a finite joint table.
#[pyfunction]
fn beta_exact(table: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(mixing::beta_exact(&joint(table)?))
}

/// Exact alpha coefficient of a finite joint table (alphabets up to 12).
#[pyfunction]
fn alpha_exact(table: Vec<Vec<f64>>) -> PyResult<f64> {
    mixing::alpha_exact(&joint(table)?).map_err(err)
}

/// Beta coefficient at lag `n` of the stationary chain with this transition matrix.
#[pyfunction]
fn markov_beta_lag(transition: Vec<Vec<f64>>, n: usize) -> PyResult<f64> {
    let chain = FiniteChain::new(&transition).map_err(err)?;
    mixing::markov_beta_lag(&chain, n).map_err(err)
}

/// `(kappa0, kappa1, r_squared)` of `beta(n) ~ kappa0 exp(-kappa1 n)`.
#[pyfunction]
fn fit_geometric_decay(lags: Vec<usize>, betas: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let fit = mixing::fit_geometric_decay(&lags, &betas).map_err(err)?;
    Ok((fit.kappa0, fit.kappa1, fit.r_squared))
}

/// Path of `X_{k+1} = map(X_k) + eps_k` after burn-in.
#[pyfunction]
#[pyo3(signature = (n, seed, map="linear", a=0.5, b=0.0, innovation="uniform", scale=1.0, bound=2.0))]
#[allow(clippy::too_many_arguments)]
fn simulate_contractive_chain(
    n: usize,
    seed: u64,
    map: &str,
    a: f64,
    b: f64,
    innovation: &str,
    scale: f64,
    bound: f64,
) -> PyResult<Vec<f64>> {
    let spec = ContractiveChainSpec::new(
        LipschitzMap::from_name(map, a, b).map_err(err)?,
        Innovation::from_name(innovation, scale, bound).map_err(err)?,
    );
    process::simulate_contractive_chain(&spec, n, seed).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (kappa0, kappa1, c, gamma, a, b))]
fn laplace_bound(kappa0: f64, kappa1: f64, c: f64, gamma: f64, a: f64, b: f64) -> PyResult<f64> {
    let p = BoundParams {
        kappa0,
        kappa1,
        c,
        gamma,
        a,
        b,
        ..BoundParams::default()
    };
    concentration::laplace_bound(&p).map_err(err)
}

#[pyfunction]
fn max_admissible_gamma(kappa1: f64, b: f64, a: f64) -> f64 {
    concentration::max_admissible_gamma(kappa1, b, a)
}

#[pyfunction]
fn corollary_bound(a1: f64, a2: f64, b: f64, epsilon: f64, n: u64) -> PyResult<f64> {
    let p = BoundParams {
        a1,
        a2,
        b,
        epsilon,
        n,
        ..BoundParams::default()
    };
    concentration::corollary_bound(&p).map_err(err)
}

/// `(value, argmin_B)` of the unbounded-function bound.
#[pyfunction]
#[pyo3(signature = (a1, a2, epsilon, n, m_pr, m_k, p=1.5, q=3.0, r=2.0, u=2.0, k=3.0))]
#[allow(clippy::too_many_arguments)]
fn unbounded_bound(
    a1: f64,
    a2: f64,
    epsilon: f64,
    n: u64,
    m_pr: f64,
    m_k: f64,
    p: f64,
    q: f64,
    r: f64,
    u: f64,
    k: f64,
) -> PyResult<(f64, f64)> {
    let params = BoundParams {
        a1,
        a2,
        epsilon,
        n,
        p,
        q,
        r,
        u,
        k,
        ..BoundParams::default()
    };
    let out = concentration::unbounded_bound(&params, &Moments { m_pr, m_k }).map_err(err)?;
    Ok((out.value, out.argmin_b))
}

/// `(plus, zero, minus)` with `plus + zero + minus == value` exactly.
#[pyfunction]
fn truncate(value: f64, b: f64) -> PyResult<(f64, f64, f64)> {
    if b.is_nan() || b <= 0.0 || !value.is_finite() {
        return Err(PyValueError::new_err("need finite value and B > 0"));
    }
    let t = concentration::truncate(value, b);
    Ok((t.plus, t.zero, t.minus))
}

#[pyfunction]
fn hilbert_norm(curve: Vec<f64>, grid: Vec<f64>) -> PyResult<f64> {
    regression::hilbert_norm(&curve, &grid).map_err(err)
}

/// Kernel regression estimate from precomputed distances; `None` when no
/// distance falls inside the bandwidth.
#[pyfunction]
#[pyo3(signature = (distances, responses, h, kernel="downslope-linear", small_ball=1.0))]
fn nadaraya_watson(
    distances: Vec<f64>,
    responses: Vec<f64>,
    h: f64,
    kernel: &str,
    small_ball: f64,
) -> PyResult<Option<f64>> {
    let kernel = Kernel::from_name(kernel).map_err(err)?;
    let est =
        regression::nadaraya_watson_from_distances(kernel, &distances, &responses, h, small_ball)
            .map_err(err)?;
    Ok(est.defined().map(|e| e.psi_hat))
}

/// `M = K(1) - int_0^1 K'(s) tau(s) ds` for a Python callable `tau`.
#[pyfunction]
#[pyo3(signature = (tau, kernel="downslope-linear"))]
fn m_constant(tau: Bound<'_, PyAny>, kernel: &str) -> PyResult<f64> {
    let kernel = Kernel::from_name(kernel).map_err(err)?;
    let failure = std::cell::RefCell::new(None);
    let m = regression::m_constant(kernel, |s| {
        match tau.call1((s,)).and_then(|v| v.extract::<f64>()) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        }
    });
    match failure.into_inner() {
        Some(e) => Err(e),
        None => m.map_err(err),
    }
}

#[pymodule]
fn betamix_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(beta_exact, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_exact, m)?)?;
    m.add_function(wrap_pyfunction!(markov_beta_lag, m)?)?;
    m.add_function(wrap_pyfunction!(fit_geometric_decay, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_contractive_chain, m)?)?;
    m.add_function(wrap_pyfunction!(laplace_bound, m)?)?;
    m.add_function(wrap_pyfunction!(max_admissible_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(corollary_bound, m)?)?;
    m.add_function(wrap_pyfunction!(unbounded_bound, m)?)?;
    m.add_function(wrap_pyfunction!(truncate, m)?)?;
    m.add_function(wrap_pyfunction!(hilbert_norm, m)?)?;
    m.add_function(wrap_pyfunction!(nadaraya_watson, m)?)?;
    m.add_function(wrap_pyfunction!(m_constant, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
