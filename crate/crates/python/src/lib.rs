//! Python bindings. Matrices cross the boundary as nested lists of floats.

use loda_core::runner::{self, ExperimentConfig};
use loda_core::{subspace, LodaError, SecondMoment};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

type Matrix = Vec<Vec<f64>>;

fn to_py(e: LodaError) -> PyErr {
    match e {
        LodaError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_array(m: &Matrix) -> PyResult<Array2<f64>> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    if m.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix: rows differ in length"));
    }
    Array2::from_shape_vec((rows, cols), m.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_array(a: &Array2<f64>) -> Matrix {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn moment(gram: &Matrix) -> PyResult<SecondMoment> {
    // the row count does not enter any of the exposed computations
    SecondMoment::from_gram(to_array(gram)?, 0).map_err(to_py)
}

/// Uncentered second moment `XᵀX` of a sample matrix.
#[pyfunction]
fn second_moment(x: Matrix) -> PyResult<Matrix> {
    let s = SecondMoment::from_features(to_array(&x)?.view()).map_err(to_py)?;
    Ok(from_array(&s.gram().to_owned()))
}

/// Top-`rank` eigenvectors of `s_past + s_new`, as a D×r matrix.
#[pyfunction]
fn general_bases(s_past: Matrix, s_new: Matrix, rank: usize) -> PyResult<Matrix> {
    let b = subspace::general_bases(&moment(&s_past)?, &moment(&s_new)?, rank).map_err(to_py)?;
    Ok(from_array(&b.basis))
}

/// Generalized eigenvectors maximizing new-over-past energy, as a D×r
/// matrix, together with their eigenvalues.
#[pyfunction]
#[pyo3(signature = (s_past, s_new, rank, jitter=None))]
fn isolated_bases(s_past: Matrix, s_new: Matrix, rank: usize, jitter: Option<f64>) -> PyResult<(Matrix, Vec<f64>)> {
    let past = moment(&s_past)?;
    let jitter = jitter.unwrap_or_else(|| subspace::default_jitter(&past));
    let b = subspace::isolated_bases(&past, &moment(&s_new)?, rank, jitter).map_err(to_py)?;
    Ok((from_array(&b.basis), b.spectrum))
}

/// Bottom-`rank` eigenvectors of `s_past`.
#[pyfunction]
fn null_space_baseline(s_past: Matrix, rank: usize) -> PyResult<Matrix> {
    let b = subspace::null_space_baseline(&moment(&s_past)?, rank).map_err(to_py)?;
    Ok(from_array(&b.basis))
}

/// Relative projection energy of the D×r basis `u`.
#[pyfunction]
fn relative_energy(s_new: Matrix, s_past: Matrix, u: Matrix) -> PyResult<f64> {
    subspace::relative_energy(&moment(&s_new)?, &moment(&s_past)?, to_array(&u)?.view()).map_err(to_py)
}

/// Per-unit rescaling factors for the r×D general down-projection.
#[pyfunction]
#[pyo3(signature = (down, s_new, s_past, lam=3.0))]
fn rescale_factors(down: Matrix, s_new: Matrix, s_past: Matrix, lam: f64) -> PyResult<Vec<f64>> {
    let res = loda_core::recalib::rescale_factors(to_array(&down)?.view(), &moment(&s_new)?, &moment(&s_past)?, lam)
        .map_err(to_py)?;
    Ok(res.gammas)
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    runner::PRESETS.to_vec()
}

/// Runs an experiment and returns the report as a JSON string. `config` is
/// TOML text; an empty string means defaults.
#[pyfunction]
#[pyo3(signature = (config="", seed=0, preset=None, output_dir=None))]
fn run_experiment(
    py: Python<'_>,
    config: &str,
    seed: u64,
    preset: Option<&str>,
    output_dir: Option<std::path::PathBuf>,
) -> PyResult<String> {
    let mut cfg = if config.trim().is_empty() {
        ExperimentConfig::default()
    } else {
        ExperimentConfig::from_toml(config).map_err(to_py)?
    };
    if let Some(p) = preset {
        cfg = cfg.with_preset(p).map_err(to_py)?;
    }
    cfg.seed = seed;
    cfg.validate().map_err(to_py)?;
    let report = py.detach(|| runner::run_experiment(&cfg)).map_err(to_py)?;
    if let Some(dir) = output_dir {
        runner::emit_report(&report, &dir).map_err(to_py)?;
    }
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn loda(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(second_moment, m)?)?;
    m.add_function(wrap_pyfunction!(general_bases, m)?)?;
    m.add_function(wrap_pyfunction!(isolated_bases, m)?)?;
    m.add_function(wrap_pyfunction!(null_space_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(relative_energy, m)?)?;
    m.add_function(wrap_pyfunction!(rescale_factors, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
