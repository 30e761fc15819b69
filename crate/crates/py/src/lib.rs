//! Python bindings: source-sink simulation, sparse identification, LSTM
//! training and forecasting, and percent-error metrics.
//!
//! Matrices cross the boundary as lists of rows.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use leocap_core::lstm::{self, LstmConfig};
use leocap_core::popdata::{self, ShellGrid, SpeciesVector};
use leocap_core::{metrics, sindy, ssem, Error};

fn py_err(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 {
        return Err(PyValueError::new_err("expected a non-empty list of rows"));
    }
    if let Some(k) = rows.iter().position(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!("row {k} has {} values, expected {width}", rows[k].len())));
    }
    Ok(DMatrix::from_fn(rows.len(), width, |r, c| rows[r][c]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Source-sink model parameters.
#[pyclass(name = "SsemParams", module = "leocap", skip_from_py_object)]
#[derive(Clone)]
struct PySsemParams {
    inner: ssem::SsemParams,
    initial: Option<SpeciesVector>,
}

#[pymethods]
impl PySsemParams {
    /// Bundled 36-shell defaults.
    #[staticmethod]
    fn default() -> Self {
        PySsemParams {
            inner: ssem::SsemParams::default_leo(),
            initial: Some(ssem::default_initial_state()),
        }
    }

    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        let pf = ssem::load_params(path).map_err(py_err)?;
        Ok(PySsemParams {
            inner: pf.params,
            initial: pf.initial,
        })
    }

    /// Copy with collisions and drag removed.
    fn without_interactions(&self) -> Self {
        PySsemParams {
            inner: self.inner.clone().without_interactions(),
            initial: self.initial.clone(),
        }
    }

    #[getter]
    fn n_shells(&self) -> usize {
        self.inner.grid.n_shells()
    }

    #[getter]
    fn tof(&self) -> f64 {
        self.inner.tof
    }

    #[getter]
    fn launch_rates(&self) -> Vec<f64> {
        self.inner.lambda.clone()
    }

    fn to_text(&self) -> String {
        ssem::format_params(&self.inner, self.initial.as_ref())
    }
}

/// Population per time sample: rows of `S_1..S_n, D_1..D_n, N_1..N_n`.
#[pyclass(name = "PopulationSeries", module = "leocap", from_py_object)]
#[derive(Clone)]
struct PySeries {
    inner: popdata::PopulationSeries,
}

#[pymethods]
impl PySeries {
    #[new]
    #[pyo3(signature = (times, rows, n_shells=1, label="series"))]
    fn new(times: Vec<f64>, rows: Vec<Vec<f64>>, n_shells: usize, label: &str) -> PyResult<Self> {
        let grid = if n_shells == 1 {
            ShellGrid::leo().collapsed()
        } else {
            ShellGrid::new(n_shells, ShellGrid::leo().base_altitude(), ShellGrid::leo().shell_width()).map_err(py_err)?
        };
        let m = to_matrix(&rows)?;
        let inner = popdata::PopulationSeries::from_matrix(times, &m, grid, label).map_err(py_err)?;
        Ok(PySeries { inner })
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times().to_vec()
    }

    #[getter]
    fn n_shells(&self) -> usize {
        self.inner.grid().n_shells()
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.label().to_string()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.to_matrix())
    }

    /// Column names in row order, e.g. `S_1`.
    fn columns(&self) -> Vec<String> {
        sindy::series_var_names(self.inner.grid())
    }

    /// Sum over shells.
    fn totals(&self) -> Self {
        PySeries {
            inner: popdata::totals(&self.inner),
        }
    }

    fn slice(&self, start: usize, end: usize) -> PyResult<Self> {
        Ok(PySeries {
            inner: self.inner.slice(start, end).map_err(py_err)?,
        })
    }

    /// Writes this series as a one-member ensemble CSV.
    fn save(&self, path: &str) -> PyResult<()> {
        popdata::save_ensemble(path, std::slice::from_ref(&self.inner)).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "PopulationSeries(label={:?}, samples={}, shells={})",
            self.inner.label(),
            self.inner.len(),
            self.inner.grid().n_shells()
        )
    }
}

/// Every member of an ensemble CSV.
#[pyfunction]
#[pyo3(signature = (path, n_shells=36))]
fn load_ensemble(path: &str, n_shells: usize) -> PyResult<Vec<PySeries>> {
    let leo = ShellGrid::leo();
    let grid = ShellGrid::new(n_shells, leo.base_altitude(), leo.shell_width()).map_err(py_err)?;
    let members = popdata::ingest_ensemble(path, grid).map_err(py_err)?;
    Ok(members.into_iter().map(|inner| PySeries { inner }).collect())
}

/// RK4 integration of the source-sink model.
#[pyfunction]
#[pyo3(signature = (params=None, years=100.0, dt_days=5.0, noise=0.0, seed=0))]
fn simulate(params: Option<&PySsemParams>, years: f64, dt_days: f64, noise: f64, seed: u64) -> PyResult<PySeries> {
    let p = params.cloned().unwrap_or_else(PySsemParams::default);
    let x0 = p
        .initial
        .clone()
        .ok_or_else(|| PyValueError::new_err("parameters carry no initial state"))?;
    let run = ssem::integrate(&p.inner, &x0, 0.0, years, dt_days / 365.25).map_err(py_err)?;
    let inner = if noise > 0.0 {
        ssem::perturb(&run, noise, seed).map_err(py_err)?
    } else {
        run
    };
    Ok(PySeries { inner })
}

/// Sparse polynomial model identified from a series.
#[pyclass(name = "SindyModel", module = "leocap", skip_from_py_object)]
#[derive(Clone)]
struct PySindy {
    inner: sindy::SindyModel,
}

#[pymethods]
impl PySindy {
    #[staticmethod]
    #[pyo3(signature = (series, order=3, threshold=0.01))]
    fn fit(series: &PySeries, order: usize, threshold: f64) -> PyResult<Self> {
        let n = series.inner.grid().state_len();
        let inner =
            sindy::fit(&series.inner, &sindy::LibrarySpec::polynomial(n, order), threshold).map_err(py_err)?;
        Ok(PySindy { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PySindy {
            inner: sindy::SindyModel::from_text(text).map_err(py_err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn equations(&self) -> String {
        self.inner.equations()
    }

    /// `(row, column, value)` of every nonzero coefficient.
    fn nonzeros(&self) -> Vec<(usize, usize, f64)> {
        self.inner.nonzeros()
    }

    #[getter]
    fn coefficients(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.xi)
    }

    #[getter]
    fn column_names(&self) -> Vec<String> {
        self.inner.column_names()
    }

    /// Integrates the model; returns `(times, states)`. Raises on divergence.
    fn simulate(&self, x0: Vec<f64>, t0: f64, t_end: f64, dt: f64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let tr = sindy::simulate(&self.inner, &x0, t0, t_end, dt).map_err(py_err)?;
        if let Some(time) = tr.diverged_at {
            return Err(py_err(Error::Divergence { time }));
        }
        Ok((tr.times, tr.states))
    }
}

/// Stacked LSTM forecaster.
#[pyclass(name = "LstmModel", module = "leocap", skip_from_py_object)]
#[derive(Clone)]
struct PyLstm {
    inner: lstm::LstmModel,
}

#[pymethods]
impl PyLstm {
    /// Trains on one or more `rows x features` datasets with a chronological
    /// split. Returns the model and a dict of per-epoch losses.
    #[staticmethod]
    #[pyo3(signature = (datasets, case=1, epochs=None, learning_rate=None, window_stride=None, seed=0, train_ratio=0.8))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        datasets: Vec<Vec<Vec<f64>>>,
        case: u8,
        epochs: Option<usize>,
        learning_rate: Option<f64>,
        window_stride: Option<usize>,
        seed: u64,
        train_ratio: f64,
    ) -> PyResult<(Self, Py<PyAny>)> {
        let mut config = match case {
            1 => LstmConfig::case1(),
            2 => LstmConfig::case2(),
            _ => return Err(PyValueError::new_err("case must be 1 or 2")),
        };
        config.seed = seed;
        if let Some(e) = epochs {
            config.epochs = e;
        }
        if let Some(lr) = learning_rate {
            config.learning_rate = lr;
        }
        if let Some(s) = window_stride {
            config.window_stride = s;
        }
        let named = datasets
            .iter()
            .enumerate()
            .map(|(k, d)| Ok((format!("dataset {}", k + 1), to_matrix(d)?)))
            .collect::<PyResult<Vec<_>>>()?;
        let width = named[0].1.ncols();
        config.input_size = width;
        config.output_size = width;
        let (model, report) = lstm::train_matrices(config, &named, train_ratio).map_err(py_err)?;
        let dict = pyo3::types::PyDict::new(py);
        dict.set_item("train_loss", report.train_loss)?;
        dict.set_item("val_loss", report.val_loss)?;
        dict.set_item("best_epoch", report.best_epoch)?;
        dict.set_item("stopped_epoch", report.stopped_epoch)?;
        dict.set_item("wall_seconds", report.wall_seconds)?;
        Ok((PyLstm { inner: model }, dict.into_any().unbind()))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyLstm {
            inner: lstm::load_checkpoint(std::path::Path::new(path)).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        lstm::save_checkpoint(&self.inner, std::path::Path::new(path)).map_err(py_err)
    }

    /// Closed-loop forecast from a `sequence_length x features` window in
    /// physical units.
    fn forecast(&self, window: Vec<Vec<f64>>, horizon: usize) -> PyResult<Vec<Vec<f64>>> {
        let w = to_matrix(&window)?;
        Ok(to_rows(&lstm::forecast(&self.inner, &w, horizon).map_err(py_err)?))
    }

    /// One-step prediction from a window in physical units.
    fn predict(&self, window: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let w = to_matrix(&window)?;
        Ok(lstm::forecast(&self.inner, &w, 1).map_err(py_err)?.row(0).iter().copied().collect())
    }

    #[getter]
    fn sequence_length(&self) -> usize {
        self.inner.config.sequence_length
    }

    #[getter]
    fn layers(&self) -> Vec<usize> {
        self.inner.config.layers.clone()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }
}

/// Absolute percent error per sample and column; NaN where truth is zero.
#[pyfunction]
fn percent_error(pred: &PySeries, truth: &PySeries) -> PyResult<Vec<Vec<f64>>> {
    Ok(metrics::percent_error(&pred.inner, &truth.inner).map_err(py_err)?.values)
}

/// `(max, mean)` percent error per column name.
#[pyfunction]
fn error_summary(pred: &PySeries, truth: &PySeries) -> PyResult<Vec<(String, f64, f64)>> {
    Ok(metrics::percent_error(&pred.inner, &truth.inner).map_err(py_err)?.summary())
}

/// Per-entry ensemble mean and standard deviation.
#[pyfunction]
fn ensemble_stats(members: Vec<PySeries>) -> PyResult<(PySeries, PySeries)> {
    let members: Vec<_> = members.into_iter().map(|m| m.inner).collect();
    let st = popdata::ensemble_stats(&members).map_err(py_err)?;
    Ok((PySeries { inner: st.mean }, PySeries { inner: st.sigma }))
}

#[pymodule]
fn leocap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySsemParams>()?;
    m.add_class::<PySeries>()?;
    m.add_class::<PySindy>()?;
    m.add_class::<PyLstm>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(load_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(percent_error, m)?)?;
    m.add_function(wrap_pyfunction!(error_summary, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_stats, m)?)?;
    m.add("FIVE_DAYS", ssem::FIVE_DAYS)?;
    Ok(())
}
