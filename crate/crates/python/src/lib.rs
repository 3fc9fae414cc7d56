//! Python bindings: `import pycutfem`.
//!
//! Configurations are passed as keyword arguments that override the Rust
//! defaults field by field (`Simulation(h=0.05, scheme="bdf2")`).

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::sync::Arc;

use eulerian_cutfem::ale::{build_fitted_mesh, AleConfig, AleSolver};
use eulerian_cutfem::geometry::{classify as classify_elements, RigidState};
use eulerian_cutfem::mesh::{build_structured_mesh, TriMesh};
use eulerian_cutfem::stepper::{SchemeConfig, StepRecord, TrajectoryRow};
use eulerian_cutfem::study::{self, ErrorRow, StudyConfig, StudyPaths};
use nalgebra::{Point2, Vector2};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: eulerian_cutfem::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Default value overridden by the given keyword arguments.
fn config<T: Serialize + DeserializeOwned>(py: Python<'_>, base: T, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(kwargs) = kwargs else { return Ok(base) };
    let bad = |e: serde_json::Error| PyValueError::new_err(e.to_string());
    let text: String = py.import("json")?.call_method1("dumps", (kwargs,))?.extract()?;
    let updates: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text).map_err(bad)?;
    let mut value = serde_json::to_value(base).map_err(bad)?;
    let fields = value.as_object_mut().expect("configs are structs");
    for (k, v) in updates {
        if !fields.contains_key(&k) {
            return Err(PyValueError::new_err(format!("unknown option {k:?}")));
        }
        fields.insert(k, v);
    }
    serde_json::from_value(value).map_err(bad)
}

fn record_dict<'py>(py: Python<'py>, r: &StepRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("t", r.t)?;
    d.set_item("center", (r.state.center.x, r.state.center.y))?;
    d.set_item("xi", (r.state.xi.x, r.state.xi.y))?;
    d.set_item("force", (r.force.x, r.force.y))?;
    d.set_item("iterations", r.iterations)?;
    d.set_item("energy_residual", r.energy_residual)?;
    d.set_item("n_active", r.n_active)?;
    d.set_item("k_strip", r.k_strip)?;
    d.set_item("delta_h", r.delta_h)?;
    d.set_item("n_dofs", r.n_dofs)?;
    Ok(d)
}

fn row_dict<'py>(py: Python<'py>, r: &TrajectoryRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("t", r.t)?;
    d.set_item("center", (r.center[0], r.center[1]))?;
    d.set_item("xi", (r.xi[0], r.xi[1]))?;
    d.set_item("force", (r.force[0], r.force[1]))?;
    d.set_item("iterations", r.iterations)?;
    d.set_item("energy_residual", r.energy_residual)?;
    d.set_item("n_active", r.n_active)?;
    d.set_item("k_strip", r.k_strip)?;
    Ok(d)
}

fn rows_list<'py>(py: Python<'py>, rows: &[TrajectoryRow]) -> PyResult<Bound<'py, PyList>> {
    PyList::new(py, rows.iter().map(|r| row_dict(py, r)).collect::<PyResult<Vec<_>>>()?)
}

fn rows_from(list: &Bound<'_, PyList>) -> PyResult<Vec<TrajectoryRow>> {
    list.iter()
        .map(|item| {
            let d = item.cast::<PyDict>()?;
            let get = |k: &str| -> PyResult<Bound<'_, PyAny>> {
                d.get_item(k)?.ok_or_else(|| PyValueError::new_err(format!("row without {k:?}")))
            };
            let pair = |k: &str| -> PyResult<[f64; 2]> {
                let (a, b): (f64, f64) = get(k)?.extract()?;
                Ok([a, b])
            };
            let opt = |k: &str| -> PyResult<usize> { Ok(d.get_item(k)?.map(|v| v.extract()).transpose()?.unwrap_or(0)) };
            Ok(TrajectoryRow {
                step: get("step")?.extract()?,
                t: get("t")?.extract()?,
                center: pair("center")?,
                xi: pair("xi")?,
                force: pair("force")?,
                iterations: opt("iterations")?,
                energy_residual: d
                    .get_item("energy_residual")?
                    .map(|v| v.extract::<Option<f64>>())
                    .transpose()?
                    .flatten()
                    .unwrap_or(f64::NAN),
                n_active: opt("n_active")?,
                k_strip: opt("k_strip")?,
            })
        })
        .collect()
}

fn error_dict<'py>(py: Python<'py>, r: &ErrorRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("Lx", r.lx)?;
    d.set_item("Lt", r.lt)?;
    d.set_item("h", r.h)?;
    d.set_item("dt", r.dt)?;
    d.set_item("err_velocity", r.err_velocity)?;
    d.set_item("err_position", r.err_position)?;
    d.set_item("observed_rate_t", r.observed_rate_t)?;
    d.set_item("observed_rate_x", r.observed_rate_x)?;
    Ok(d)
}

/// Structured criss-cross triangulation of the unit square.
#[pyclass(frozen)]
struct Mesh {
    inner: Arc<TriMesh>,
}

#[pymethods]
impl Mesh {
    #[staticmethod]
    fn structured(h: f64) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(build_structured_mesh(h).map_err(err)?),
        })
    }

    #[getter]
    fn n_vertices(&self) -> usize {
        self.inner.n_vertices()
    }

    #[getter]
    fn n_triangles(&self) -> usize {
        self.inner.n_triangles()
    }

    #[getter]
    fn h_max(&self) -> f64 {
        self.inner.h_max
    }

    fn vertices(&self) -> Vec<(f64, f64)> {
        self.inner.vertices.iter().map(|p| (p.x, p.y)).collect()
    }

    fn triangles(&self) -> Vec<[usize; 3]> {
        self.inner.triangles.clone()
    }

    fn __repr__(&self) -> String {
        format!("Mesh(n_vertices={}, n_triangles={}, h_max={:.4})", self.n_vertices(), self.n_triangles(), self.h_max())
    }
}

/// Element counts of the active decomposition for a disk of the given center and radius.
#[pyfunction]
#[pyo3(signature = (mesh, center, radius=0.1, delta_h=0.0))]
fn classify<'py>(py: Python<'py>, mesh: &Mesh, center: (f64, f64), radius: f64, delta_h: f64) -> PyResult<Bound<'py, PyDict>> {
    let state = RigidState::new(Point2::new(center.0, center.1), radius, Vector2::zeros());
    let dec = classify_elements(&mesh.inner, &state, delta_h).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("active", dec.active_elements.len())?;
    d.set_item("cut", dec.cut_elements.len())?;
    d.set_item("interface", dec.interface_elements.len())?;
    d.set_item("strip_pm", dec.strip_elements_pm.len())?;
    d.set_item("strip_plus", dec.strip_elements_plus.len())?;
    d.set_item("strip_facets", dec.strip_facets.len())?;
    Ok(d)
}

/// Eulerian unfitted solver for the coupled fluid and rigid-body problem.
#[pyclass(unsendable)]
struct Simulation {
    inner: eulerian_cutfem::stepper::Simulation,
}

#[pymethods]
impl Simulation {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = config(py, SchemeConfig::default(), kwargs)?;
        Ok(Self {
            inner: eulerian_cutfem::stepper::Simulation::new(cfg).map_err(err)?,
        })
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.config)
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.time()
    }

    #[getter]
    fn center(&self) -> (f64, f64) {
        let c = self.inner.state().center;
        (c.x, c.y)
    }

    #[getter]
    fn xi(&self) -> (f64, f64) {
        let xi = self.inner.state().xi;
        (xi.x, xi.y)
    }

    /// Advances one time step and returns its record.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.step().map_err(err)?;
        record_dict(py, r)
    }

    /// Steps to the final time; returns all records including step 0.
    fn run<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let rs = self.inner.run().map_err(err)?;
        PyList::new(py, rs.iter().map(|r| record_dict(py, r)).collect::<PyResult<Vec<_>>>()?)
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        PyList::new(py, self.inner.records.iter().map(|r| record_dict(py, r)).collect::<PyResult<Vec<_>>>()?)
    }
}

/// Body-fitted moving-mesh solver of the same problem.
#[pyclass(unsendable)]
struct AleSimulation {
    inner: AleSolver,
}

#[pymethods]
impl AleSimulation {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = config(py, AleConfig::default(), kwargs)?;
        Ok(Self {
            inner: AleSolver::new(cfg).map_err(err)?,
        })
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.config)
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.time()
    }

    #[getter]
    fn n_dofs(&self) -> usize {
        self.inner.layout.n_dofs
    }

    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.step().map_err(err)?;
        record_dict(py, r)
    }

    fn run<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let rs = self.inner.run().map_err(err)?;
        PyList::new(py, rs.iter().map(|r| record_dict(py, r)).collect::<PyResult<Vec<_>>>()?)
    }
}

/// Vertex count, area and circle perimeter of the body-fitted mesh.
#[pyfunction]
#[pyo3(signature = (n_circle, n_radial, center=(0.5, 0.8), radius=0.1))]
fn fitted_mesh_info<'py>(py: Python<'py>, n_circle: usize, n_radial: usize, center: (f64, f64), radius: f64) -> PyResult<Bound<'py, PyDict>> {
    let state = RigidState::new(Point2::new(center.0, center.1), radius, Vector2::zeros());
    let fm = build_fitted_mesh(n_circle, n_radial, &state).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("n_vertices", fm.mesh.n_vertices())?;
    d.set_item("n_triangles", fm.mesh.n_triangles())?;
    d.set_item("area", fm.area())?;
    d.set_item("circle_perimeter", fm.circle_perimeter())?;
    Ok(d)
}

#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, &SchemeConfig::default())
}

/// Full Eulerian trajectory as a list of row dicts.
#[pyfunction]
#[pyo3(signature = (**kwargs))]
fn run_trajectory<'py>(py: Python<'py>, kwargs: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyList>> {
    let cfg = config(py, SchemeConfig::default(), kwargs)?;
    let rows = py.detach(|| study::run_trajectory(&cfg)).map_err(err)?;
    rows_list(py, &rows)
}

/// Body-fitted reference trajectory.
#[pyfunction]
#[pyo3(signature = (**kwargs))]
fn run_reference<'py>(py: Python<'py>, kwargs: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyList>> {
    let cfg = config(py, AleConfig::default(), kwargs)?;
    let rows = py.detach(|| eulerian_cutfem::ale::run_reference(&cfg)).map_err(err)?;
    rows_list(py, &rows)
}

/// Discrete space-time velocity and position errors of `traj` against `reference`.
#[pyfunction]
fn spacetime_error(traj: &Bound<'_, PyList>, reference: &Bound<'_, PyList>) -> PyResult<(f64, f64)> {
    study::spacetime_error(&rows_from(traj)?, &rows_from(reference)?).map_err(err)
}

/// Runs a convergence study and returns the error rows; writes the output files when `out` is given.
#[pyfunction]
#[pyo3(signature = (out=None, cache=None, scheme=None, **kwargs))]
fn run_study<'py>(
    py: Python<'py>,
    out: Option<PathBuf>,
    cache: Option<PathBuf>,
    scheme: Option<&Bound<'py, PyDict>>,
    kwargs: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyList>> {
    let mut cfg = config(py, StudyConfig::default(), kwargs)?;
    cfg.scheme = config(py, cfg.scheme, scheme)?;
    let paths = StudyPaths { out, cache };
    let result = py.detach(|| study::run_study(&cfg, &paths)).map_err(err)?;
    PyList::new(py, result.rows.iter().map(|r| error_dict(py, r)).collect::<PyResult<Vec<_>>>()?)
}

/// Parses an `errors.csv` file.
#[pyfunction]
fn read_errors<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyList>> {
    let file = File::open(&path).map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))?;
    let rows = study::read_errors(BufReader::new(file)).map_err(err)?;
    PyList::new(py, rows.iter().map(|r| error_dict(py, r)).collect::<PyResult<Vec<_>>>()?)
}

#[pymodule]
fn pycutfem(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Mesh>()?;
    m.add_class::<Simulation>()?;
    m.add_class::<AleSimulation>()?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(fitted_mesh_info, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(run_reference, m)?)?;
    m.add_function(wrap_pyfunction!(spacetime_error, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    m.add_function(wrap_pyfunction!(read_errors, m)?)?;
    m.add("ERRORS_HEADER", study::ERRORS_HEADER)?;
    Ok(())
}
