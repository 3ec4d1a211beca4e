//! Python bindings: targets, grids, extraction, fitting and mesh checks.

use std::sync::OnceLock;

use flexicubes::diff::{grid_grad_check, GradCheckConfig};
use flexicubes::extract::{extract_mc_baseline, extract_quads, split_final, FlexParams};
use flexicubes::grid::ScalarGrid;
use flexicubes::mesh::TriMesh;
use flexicubes::meshcheck::check_topology;
use flexicubes::metrics::{metrics, MetricConfig};
use flexicubes::objectives::LossWeights;
use flexicubes::optimize::{FitConfig, FitState, Mode, Phase2};
use flexicubes::tables::DmcTables;
use flexicubes::target::{Sdf, TargetShape};
use flexicubes::tet::{extract_tets, filter_thin_tets, DEFAULT_THIN_TET_VOLUME};
use flexicubes::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tables() -> PyResult<&'static DmcTables> {
    static TABLES: OnceLock<DmcTables> = OnceLock::new();
    if let Some(t) = TABLES.get() {
        return Ok(t);
    }
    let t = DmcTables::build().map_err(py_err)?;
    Ok(TABLES.get_or_init(|| t))
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => PyList::new(py, a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?)?.into_any(),
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn serialize<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| py_err(e.into()))?;
    to_py(py, &value)
}

/// Signed distance target: an analytic builtin or a normalized OBJ mesh.
#[pyclass(name = "Target", module = "flexicubes")]
struct PyTarget {
    inner: TargetShape,
}

#[pymethods]
impl PyTarget {
    #[staticmethod]
    #[pyo3(signature = (name, rotate = [0.0, 0.0, 0.0], scale = 1.0))]
    fn builtin(name: &str, rotate: [f64; 3], scale: f64) -> PyResult<Self> {
        let base = TargetShape::builtin(name).map_err(py_err)?;
        let inner = if rotate == [0.0; 3] && scale == 1.0 { base } else { base.transformed(rotate, scale).map_err(py_err)? };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load_obj(path: &str) -> PyResult<Self> {
        Ok(Self { inner: TargetShape::load_obj(path).map_err(py_err)? })
    }

    #[staticmethod]
    fn builtins() -> Vec<&'static str> {
        Sdf::BUILTINS.to_vec()
    }

    fn sdf(&self, points: Vec<[f64; 3]>) -> Vec<f64> {
        points.into_iter().map(|p| self.inner.sdf(p)).collect()
    }
}

/// Uniform scalar grid with per-vertex signed distances and deformations.
#[pyclass(name = "Grid", module = "flexicubes")]
struct PyGrid {
    inner: ScalarGrid,
}

#[pymethods]
impl PyGrid {
    /// Grid of `res` cells per axis over the `[-1, 1]^3` domain.
    #[new]
    fn new(res: usize) -> PyResult<Self> {
        Ok(Self { inner: ScalarGrid::unit_domain(res).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_target(target: &PyTarget, res: usize) -> PyResult<Self> {
        let inner = ScalarGrid::from_fn([res; 3], [-1.0; 3], 2.0 / res as f64, |p| target.inner.sdf(p)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn resolution(&self) -> [usize; 3] {
        self.inner.resolution
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.inner.num_vertices()
    }

    #[getter]
    fn num_cells(&self) -> usize {
        self.inner.num_cells()
    }

    #[getter]
    fn get_sdf(&self) -> Vec<f64> {
        self.inner.sdf.clone()
    }

    #[setter]
    fn set_sdf(&mut self, sdf: Vec<f64>) -> PyResult<()> {
        if sdf.len() != self.inner.num_vertices() {
            return Err(PyValueError::new_err(format!("expected {} values, got {}", self.inner.num_vertices(), sdf.len())));
        }
        self.inner.sdf = sdf;
        Ok(())
    }

    /// Raw deformation parameters, three per vertex.
    #[getter]
    fn get_deform(&self) -> Vec<f64> {
        self.inner.deform_flat()
    }

    #[setter]
    fn set_deform(&mut self, raw: Vec<f64>) -> PyResult<()> {
        if raw.len() != 3 * self.inner.num_vertices() {
            return Err(PyValueError::new_err(format!("expected {} values, got {}", 3 * self.inner.num_vertices(), raw.len())));
        }
        self.inner.set_deform_flat(&raw);
        Ok(())
    }

    fn positions(&self) -> Vec<[f64; 3]> {
        self.inner.deformed_positions()
    }
}

/// Triangle mesh.
#[pyclass(name = "Mesh", module = "flexicubes")]
struct PyMesh {
    inner: TriMesh,
}

#[pymethods]
impl PyMesh {
    #[new]
    fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> PyResult<Self> {
        let inner = TriMesh::new(vertices, triangles);
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read_obj(path: &str) -> PyResult<Self> {
        Ok(Self { inner: TriMesh::read_obj(path).map_err(py_err)? })
    }

    #[getter]
    fn vertices(&self) -> Vec<[f64; 3]> {
        self.inner.vertices.clone()
    }

    #[getter]
    fn triangles(&self) -> Vec<[usize; 3]> {
        self.inner.triangles.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.triangles.len()
    }

    fn to_obj(&self) -> String {
        self.inner.to_obj()
    }

    fn write_obj(&self, path: &str) -> PyResult<()> {
        self.inner.write_obj(path).map_err(py_err)
    }

    /// Manifoldness, boundary, Euler characteristic and self-intersections.
    fn topology<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &check_topology(&self.inner).map_err(py_err)?)
    }

    #[pyo3(signature = (target, samples = 100_000, seed = 0))]
    fn metrics<'py>(&self, py: Python<'py>, target: &PyTarget, samples: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let cfg = MetricConfig { samples, seed, ..Default::default() };
        serialize(py, &metrics(&self.inner, &target.inner, &cfg).map_err(py_err)?)
    }
}

/// Mesh of the grid's zero level set with neutral weights. Quads are split
/// into triangles.
#[pyfunction]
fn extract(grid: &PyGrid) -> PyResult<PyMesh> {
    let p = FlexParams::new(grid.inner.num_cells());
    let q = extract_quads(&grid.inner, &p, tables()?).map_err(py_err)?;
    Ok(PyMesh { inner: split_final(&q, &p) })
}

/// Quad mesh of the grid's zero level set as `(vertices, quads)`.
#[pyfunction]
fn extract_quad_mesh(grid: &PyGrid) -> PyResult<(Vec<[f64; 3]>, Vec<[usize; 4]>)> {
    let p = FlexParams::new(grid.inner.num_cells());
    let q = extract_quads(&grid.inner, &p, tables()?).map_err(py_err)?;
    Ok((q.vertices, q.quads))
}

/// Marching cubes mesh of the grid's zero level set.
#[pyfunction]
fn extract_mc(grid: &PyGrid) -> PyResult<PyMesh> {
    Ok(PyMesh { inner: extract_mc_baseline(&grid.inner, tables()?).map_err(py_err)? })
}

/// Interior tetrahedralization as `(vertices, tets)`.
#[pyfunction]
fn tetrahedralize(grid: &PyGrid) -> PyResult<(Vec<[f64; 3]>, Vec<[usize; 4]>)> {
    let p = FlexParams::new(grid.inner.num_cells());
    let t = tables()?;
    let q = extract_quads(&grid.inner, &p, t).map_err(py_err)?;
    let tets = filter_thin_tets(&extract_tets(&grid.inner, &p, t, &q).map_err(py_err)?, DEFAULT_THIN_TET_VOLUME);
    Ok((tets.vertices, tets.tets))
}

/// Analytic against finite-difference gradients on random grids.
#[pyfunction]
#[pyo3(signature = (res = 5, trials = 10, seed = 0))]
fn grad_check<'py>(py: Python<'py>, res: usize, trials: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let r = grid_grad_check(res, trials, &LossWeights::default(), &GradCheckConfig::default(), seed).map_err(py_err)?;
    serialize(py, &r)
}

/// Gradient-based fit of a grid to a target, stepped from Python.
#[pyclass(name = "Fitter", module = "flexicubes")]
struct PyFitter {
    cfg: FitConfig,
    state: FitState,
    target: TargetShape,
}

#[pymethods]
impl PyFitter {
    #[new]
    #[pyo3(signature = (target, resolution = 32, iterations = 1000, lr = 0.01, seed = 0, mc = false, phase2_steps = 0))]
    fn new(target: &PyTarget, resolution: usize, iterations: usize, lr: f64, seed: u64, mc: bool, phase2_steps: usize) -> PyResult<Self> {
        let cfg = FitConfig {
            iterations,
            lr,
            seed,
            resolution,
            mode: if mc { Mode::Mc } else { Mode::Flexi },
            phase2: (phase2_steps > 0).then(|| Phase2 { steps: phase2_steps, ..Default::default() }),
            ..Default::default()
        };
        let state = FitState::new(&cfg).map_err(py_err)?;
        Ok(Self { cfg, state, target: target.inner.clone() })
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.state.iter
    }

    #[getter]
    fn total_steps(&self) -> usize {
        self.cfg.total_steps()
    }

    /// One optimizer step; returns the total loss.
    fn step(&mut self) -> PyResult<f64> {
        Ok(self.state.step(&self.cfg, &self.target, tables()?).map_err(py_err)?.total)
    }

    /// Steps until the configured budget is spent.
    fn run(&mut self) -> PyResult<()> {
        self.state.run(&self.cfg, &self.target, tables()?).map_err(py_err)
    }

    fn mesh(&self) -> PyResult<PyMesh> {
        Ok(PyMesh { inner: self.state.final_mesh(&self.cfg, tables()?).map_err(py_err)?.0 })
    }

    fn history_csv(&self) -> String {
        self.state.history_csv()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.state.save(path).map_err(py_err)
    }
}

#[pymodule]
fn flexicubes_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTarget>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyMesh>()?;
    m.add_class::<PyFitter>()?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(extract_quad_mesh, m)?)?;
    m.add_function(wrap_pyfunction!(extract_mc, m)?)?;
    m.add_function(wrap_pyfunction!(tetrahedralize, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
