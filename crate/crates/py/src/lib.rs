//! Python bindings for the HOD-BF library: point clouds, kernel systems,
//! compressed matrices with inversion, the scattering solve pipeline, and the
//! exponent-fitting helper.

use hodbf::fit;
use hodbf::geometry::{shape_generator, Shape};
use hodbf::hodbf::HodBfMatrix;
use hodbf::kernels::{KernelSystem, PhysicalParams};
use hodbf::krylov::{self, ScatteringConfig, SolveFormat};
use hodbf::serialize;
use hodbf::types::CVec;
use ndarray::Array1;
use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_cvec(x: Vec<Complex64>) -> CVec {
    Array1::from_vec(x)
}

/// A lattice of polarizable cells with per-cell relative permittivity.
#[pyclass(name = "PointCloud")]
#[derive(Clone)]
struct PyPointCloud {
    inner: hodbf::geometry::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    fn new(positions: Vec<[f64; 3]>, eps: Vec<Complex64>, cell_volume: f64) -> PyResult<Self> {
        let inner = hodbf::geometry::PointCloud::new(positions, eps, cell_volume).map_err(err)?;
        Ok(Self { inner })
    }

    /// Voxelized dielectric sphere on a cubic lattice of pitch `spacing`.
    #[staticmethod]
    fn sphere(radius: f64, eps: Complex64, spacing: f64) -> PyResult<Self> {
        let shape = Shape::Sphere { radius, eps };
        Ok(Self { inner: shape_generator(&shape, spacing).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn positions(&self) -> Vec<[f64; 3]> {
        self.inner.positions.clone()
    }

    #[getter]
    fn cell_volume(&self) -> f64 {
        self.inner.cell_volume
    }
}

/// An entry-evaluable scattering system Z(m, n).
#[pyclass(name = "KernelSystem")]
struct PyKernelSystem {
    inner: KernelSystem,
}

#[pymethods]
impl PyKernelSystem {
    /// Volumetric scattering kernel for `cloud` at `frequency` Hz.
    #[staticmethod]
    fn physical(frequency: f64, cloud: &PyPointCloud) -> PyResult<Self> {
        let params = PhysicalParams::new(frequency).map_err(err)?;
        let inner = KernelSystem::physical(params, cloud.inner.clone()).map_err(err)?;
        Ok(Self { inner })
    }

    /// Oscillatory test kernel e^{-jk0 r}/(4 pi r) between two point sets.
    #[staticmethod]
    fn synthetic_oscillatory(
        targets: Vec<[f64; 3]>,
        sources: Vec<[f64; 3]>,
        k0: f64,
    ) -> Self {
        Self { inner: KernelSystem::synthetic_oscillatory(targets, sources, k0) }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn entry(&self, m: usize, n: usize) -> PyResult<Complex64> {
        self.inner.entry(m, n).map_err(err)
    }

    /// Incident plane-wave right-hand side for a unit `direction` and an
    /// orthogonal unit `polarization`.
    fn plane_wave_rhs(
        &self,
        direction: [f64; 3],
        polarization: [f64; 3],
    ) -> PyResult<Vec<Complex64>> {
        Ok(self.inner.plane_wave_rhs(direction, polarization).map_err(err)?.to_vec())
    }
}

/// A hierarchical off-diagonal butterfly matrix (forward or inverse).
#[pyclass(name = "HodBfMatrix")]
struct PyHodBfMatrix {
    inner: HodBfMatrix,
}

#[pymethods]
impl PyHodBfMatrix {
    /// Compress `system` to tolerance `tol` over a default cluster tree.
    #[staticmethod]
    #[pyo3(signature = (system, tol, seed=0, leaf_size=64))]
    fn construct(
        system: &PyKernelSystem,
        tol: f64,
        seed: u64,
        leaf_size: usize,
    ) -> PyResult<Self> {
        let tree = system.inner.default_tree(leaf_size).map_err(err)?;
        let inner = HodBfMatrix::construct(&system.inner, &tree, tol, seed).map_err(err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn matvec(&self, x: Vec<Complex64>) -> PyResult<Vec<Complex64>> {
        Ok(self.inner.matvec(&to_cvec(x)).map_err(err)?.to_vec())
    }

    /// Approximate inverse via leafwise SMW with butterfly corrections.
    #[pyo3(signature = (chi_fact, seed=0))]
    fn invert(&self, chi_fact: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: self.inner.invert(chi_fact, seed).map_err(err)? })
    }

    /// Apply the matrix in its inverse role (only valid on `invert` output).
    fn apply_inverse(&self, x: Vec<Complex64>) -> PyResult<Vec<Complex64>> {
        Ok(self.inner.apply_inverse(&to_cvec(x)).map_err(err)?.to_vec())
    }

    #[getter]
    fn storage_units(&self) -> usize {
        self.inner.stats().storage_units
    }

    #[getter]
    fn max_rank(&self) -> usize {
        self.inner.stats().max_rank
    }

    fn save(&self, path: &str) -> PyResult<()> {
        serialize::save_hodbf(&self.inner, path).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: serialize::load_hodbf(path).map_err(err)? })
    }
}

/// Full pipeline: compress, optionally factorize the inverse preconditioner,
/// and run TFQMR. Returns (coefficients, report dict).
#[pyfunction]
#[pyo3(signature = (system, rhs, format="hodbf", chi_con=1e-4, chi_fact=1e-3, chi_sol=1e-5,
                    leaf_size=64, seed=0, max_iter=2000, precond=true))]
#[allow(clippy::too_many_arguments)]
fn solve_scattering(
    py: Python<'_>,
    system: &PyKernelSystem,
    rhs: Vec<Complex64>,
    format: &str,
    chi_con: f64,
    chi_fact: f64,
    chi_sol: f64,
    leaf_size: usize,
    seed: u64,
    max_iter: usize,
    precond: bool,
) -> PyResult<(Vec<Complex64>, Py<PyDict>)> {
    let format = match format {
        "hodbf" => SolveFormat::HodBf,
        "hodlr" => SolveFormat::HodLr,
        "dense" => SolveFormat::Dense,
        other => return Err(PyValueError::new_err(format!("unknown format `{other}`"))),
    };
    let cfg = ScatteringConfig {
        format,
        chi_con,
        chi_fact,
        chi_sol,
        leaf_size,
        seed,
        max_iter,
        use_precond: precond,
    };
    let out = krylov::solve_scattering(&system.inner, &to_cvec(rhs), &cfg).map_err(err)?;
    let report = PyDict::new(py);
    report.set_item("n", out.n)?;
    report.set_item("iterations", out.report.iterations)?;
    report.set_item("converged", out.report.converged)?;
    report.set_item("true_residual", out.report.true_residual)?;
    report.set_item("construct_time_s", out.construct_time_s)?;
    report.set_item("invert_time_s", out.invert_time_s)?;
    report.set_item("solve_time_s", out.report.solve_time_s)?;
    report.set_item("storage_units", out.storage_units)?;
    report.set_item("max_rank", out.max_rank)?;
    Ok((out.x.to_vec(), report.into()))
}

/// sqrt(mean |x - x_ref|^2) normalized by the largest reference magnitude.
#[pyfunction]
fn relative_rmse(x: Vec<Complex64>, x_ref: Vec<Complex64>) -> PyResult<f64> {
    krylov::relative_rmse(&to_cvec(x), &to_cvec(x_ref)).map_err(err)
}

/// Least-squares slope of log(value) against log(n) over (n, value) pairs.
#[pyfunction]
fn fit_exponent(pairs: Vec<(f64, f64)>) -> PyResult<f64> {
    fit::fit_exponent(&pairs).map_err(err)
}
#[pymodule]
fn hodbf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyKernelSystem>()?;
    m.add_class::<PyHodBfMatrix>()?;
    m.add_function(wrap_pyfunction!(solve_scattering, m)?)?;
    m.add_function(wrap_pyfunction!(relative_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(fit_exponent, m)?)?;
    Ok(())
}
