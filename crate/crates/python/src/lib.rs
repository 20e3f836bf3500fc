//! Python bindings: meshes, the Laplace spectrum, mean-zero solves, heat kernels, Kato
//! constants and the Ricci tangency fit of the heat-kernel flow.

use std::sync::Arc;

use geoflow::calculus::{self, KatoConstants};
use geoflow::fem::{self, CoefficientField, MassKind};
use geoflow::flow::{FlowConfig, GmFlow};
use geoflow::heat;
use geoflow::mesh::{self, RoughMetric, TriangleMesh};
use geoflow::solver::{self, Measure, MeanZeroProblem};
use geoflow::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidMesh(_)
        | Error::InvalidMetric(_)
        | Error::DimensionMismatch(_)
        | Error::DegenerateTriangle { .. }
        | Error::OutOfRange(_)
        | Error::Truncation { .. }
        | Error::Compatibility { .. }
        | Error::Parse { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn mass_kind(name: &str) -> PyResult<MassKind> {
    match name {
        "consistent" => Ok(MassKind::Consistent),
        "lumped" => Ok(MassKind::Lumped),
        _ => Err(PyValueError::new_err(format!("mass must be 'consistent' or 'lumped', not {name:?}"))),
    }
}

/// A closed triangulated surface, optionally carrying its own rough metric.
#[pyclass(name = "Mesh", module = "pygeoflow", frozen, skip_from_py_object)]
struct PyMesh {
    mesh: TriangleMesh,
    metric: Option<RoughMetric>,
}

impl PyMesh {
    fn plain(mesh: TriangleMesh) -> Self {
        Self { mesh, metric: None }
    }

    fn metric(&self) -> RoughMetric {
        self.metric.clone().unwrap_or_else(|| RoughMetric::induced(&self.mesh))
    }
}

#[pymethods]
impl PyMesh {
    #[staticmethod]
    fn icosphere(subdivisions: u32) -> PyResult<Self> {
        mesh::build_icosphere(subdivisions).map(Self::plain).map_err(to_py)
    }

    #[staticmethod]
    fn tetrahedron() -> PyResult<Self> {
        mesh::build_tetrahedron().map(Self::plain).map_err(to_py)
    }

    #[staticmethod]
    fn flat_torus(n: usize, length: f64) -> PyResult<Self> {
        mesh::build_flat_torus(n, length).map(Self::plain).map_err(to_py)
    }

    /// Unit icosphere with a cone of total angle `angle` at the north pole.
    #[staticmethod]
    fn cone_sphere(angle: f64, subdivisions: u32) -> PyResult<Self> {
        let c = mesh::build_cone_sphere(angle, subdivisions).map_err(to_py)?;
        Ok(Self { mesh: c.mesh, metric: Some(c.metric) })
    }

    /// Parses the text mesh format.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        let (mesh, metric) = mesh::read_mesh(text).map_err(to_py)?;
        Ok(Self { mesh, metric })
    }

    fn to_text(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        mesh::write_mesh(&mut buf, &self.mesh, self.metric.as_ref()).map_err(|e| to_py(e.into()))?;
        Ok(String::from_utf8(buf).expect("mesh text is ASCII"))
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.mesh.num_vertices()
    }

    #[getter]
    fn num_triangles(&self) -> usize {
        self.mesh.num_triangles()
    }

    #[getter]
    fn euler_characteristic(&self) -> i64 {
        self.mesh.euler_characteristic()
    }

    #[getter]
    fn topology(&self) -> &'static str {
        self.mesh.topology().as_str()
    }

    #[getter]
    fn vertices(&self) -> Vec<(f64, f64, f64)> {
        self.mesh.vertices().iter().map(|p| (p[0], p[1], p[2])).collect()
    }

    #[getter]
    fn triangles(&self) -> Vec<(usize, usize, usize)> {
        self.mesh.triangles().iter().map(|t| (t[0], t[1], t[2])).collect()
    }

    #[getter]
    fn singular(&self) -> Vec<usize> {
        self.mesh.singular().to_vec()
    }

    fn neighbors(&self, vertex: usize) -> PyResult<Vec<usize>> {
        if vertex >= self.mesh.num_vertices() {
            return Err(PyValueError::new_err(format!("vertex {vertex} out of range")));
        }
        Ok(self.mesh.vertex_neighbors(vertex).to_vec())
    }

    /// Total area under the mesh's metric.
    fn area(&self) -> f64 {
        let g = self.metric();
        (0..self.mesh.num_triangles()).map(|t| g.area(&self.mesh, t)).sum()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mesh(topology={:?}, vertices={}, triangles={})",
            self.mesh.topology().as_str(),
            self.mesh.num_vertices(),
            self.mesh.num_triangles()
        )
    }
}

/// The `count` smallest eigenvalues of the Laplacian of the mesh's metric.
#[pyfunction]
#[pyo3(signature = (mesh, count, mass = "consistent"))]
fn laplacian_spectrum(py: Python<'_>, mesh: &PyMesh, count: usize, mass: &str) -> PyResult<Vec<f64>> {
    let kind = mass_kind(mass)?;
    py.detach(|| {
        let lap = fem::laplacian(&mesh.mesh, &mesh.metric(), kind)?;
        Ok(fem::eigensolve(&lap, count.min(mesh.mesh.num_vertices()))?.values().to_vec())
    })
    .map_err(to_py)
}

/// Mean-zero solution of `-div(A grad u) = f` with identity or seeded random real
/// coefficients; `f` must have zero mean.
#[pyfunction]
#[pyo3(signature = (mesh, f, coefficients = "identity", kappa = 0.5, lam = 2.0, seed = 0, mass = "consistent"))]
fn solve_mean_zero(
    py: Python<'_>,
    mesh: &PyMesh,
    f: Vec<f64>,
    coefficients: &str,
    kappa: f64,
    lam: f64,
    seed: u64,
    mass: &str,
) -> PyResult<Vec<f64>> {
    let kind = mass_kind(mass)?;
    let m = &mesh.mesh;
    let coeff = match coefficients {
        "identity" => CoefficientField::identity(m.num_triangles()),
        "random_real" => CoefficientField::random_real(m, kappa, lam, seed).map_err(to_py)?,
        other => return Err(PyValueError::new_err(format!("unknown coefficients {other:?}"))),
    };
    py.detach(|| {
        let (sp, pair) = fem::assemble(m, &mesh.metric(), kind)?;
        let sp = Arc::new(sp);
        let op = fem::make_operator(sp.clone(), Arc::new(pair), coeff, None)?;
        solver::solve_mean_zero(&MeanZeroProblem::new(&op, &f, Measure::of(&sp))?)
    })
    .map_err(to_py)
}

/// Heat kernel of the mesh's metric: `uniformized` (lumped mass, exactly positive) or
/// `spectral` (optionally truncated to `modes` eigenpairs).
#[pyclass(name = "HeatKernel", module = "pygeoflow")]
struct PyHeatKernel {
    inner: heat::HeatKernel,
}

#[pymethods]
impl PyHeatKernel {
    #[new]
    #[pyo3(signature = (mesh, method = "uniformized", mass = "lumped", modes = None))]
    fn new(py: Python<'_>, mesh: &PyMesh, method: &str, mass: &str, modes: Option<usize>) -> PyResult<Self> {
        let kind = mass_kind(mass)?;
        let uniformized = match method {
            "uniformized" => true,
            "spectral" => false,
            other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
        };
        py.detach(|| {
            let lap = fem::laplacian(&mesh.mesh, &mesh.metric(), kind)?;
            if uniformized {
                heat::HeatKernel::uniformized(&mesh.mesh, &lap)
            } else {
                heat::HeatKernel::new(&mesh.mesh, &lap, modes)
            }
        })
        .map(|inner| Self { inner })
        .map_err(to_py)
    }

    #[getter]
    fn t_min(&self) -> f64 {
        self.inner.t_min()
    }

    /// Raises `t_min` to the smallest time in `times` from which every slice is nonnegative.
    fn certify_positivity(&mut self, py: Python<'_>, times: Vec<f64>) -> f64 {
        let inner = &mut self.inner;
        py.detach(|| inner.certify_positivity(&times))
    }

    /// `[ρ_t(x, y) for y in vertices]`.
    fn slice(&self, py: Python<'_>, x: usize, t: f64) -> PyResult<Vec<f64>> {
        py.detach(|| self.inner.kernel_slice(x, t)).map(|s| s.values).map_err(to_py)
    }

    /// Integral of vertex values against the kernel's measure.
    fn integral(&self, values: Vec<f64>) -> PyResult<f64> {
        if values.len() != self.inner.num_vertices() {
            return Err(PyValueError::new_err("one value per vertex expected"));
        }
        Ok(self.inner.integral(&values))
    }
}

fn kato_dict<'py>(py: Python<'py>, k: &KatoConstants) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("c_low", k.c_low)?;
    d.set_item("c_high", k.c_high)?;
    d.set_item("probes_used", k.probes_used)?;
    d.set_item("skipped", k.skipped)?;
    Ok(d)
}

/// Extremes of `‖√L u‖ / ‖∇u‖` for seeded random complex coefficients with bounds
/// `(kappa, lam)`, over Laplace eigenfunctions and random mean-zero probes.
#[pyfunction]
#[pyo3(signature = (mesh, seed, kappa = 0.5, lam = 2.0, eigen_probes = 10, random_probes = 10))]
fn kato_constants<'py>(
    py: Python<'py>,
    mesh: &PyMesh,
    seed: u64,
    kappa: f64,
    lam: f64,
    eigen_probes: usize,
    random_probes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let m = &mesh.mesh;
    let k = py
        .detach(|| {
            let (sp, pair) = fem::assemble(m, &mesh.metric(), MassKind::Consistent)?;
            let (sp, pair) = (Arc::new(sp), Arc::new(pair));
            let lap = fem::make_operator(sp.clone(), pair.clone(), CoefficientField::identity(m.num_triangles()), None)?;
            let spec = fem::eigensolve(&lap, (eigen_probes + 2).min(m.num_vertices()))?;
            let coeff = CoefficientField::random_complex(m, kappa, lam, seed)?;
            let op = fem::make_operator(sp.clone(), pair, coeff, None)?;
            calculus::kato_ratio(&op, &calculus::probe_set(&sp, &spec, eigen_probes, random_probes, seed))
        })
        .map_err(to_py)?;
    kato_dict(py, &k)
}

/// Quadratic fit of `t ↦ g_t(x)(v, v)` for the heat-kernel flow of the mesh against its
/// own metric; the slope at `t = 0` approximates `-2 Ric(v, v)`.
#[pyfunction]
#[pyo3(signature = (mesh, vertex, direction, times))]
fn ricci_tangency<'py>(
    py: Python<'py>,
    mesh: &PyMesh,
    vertex: usize,
    direction: (f64, f64),
    times: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = &mesh.mesh;
    let fit = py
        .detach(|| {
            let target = mesh.metric();
            let pair = mesh::compare_metrics(&RoughMetric::induced(m), &target)?;
            let hk = heat::HeatKernel::uniformized(m, &fem::laplacian(m, &target, MassKind::Lumped)?)?;
            let cfg = FlowConfig::new(m, times.clone(), 0)?;
            let flow = GmFlow::new(m, &pair, &hk, cfg, MassKind::Lumped)?;
            flow.ricci_tangency(vertex, [direction.0, direction.1], &times)
        })
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("slope", fit.slope)?;
    d.set_item("intercept", fit.intercept)?;
    d.set_item("fit_residual", fit.fit_residual)?;
    d.set_item("times", fit.t_values)?;
    d.set_item("values", fit.values)?;
    Ok(d)
}

#[pymodule]
fn pygeoflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyMesh>()?;
    m.add_class::<PyHeatKernel>()?;
    m.add_function(wrap_pyfunction!(laplacian_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(solve_mean_zero, m)?)?;
    m.add_function(wrap_pyfunction!(kato_constants, m)?)?;
    m.add_function(wrap_pyfunction!(ricci_tangency, m)?)?;
    Ok(())
}
