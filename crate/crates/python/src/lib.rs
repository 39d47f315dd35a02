//! Python module `collrad`: scenario runs plus direct access to arrays,
//! couplings, spin-wave modes and the three solvers.

use std::path::PathBuf;

use collrad_core::config::ScenarioConfig;
use collrad_core::couplings::{coupling_matrices, CouplingMatrices, Environment};
use collrad_core::cumulant2::evolve_individual;
use collrad_core::exact::run_exact;
use collrad_core::lattice::{build_array, EmitterArray, Geometry, Polarization};
use collrad_core::modes::{
    apply_truncation, radiant_fraction, spin_wave_modes, ModeSet, Truncation,
};
use collrad_core::observables::ObservableSample;
use collrad_core::odeint::{uniform_grid, IntegratorConfig};
use collrad_core::{collective, scenario, Error};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(
    collrad,
    SolverError,
    PyException,
    "Time integration failed."
);

fn to_py(e: Error) -> PyErr {
    if e.is_solver_failure() {
        SolverError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn geometry(s: &str) -> PyResult<Geometry> {
    match s.trim().to_ascii_lowercase().as_str() {
        "chain" => Ok(Geometry::Chain),
        "ring" => Ok(Geometry::Ring),
        "square" => Ok(Geometry::Square),
        "cube" => Ok(Geometry::Cube),
        "waveguide_chain" => Ok(Geometry::WaveguideChain),
        other => Err(PyValueError::new_err(format!("unknown geometry `{other}`"))),
    }
}

fn rows(n: usize, at: impl Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|k| at(i, k)).collect()).collect()
}

/// Trajectory columns as a dict of lists; g2 is None where undefined.
fn trajectory<'py>(py: Python<'py>, samples: &[ObservableSample]) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("t", samples.iter().map(|s| s.t).collect::<Vec<_>>())?;
    d.set_item("p_exc", samples.iter().map(|s| s.p_exc).collect::<Vec<_>>())?;
    d.set_item("p_out", samples.iter().map(|s| s.p_out).collect::<Vec<_>>())?;
    d.set_item("g2", samples.iter().map(|s| s.g2).collect::<Vec<_>>())?;
    d.set_item(
        "g2_reliable",
        samples.iter().map(|s| s.g2_reliable).collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// Scenario configuration. Keyword arguments use the config-file keys.
#[pyclass(name = "Scenario", module = "collrad", skip_from_py_object)]
#[derive(Clone)]
struct PyScenario {
    cfg: ScenarioConfig,
}

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut s = PyScenario {
            cfg: ScenarioConfig::default(),
        };
        if let Some(kw) = kwargs {
            // geometry first so that `n` is interpreted for the right lattice
            if let Some(g) = kw.get_item("geometry")? {
                s.set("geometry", &g)?;
            }
            for (k, v) in kw.iter() {
                let k: String = k.extract()?;
                if k != "geometry" {
                    s.set(&k, &v)?;
                }
            }
        }
        Ok(s)
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(PyScenario {
            cfg: ScenarioConfig::from_file(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PyScenario {
            cfg: ScenarioConfig::parse_str(text).map_err(to_py)?,
        })
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let v = value.str()?.to_string();
        self.cfg.set(key, &v).map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.cfg.validate().map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.cfg.to_text()
    }

    #[getter]
    fn n_emitters(&self) -> usize {
        self.cfg.n_emitters()
    }

    #[getter]
    fn stem(&self) -> String {
        self.cfg.stem()
    }

    /// Integrates without writing files.
    fn simulate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let cfg = self.cfg.clone();
        let out = py.detach(|| scenario::simulate(&cfg)).map_err(to_py)?;
        let d = trajectory(py, &out.samples)?;
        d.set_item("method", out.method.name())?;
        d.set_item("n_emitters", out.n_emitters)?;
        d.set_item("kept_modes", out.kept_modes)?;
        d.set_item("tracked_equations", out.tracked_equations)?;
        d.set_item("wall_time_s", out.wall_time_s)?;
        Ok(d)
    }

    /// Writes the CSV and JSON sidecar; returns their paths.
    fn run(&self, py: Python<'_>) -> PyResult<(PathBuf, PathBuf)> {
        let cfg = self.cfg.clone();
        let r = py.detach(|| scenario::run(&cfg)).map_err(to_py)?;
        Ok((r.csv, r.metadata))
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario({})",
            self.cfg.to_text().trim_end().replace('\n', ", ")
        )
    }
}

/// Emitter positions and pairwise couplings J, Γ.
#[pyclass(name = "System", module = "collrad")]
struct PySystem {
    array: EmitterArray,
    couplings: CouplingMatrices,
}

#[pymethods]
impl PySystem {
    #[new]
    #[pyo3(signature = (geometry, n1d, spacing, environment = "free_space", polarization = "circular"))]
    fn new(
        geometry: &str,
        n1d: usize,
        spacing: f64,
        environment: &str,
        polarization: &str,
    ) -> PyResult<Self> {
        let kind = self::geometry(geometry)?;
        let env: Environment = parse(environment)?;
        let pol: Polarization = parse(polarization)?;
        let array = build_array(kind, n1d, spacing, pol.vector()).map_err(to_py)?;
        let couplings = coupling_matrices(&array, env).map_err(to_py)?;
        Ok(PySystem { array, couplings })
    }

    fn __len__(&self) -> usize {
        self.array.len()
    }

    #[getter]
    fn positions(&self) -> Vec<[f64; 3]> {
        self.array
            .positions
            .iter()
            .map(|r| [r.x, r.y, r.z])
            .collect()
    }

    #[getter]
    fn j(&self) -> Vec<Vec<f64>> {
        rows(self.couplings.len(), |i, k| self.couplings.j[(i, k)])
    }

    #[getter]
    fn gamma(&self) -> Vec<Vec<f64>> {
        rows(self.couplings.len(), |i, k| self.couplings.gamma[(i, k)])
    }

    /// Spin-wave modes; `truncation` takes the config syntax.
    #[pyo3(signature = (truncation = "none"))]
    fn modes(&self, truncation: &str) -> PyResult<PyModes> {
        let t: Truncation = parse(truncation)?;
        let all = spin_wave_modes(&self.couplings, &self.array).map_err(to_py)?;
        let modes = apply_truncation(&all, t, self.array.spacing).map_err(to_py)?;
        Ok(PyModes { modes })
    }

    /// Exact master-equation trajectory from full inversion.
    #[pyo3(signature = (t_max, points, cap = 10))]
    fn evolve_exact<'py>(
        &self,
        py: Python<'py>,
        t_max: f64,
        points: usize,
        cap: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let grid = uniform_grid(t_max, points);
        let run = py
            .detach(|| run_exact(&self.couplings, &grid, &IntegratorConfig::default(), cap))
            .map_err(to_py)?;
        trajectory(py, &run.samples)
    }

    /// Second-order cumulant equations in the single-emitter basis.
    fn evolve_cumulant2<'py>(
        &self,
        py: Python<'py>,
        t_max: f64,
        points: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let grid = uniform_grid(t_max, points);
        let run = py
            .detach(|| evolve_individual(&self.couplings, &grid, &IntegratorConfig::default()))
            .map_err(to_py)?;
        trajectory(py, &run.samples)
    }
}

/// Collective rates Γ_μ, shifts J_μ and the kept mask.
#[pyclass(name = "Modes", module = "collrad")]
struct PyModes {
    modes: ModeSet,
}

#[pymethods]
impl PyModes {
    fn __len__(&self) -> usize {
        self.modes.len()
    }

    #[getter]
    fn gamma(&self) -> Vec<f64> {
        self.modes.gamma_mu.clone()
    }

    #[getter]
    fn j(&self) -> Vec<f64> {
        self.modes.j_mu.clone()
    }

    #[getter]
    fn kept(&self) -> Vec<bool> {
        self.modes.kept.clone()
    }

    #[getter]
    fn momenta(&self) -> Vec<Vec<i64>> {
        let dims = self.modes.grid.dims;
        self.modes
            .momenta()
            .iter()
            .map(|m| m.0[..dims].to_vec())
            .collect()
    }

    #[getter]
    fn kept_count(&self) -> usize {
        self.modes.kept_count()
    }

    #[getter]
    fn tracked_equations(&self) -> PyResult<usize> {
        Ok(collective::TrackedLayout::new(&self.modes)
            .map_err(to_py)?
            .len())
    }

    /// Fraction of all modes with Γ_μ above γ₀/N.
    fn radiant_fraction(&self) -> f64 {
        radiant_fraction(&self.modes)
    }

    /// Spin-wave cumulant trajectory over the kept modes.
    fn evolve<'py>(
        &self,
        py: Python<'py>,
        t_max: f64,
        points: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let grid = uniform_grid(t_max, points);
        let run = py
            .detach(|| {
                collective::evolve_collective(&self.modes, &grid, &IntegratorConfig::default())
            })
            .map_err(to_py)?;
        trajectory(py, &run.samples)
    }
}

#[pymodule]
fn collrad(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PySystem>()?;
    m.add_class::<PyModes>()?;
    m.add("SolverError", m.py().get_type::<SolverError>())?;
    m.add("CSV_HEADER", scenario::CSV_HEADER)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
