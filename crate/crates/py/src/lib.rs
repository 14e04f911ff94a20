//! Python bindings: problems, SIMP, datasets, networks and metrics.
//!
//! Fields cross the boundary as flat lists of floats in element order
//! (x fastest, then y, then z). `dims` lists follow the wire order
//! `[ny, nx]` / `[ny, nx, nz]`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use topoforge::datagen::{self, GenerateConfig};
use topoforge::mesh::{self, standard_bc_case, BcCase, DesignDomain, Grid, PointLoad};
use topoforge::metrics;
use topoforge::networks::{self, FilterPlan, FreezePolicy, ModelKind, NetworkError, TrainConfig};
use topoforge::nn::AdamConfig;
use topoforge::simp::{self, MaterialModel, SimpConfig};
use topoforge::DensityField;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn network_err(e: NetworkError) -> PyErr {
    match e {
        NetworkError::Nn(topoforge::nn::NnError::Io(io)) => PyIOError::new_err(io.to_string()),
        NetworkError::IncompatibleDims(_) | NetworkError::ShapePlanInvalid(_) => value_err(e),
        e => runtime_err(e),
    }
}

fn grid_of(nx: usize, ny: usize, nz: Option<usize>) -> PyResult<Grid> {
    let dims = match nz {
        Some(nz) => vec![ny, nx, nz],
        None => vec![ny, nx],
    };
    Grid::from_dims(&dims).map_err(value_err)
}

/// A design domain with supports, loads and a volume fraction.
#[pyclass(module = "topoforge", frozen)]
struct Problem {
    inner: topoforge::Problem,
}

#[pymethods]
impl Problem {
    /// Full rectangular/box domain with a standard support case and one
    /// point load. `load` is node coordinates (x, y[, z]); `force` defaults
    /// to a unit downward load.
    #[staticmethod]
    #[pyo3(signature = (nx, ny, nz=None, case="cantilever", load=None, force=None, volfrac=0.5))]
    fn standard(
        nx: usize,
        ny: usize,
        nz: Option<usize>,
        case: &str,
        load: Option<Vec<usize>>,
        force: Option<Vec<f64>>,
        volfrac: f64,
    ) -> PyResult<Self> {
        let grid = grid_of(nx, ny, nz)?;
        let case: BcCase = case.parse().map_err(value_err)?;
        let at = match load {
            Some(c) if c.len() == grid.rank => [c[0], c[1], c.get(2).copied().unwrap_or(0)],
            Some(c) => return Err(value_err(format!("load needs {} coordinates, got {}", grid.rank, c.len()))),
            None => mesh::default_load_node(grid, case),
        };
        let [ex, ey, ez] = grid.node_extents();
        if at[0] >= ex || at[1] >= ey || at[2] >= ez {
            return Err(value_err(format!("load {at:?} is outside the node grid")));
        }
        let force = force.unwrap_or_else(|| {
            let mut f = vec![0.0; grid.rank];
            f[1] = -1.0;
            f
        });
        let domain = DesignDomain::full(grid);
        let load = PointLoad { node: grid.node_index(at[0], at[1], at[2]), force };
        let bc = standard_bc_case(&domain, case, load).map_err(value_err)?;
        Ok(Problem { inner: topoforge::Problem::new(domain, bc, volfrac) })
    }

    /// Parses the JSON wire format.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Problem { inner: topoforge::Problem::from_str(text).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner.to_json()).expect("problem serializes")
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.grid().dims()
    }

    #[getter]
    fn volfrac(&self) -> f64 {
        self.inner.volfrac
    }

    #[getter]
    fn n_elements(&self) -> usize {
        self.inner.grid().n_elements()
    }

    /// Raises ValueError when supports leave rigid-body motion or there is
    /// no load.
    fn check_well_posed(&self) -> PyResult<()> {
        self.inner.check_well_posed().map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Problem(dims={:?}, volfrac={})", self.dims(), self.inner.volfrac)
    }
}

#[pyclass(module = "topoforge", frozen, get_all)]
struct SimpResult {
    densities: Vec<f64>,
    iterations: usize,
    converged: bool,
    /// Compliance of the design entering each iteration.
    history: Vec<f64>,
    compliance: f64,
}

#[pymethods]
impl SimpResult {
    fn __repr__(&self) -> String {
        format!(
            "SimpResult(iterations={}, converged={}, compliance={:.6})",
            self.iterations, self.converged, self.compliance
        )
    }
}

/// Runs SIMP. `init` is a starting field (for example a prediction); it is
/// clamped and smoothed with one density-filter pass first.
#[pyfunction]
#[pyo3(name = "simp", signature = (problem, rmin=1.5, penal=3.0, max_iters=200, change_tol=0.01, init=None))]
fn run_simp(
    py: Python<'_>,
    problem: &Problem,
    rmin: f64,
    penal: f64,
    max_iters: usize,
    change_tol: f64,
    init: Option<Vec<f64>>,
) -> PyResult<SimpResult> {
    let p = &problem.inner;
    p.check_well_posed().map_err(value_err)?;
    let grid = p.grid();
    let cfg = SimpConfig { volfrac: p.volfrac, filter_radius: rmin, max_iters, change_tol, ..SimpConfig::default() };
    let material = MaterialModel { penal, ..MaterialModel::default() };
    let start = match init {
        Some(v) if v.len() != grid.n_elements() => {
            return Err(value_err(format!("init has {} values, grid {grid} needs {}", v.len(), grid.n_elements())))
        }
        Some(v) => Some(simp::warm_start_field(&DensityField::new(grid, v), &p.domain, rmin)),
        None => None,
    };
    let res = py
        .detach(|| simp::optimize(&p.domain, &p.bc, &material, &cfg, start.as_ref()))
        .map_err(runtime_err)?;
    let compliance = res.history.last().copied().unwrap_or(f64::NAN);
    Ok(SimpResult {
        densities: res.densities.into_values(),
        iterations: res.iterations,
        converged: res.converged,
        history: res.history,
        compliance,
    })
}

/// Generates a SIMP dataset at `out` (plus `<out>.json`) and returns the
/// manifest as a JSON string.
#[pyfunction]
#[pyo3(signature = (nx, ny, out, count=100, seed=0, nz=None, test_count=None))]
fn generate_dataset(
    py: Python<'_>,
    nx: usize,
    ny: usize,
    out: PathBuf,
    count: usize,
    seed: u64,
    nz: Option<usize>,
    test_count: Option<usize>,
) -> PyResult<String> {
    let domain = DesignDomain::full(grid_of(nx, ny, nz)?);
    let cfg = GenerateConfig { count, seed, test_count, ..GenerateConfig::default() };
    let manifest = py.detach(|| -> Result<_, datagen::DatagenError> {
        let (ds, manifest) = datagen::generate_dataset(&domain, &cfg)?;
        datagen::save_dataset(&out, &ds, &manifest)?;
        Ok(manifest)
    });
    let manifest = manifest.map_err(runtime_err)?;
    Ok(serde_json::to_string(&manifest).expect("manifest serializes"))
}

/// A source or target network with its metadata. Loaded weights are never
/// modified; training returns through `train_source` / `fine_tune`.
#[pyclass(module = "topoforge", frozen)]
struct Model {
    inner: networks::Model,
}

#[pymethods]
impl Model {
    /// Fresh source network; `width_divisor` shrinks every layer.
    #[staticmethod]
    #[pyo3(signature = (nx, ny, nz=None, width_divisor=1, seed=0))]
    fn new_source(nx: usize, ny: usize, nz: Option<usize>, width_divisor: usize, seed: u64) -> PyResult<Self> {
        let plan = FilterPlan::default().scaled(width_divisor.max(1));
        let inner = networks::Model::new_source(grid_of(nx, ny, nz)?, &plan, seed).map_err(network_err)?;
        Ok(Model { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model { inner: networks::Model::load(&path).map_err(network_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(network_err)
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.meta.dims.clone()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.meta.kind {
            ModelKind::Source => "source",
            ModelKind::Target => "target",
        }
    }

    #[getter]
    fn params(&self) -> usize {
        self.inner.net.param_count()
    }

    #[getter]
    fn file_hash(&self) -> String {
        self.inner.file_hash()
    }

    /// Metadata embedded in the checkpoint, as JSON.
    fn meta_json(&self) -> String {
        serde_json::to_string(&self.inner.meta).expect("meta serializes")
    }

    /// The same source weights adapted to another grid.
    #[pyo3(signature = (nx, ny, nz=None))]
    fn for_grid(&self, nx: usize, ny: usize, nz: Option<usize>) -> PyResult<Model> {
        Ok(Model { inner: self.inner.for_grid(grid_of(nx, ny, nz)?).map_err(network_err)? })
    }

    /// Returns `(densities, binary)` for the problem. Source models adapt to
    /// the problem's grid when the pooling plan allows it.
    fn predict(&self, py: Python<'_>, problem: &Problem) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let p = &problem.inner;
        let pred = py
            .detach(|| self.inner.for_grid(p.grid()).and_then(|m| m.predict(p)))
            .map_err(network_err)?;
        Ok((pred.densities.into_values(), pred.binary.into_values()))
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={}, dims={:?}, params={})", self.kind(), self.dims(), self.params())
    }
}

/// Target network for a finer grid on top of a source checkpoint file.
#[pyfunction]
#[pyo3(signature = (source, nx, ny, nz=None, frozen=true, seed=0))]
fn build_target(source: PathBuf, nx: usize, ny: usize, nz: Option<usize>, frozen: bool, seed: u64) -> PyResult<Model> {
    let bytes = std::fs::read(&source).map_err(|e| PyIOError::new_err(format!("{}: {e}", source.display())))?;
    let freeze = if frozen { FreezePolicy::Frozen } else { FreezePolicy::Unfrozen };
    let inner = networks::build_target(&bytes, grid_of(nx, ny, nz)?, freeze, seed).map_err(network_err)?;
    Ok(Model { inner })
}

fn train_config(epochs: usize, batch_size: usize, lr: f64, seed: u64, augment_mirror: bool, frozen: bool) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        adam: AdamConfig { lr, ..AdamConfig::default() },
        seed,
        augment_mirror,
        freeze: if frozen { FreezePolicy::Frozen } else { FreezePolicy::Unfrozen },
        ..TrainConfig::default()
    }
}

fn run_training(
    py: Python<'_>,
    model: &Model,
    data: PathBuf,
    cfg: TrainConfig,
    source: bool,
) -> PyResult<(Model, String)> {
    let (ds, manifest) = datagen::load_dataset(&data).map_err(runtime_err)?;
    let mut trained = model.inner.clone();
    let history = py
        .detach(|| {
            let idx = &manifest.splits.train;
            if source {
                networks::train_source(&mut trained, &ds, Some(&manifest), idx, &cfg)
            } else {
                networks::fine_tune(&mut trained, &ds, Some(&manifest), idx, &cfg)
            }
        })
        .map_err(network_err)?;
    Ok((Model { inner: trained }, serde_json::to_string(&history).expect("history serializes")))
}

/// Trains a copy of a source model on a dataset's training split. Returns
/// `(trained_model, history_json)`.
#[pyfunction]
#[pyo3(signature = (model, data, epochs=100, batch_size=16, lr=1e-3, seed=0, augment_mirror=false))]
fn train_source(
    py: Python<'_>,
    model: &Model,
    data: PathBuf,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    augment_mirror: bool,
) -> PyResult<(Model, String)> {
    if model.inner.meta.kind != ModelKind::Source {
        return Err(value_err("train_source needs a source model"));
    }
    run_training(py, model, data, train_config(epochs, batch_size, lr, seed, augment_mirror, false), true)
}

/// Fine-tunes a copy of a target model; transferred layers stay frozen
/// when the model was built frozen.
#[pyfunction]
#[pyo3(signature = (model, data, epochs=100, batch_size=16, lr=1e-3, seed=0))]
fn fine_tune(
    py: Python<'_>,
    model: &Model,
    data: PathBuf,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> PyResult<(Model, String)> {
    let frozen = model.inner.meta.freeze == FreezePolicy::Frozen;
    run_training(py, model, data, train_config(epochs, batch_size, lr, seed, false, frozen), false)
}

fn check_lengths(pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> PyResult<()> {
    if pred.len() != truth.len() || mask.is_some_and(|m| m.len() != pred.len()) {
        return Err(value_err("fields and mask must have equal lengths"));
    }
    Ok(())
}

#[pyfunction]
#[pyo3(signature = (pred, truth, mask=None))]
fn mse(pred: Vec<f64>, truth: Vec<f64>, mask: Option<Vec<bool>>) -> PyResult<f64> {
    check_lengths(&pred, &truth, mask.as_deref())?;
    metrics::mse_metric(&pred, &truth, mask.as_deref()).map_err(value_err)
}

/// Share of elements on the same side of 0.5.
#[pyfunction]
#[pyo3(signature = (pred, truth, mask=None))]
fn binary_accuracy(pred: Vec<f64>, truth: Vec<f64>, mask: Option<Vec<bool>>) -> PyResult<f64> {
    check_lengths(&pred, &truth, mask.as_deref())?;
    metrics::binary_accuracy(&pred, &truth, mask.as_deref()).map_err(value_err)
}

/// Relative compliance error of the thresholded prediction against the
/// thresholded truth; None when the prediction is disconnected.
#[pyfunction]
fn compliance_error(problem: &Problem, pred: Vec<f64>, truth: Vec<f64>) -> PyResult<Option<f64>> {
    check_lengths(&pred, &truth, None)?;
    match metrics::compliance_error(&pred, &truth, &problem.inner, &MaterialModel::default()) {
        Ok(c) => Ok(Some(c)),
        Err(metrics::MetricsError::DisconnectedPrediction) => Ok(None),
        Err(e) => Err(value_err(e)),
    }
}

#[pymodule]
#[pyo3(name = "topoforge")]
fn topoforge_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Problem>()?;
    m.add_class::<SimpResult>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(run_simp, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(build_target, m)?)?;
    m.add_function(wrap_pyfunction!(train_source, m)?)?;
    m.add_function(wrap_pyfunction!(fine_tune, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(binary_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(compliance_error, m)?)?;
    Ok(())
}
