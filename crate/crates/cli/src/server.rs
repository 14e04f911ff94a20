//! JSON over HTTP: prediction, bounded SIMP, warm-start refinement and
//! model listing. Every body carries `"v": 1`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use topoforge::mesh::Grid;
use topoforge::networks::{Model, ModelKind, NetworkError};
use topoforge::problem::{Problem, ProblemError, ProblemJson, WIRE_VERSION};
use topoforge::simp::{self, MaterialModel, SimpConfig, SimpError};
use topoforge::DensityField;

use crate::args::ServeArgs;
use crate::error::CliError;
use crate::raster::{decode_f32_b64, encode_binary_b64, encode_f32_b64};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub model_dir: Option<PathBuf>,
    pub addr: SocketAddr,
    pub workers: usize,
    pub queue: usize,
    pub timeout: Duration,
    pub max_simp_2d: Grid,
    pub max_simp_3d: Grid,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            model_dir: None,
            addr: ([127, 0, 0, 1], 8080).into(),
            workers: default_workers(),
            queue: 8,
            timeout: Duration::from_secs(30),
            max_simp_2d: Grid::new_2d(240, 120),
            max_simp_3d: Grid::new_3d(40, 40, 40),
        }
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).saturating_sub(1).max(1)
}

impl ServerConfig {
    pub fn from_args(a: &ServeArgs) -> Self {
        ServerConfig {
            model_dir: a.model_dir.clone(),
            addr: a.addr,
            workers: a.workers.unwrap_or_else(default_workers).max(1),
            queue: a.queue,
            timeout: Duration::from_secs_f64(a.timeout.max(0.001)),
            max_simp_2d: a.max_simp_2d,
            max_simp_3d: a.max_simp_3d,
        }
    }
}

/// A loaded checkpoint.
pub struct ModelEntry {
    pub name: String,
    pub model: Arc<Model>,
    pub file_hash: String,
}

/// Immutable set of checkpoints. Swapped as a whole on reload.
#[derive(Default)]
pub struct Registry {
    pub entries: Vec<ModelEntry>,
    /// Source models rebuilt for other grids, keyed by entry and dims.
    adapted: Mutex<HashMap<(usize, Vec<usize>), Arc<Model>>>,
}

impl Registry {
    pub fn new(entries: Vec<ModelEntry>) -> Self {
        Registry { entries, adapted: Mutex::default() }
    }

    /// Loads every `.twgt` file in `dir`, sorted by name. Unreadable files
    /// are skipped with a warning.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "twgt"))
            .collect();
        paths.sort();
        let mut entries = Vec::new();
        for path in paths {
            match Model::load(&path) {
                Ok(model) => {
                    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    log::info!("loaded {name} ({:?}, dims {:?})", model.meta.kind, model.meta.dims);
                    entries.push(ModelEntry { name, file_hash: model.file_hash(), model: Arc::new(model) });
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        Ok(Registry::new(entries))
    }

    /// Exact grid match first, then a source model adapted to the grid.
    pub fn find(&self, grid: Grid) -> Option<(String, Arc<Model>)> {
        if let Some(e) = self.entries.iter().find(|e| e.model.grid() == grid) {
            return Some((e.name.clone(), e.model.clone()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.model.meta.kind != ModelKind::Source || e.model.grid().rank != grid.rank {
                continue;
            }
            let key = (i, grid.dims());
            let mut cache = self.adapted.lock().expect("cache lock");
            if let Some(m) = cache.get(&key) {
                return Some((e.name.clone(), m.clone()));
            }
            if let Ok(m) = e.model.for_grid(grid) {
                let m = Arc::new(m);
                cache.insert(key, m.clone());
                return Some((e.name.clone(), m));
            }
        }
        None
    }
}

pub struct AppState {
    pub config: ServerConfig,
    models: RwLock<Arc<Registry>>,
    simp_slots: Arc<Semaphore>,
    simp_admitted: AtomicUsize,
}

impl AppState {
    pub fn new(config: ServerConfig, registry: Registry) -> Arc<Self> {
        Arc::new(AppState {
            simp_slots: Arc::new(Semaphore::new(config.workers)),
            simp_admitted: AtomicUsize::new(0),
            models: RwLock::new(Arc::new(registry)),
            config,
        })
    }

    /// Current registry; requests keep the snapshot they started with.
    pub fn registry(&self) -> Arc<Registry> {
        self.models.read().expect("registry lock").clone()
    }

    /// Replaces all models at once.
    pub fn swap_registry(&self, registry: Registry) {
        *self.models.write().expect("registry lock") = Arc::new(registry);
    }
}

/// Error body: `{"v":1,"error":{"status":..,"kind":..,"message":..}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, kind, message: message.into() }
    }

    fn malformed(m: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "malformed", m)
    }

    fn ill_posed(m: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "ill_posed", m)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "v": WIRE_VERSION,
            "error": { "status": self.status.as_u16(), "kind": self.kind, "message": self.message }
        });
        (self.status, Json(body)).into_response()
    }
}

impl From<ProblemError> for ApiError {
    fn from(e: ProblemError) -> Self {
        match e {
            ProblemError::Malformed(_) | ProblemError::Version(_) => ApiError::malformed(e.to_string()),
            ProblemError::IllPosed(_) | ProblemError::Mesh(_) => ApiError::ill_posed(e.to_string()),
        }
    }
}

impl From<SimpError> for ApiError {
    fn from(e: SimpError) -> Self {
        match e {
            SimpError::Fea(_) | SimpError::BisectionFailure { .. } => ApiError::ill_posed(e.to_string()),
            SimpError::InvalidConfig(_) | SimpError::OutOfRangeDensity(_) => ApiError::malformed(e.to_string()),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl From<NetworkError> for ApiError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::WeightsNotLoaded => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_unavailable", e.to_string()),
            NetworkError::IncompatibleDims(_) => ApiError::ill_posed(e.to_string()),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ApiError::malformed(format!("invalid JSON: {e}")))?;
    match value.get("v") {
        Some(v) if v.as_u64() == Some(WIRE_VERSION as u64) => {}
        Some(v) => return Err(ApiError::malformed(format!("unsupported version {v}"))),
        None => return Err(ApiError::malformed("missing \"v\" field")),
    }
    serde_json::from_value(value).map_err(|e| ApiError::malformed(e.to_string()))
}

/// SIMP options accepted on the wire; unset fields keep solver defaults.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimpOptions {
    pub rmin: Option<f64>,
    pub penal: Option<f64>,
    pub max_iters: Option<usize>,
    pub change_tol: Option<f64>,
}

impl SimpOptions {
    fn build(&self, volfrac: f64) -> (SimpConfig, MaterialModel) {
        let d = SimpConfig::default();
        let cfg = SimpConfig {
            volfrac,
            filter_radius: self.rmin.unwrap_or(d.filter_radius),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            change_tol: self.change_tol.unwrap_or(d.change_tol),
            ..d
        };
        let material = MaterialModel { penal: self.penal.unwrap_or(3.0), ..MaterialModel::default() };
        (cfg, material)
    }
}

#[derive(Deserialize)]
struct SimpRequest {
    #[serde(flatten)]
    problem: ProblemJson,
    #[serde(default)]
    simp: SimpOptions,
}

#[derive(Deserialize)]
struct RefineRequest {
    problem: ProblemJson,
    /// Base64 f32 densities; predicted with the loaded model when absent.
    #[serde(default)]
    prediction: Option<String>,
    #[serde(default)]
    simp: SimpOptions,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/simp", post(simp_handler))
        .route("/refine", post(refine))
        .route("/models", get(models))
        .route("/models/reload", post(reload))
        .layer(middleware::from_fn(log_requests))
        .with_state(state)
}

async fn log_requests(req: Request, next: Next) -> Response {
    let (method, path) = (req.method().clone(), req.uri().path().to_owned());
    let started = Instant::now();
    let res = next.run(req).await;
    log::info!("{method} {path} -> {} in {:.1} ms", res.status().as_u16(), started.elapsed().as_secs_f64() * 1e3);
    res
}

/// Runs blocking work with the request timeout.
async fn blocking<T: Send + 'static>(
    state: &AppState,
    job: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let handle = tokio::task::spawn_blocking(job);
    match tokio::time::timeout(state.config.timeout, handle).await {
        Ok(Ok(result)) => result,
        Ok(Err(e)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
        Err(_) => Err(ApiError::new(
            StatusCode::GATEWAY_TIMEOUT,
            "timeout",
            format!("request exceeded {:.1} s", state.config.timeout.as_secs_f64()),
        )),
    }
}

/// SIMP jobs go through a bounded pool: `workers` run, `queue` wait, the
/// rest are refused with 429. A timed-out job keeps its slot until the
/// solver returns.
async fn pooled<T: Send + 'static>(
    state: &Arc<AppState>,
    job: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let limit = state.config.workers + state.config.queue;
    let admitted = state.simp_admitted.fetch_add(1, Ordering::SeqCst);
    if admitted >= limit {
        state.simp_admitted.fetch_sub(1, Ordering::SeqCst);
        return Err(ApiError::new(
            StatusCode::TOO_MANY_REQUESTS,
            "queue_full",
            format!("{limit} SIMP jobs already running or queued"),
        ));
    }
    let slots = state.simp_slots.clone();
    let st = state.clone();
    let work = async move {
        let _permit = slots.acquire_owned().await.expect("semaphore open");
        let result = tokio::task::spawn_blocking(job).await;
        st.simp_admitted.fetch_sub(1, Ordering::SeqCst);
        result
    };
    // The job is detached so a timeout does not release its slot early.
    let handle = tokio::spawn(work);
    match tokio::time::timeout(state.config.timeout, handle).await {
        Ok(Ok(Ok(result))) => result,
        Ok(Ok(Err(e))) | Ok(Err(e)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
        Err(_) => Err(ApiError::new(
            StatusCode::GATEWAY_TIMEOUT,
            "timeout",
            format!("request exceeded {:.1} s", state.config.timeout.as_secs_f64()),
        )),
    }
}

fn well_posed(json: &ProblemJson) -> Result<Problem, ApiError> {
    let problem = Problem::from_json(json)?;
    problem.check_well_posed()?;
    Ok(problem)
}

fn check_simp_cap(state: &AppState, grid: Grid) -> Result<(), ApiError> {
    let cap = if grid.rank == 2 { state.config.max_simp_2d } else { state.config.max_simp_3d };
    let fits = if grid.rank == 2 {
        // Either orientation of the capped rectangle is accepted.
        let (a, b) = (grid.nx.max(grid.ny), grid.nx.min(grid.ny));
        a <= cap.nx.max(cap.ny) && b <= cap.nx.min(cap.ny)
    } else {
        grid.nx <= cap.nx && grid.ny <= cap.ny && grid.nz <= cap.nz
    };
    if fits {
        Ok(())
    } else {
        Err(ApiError::ill_posed(format!(
            "grid {grid} exceeds the service SIMP cap {cap}; run large jobs with the `simp` command"
        )))
    }
}

fn model_for(state: &AppState, grid: Grid) -> Result<(String, Arc<Model>), ApiError> {
    state.registry().find(grid).ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "model_unavailable",
            format!("no loaded model serves grid {grid}"),
        )
    })
}

/// Server-side compute time, kept out of the body so identical requests
/// get identical bodies.
pub const ELAPSED_HEADER: &str = "x-elapsed-seconds";

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let json: ProblemJson = parse_body(&body)?;
    let problem = well_posed(&json)?;
    let (name, model) = model_for(&state, problem.grid())?;
    let started = Instant::now();
    let (pred, volume) = blocking(&state, move || {
        let pred = model.predict(&problem)?;
        let volume = pred.binary.volume_fraction(&problem.domain);
        Ok((pred, volume))
    })
    .await?;
    let seconds = started.elapsed().as_secs_f64();
    let body = json!({
        "v": WIRE_VERSION,
        "dims": json.dims,
        "model": name,
        "densities": encode_f32_b64(pred.densities.values()),
        "binary": encode_binary_b64(pred.binary.values()),
        "volume_fraction": volume,
        "metrics_available": false,
        "problem": json,
    });
    Ok(([(ELAPSED_HEADER, format!("{seconds:.6}"))], Json(body)))
}

fn simp_body(res: &topoforge::SimpResult, seconds: f64, dims: &[usize]) -> Value {
    json!({
        "v": WIRE_VERSION,
        "dims": dims,
        "densities": encode_f32_b64(res.densities.values()),
        "binary": encode_binary_b64(res.densities.values()),
        "iterations": res.iterations,
        "converged": res.converged,
        "compliance": res.history.last(),
        "history": res.history,
        "seconds": seconds,
    })
}

async fn simp_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: SimpRequest = parse_body(&body)?;
    let problem = well_posed(&req.problem)?;
    check_simp_cap(&state, problem.grid())?;
    let (cfg, material) = req.simp.build(problem.volfrac);
    cfg.validate().map_err(|e| ApiError::malformed(e.to_string()))?;
    let started = Instant::now();
    let res = pooled(&state, move || Ok(simp::optimize(&problem.domain, &problem.bc, &material, &cfg, None)?)).await?;
    Ok(Json(simp_body(&res, started.elapsed().as_secs_f64(), &req.problem.dims)))
}

async fn refine(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: RefineRequest = parse_body(&body)?;
    let problem = well_posed(&req.problem)?;
    let grid = problem.grid();
    check_simp_cap(&state, grid)?;
    let (cfg, material) = req.simp.build(problem.volfrac);
    cfg.validate().map_err(|e| ApiError::malformed(e.to_string()))?;
    let started = Instant::now();
    let (init, start) = match &req.prediction {
        Some(text) => {
            let values = decode_f32_b64(text).map_err(|m| ApiError::malformed(format!("prediction {m}")))?;
            if values.len() != grid.n_elements() {
                return Err(ApiError::malformed(format!(
                    "prediction has {} values, grid {grid} needs {}",
                    values.len(),
                    grid.n_elements()
                )));
            }
            (DensityField::new(grid, values), "prediction".to_string())
        }
        None => {
            let (name, model) = model_for(&state, grid)?;
            let p = problem.clone();
            let pred = blocking(&state, move || Ok(model.predict(&p)?)).await?;
            (pred.densities, name)
        }
    };
    let res = pooled(&state, move || {
        let warm = simp::warm_start_field(&init, &problem.domain, cfg.filter_radius);
        Ok(simp::optimize(&problem.domain, &problem.bc, &material, &cfg, Some(&warm))?)
    })
    .await?;
    let mut body = simp_body(&res, started.elapsed().as_secs_f64(), &req.problem.dims);
    body["start"] = json!(start);
    Ok(Json(body))
}

fn models_body(state: &AppState) -> Value {
    let registry = state.registry();
    let models: Vec<Value> = registry
        .entries
        .iter()
        .map(|e| {
            json!({
                "name": e.name,
                "kind": e.model.meta.kind,
                "dims": e.model.meta.dims,
                "params": e.model.net.param_count(),
                "file_hash": e.file_hash,
                "source_dims": e.model.meta.transfer.as_ref().map(|t| t.source_dims.clone()),
            })
        })
        .collect();
    json!({ "v": WIRE_VERSION, "model_dir": state.config.model_dir, "models": models })
}

async fn models(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(models_body(&state))
}

/// Rescans the model directory and swaps the registry atomically.
async fn reload(State(state): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    let dir = state
        .config
        .model_dir
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_unavailable", "no model directory configured"))?;
    let registry = blocking(&state, move || {
        Registry::load_dir(&dir).map_err(|e| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_unavailable", format!("{}: {e}", dir.display()))
        })
    })
    .await?;
    state.swap_registry(registry);
    Ok(Json(models_body(&state)))
}

/// Initial registry: the model directory when it exists, else empty.
pub fn initial_registry(config: &ServerConfig) -> Registry {
    match &config.model_dir {
        Some(dir) => Registry::load_dir(dir).unwrap_or_else(|e| {
            log::warn!("model directory {}: {e}; serving without models", dir.display());
            Registry::default()
        }),
        None => {
            log::warn!("no model directory; /predict will answer 503");
            Registry::default()
        }
    }
}

pub async fn serve(config: ServerConfig) -> Result<(), CliError> {
    let state = AppState::new(config.clone(), initial_registry(&config));
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

pub fn run_blocking(config: ServerConfig) -> Result<(), CliError> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(serve(config))
}
