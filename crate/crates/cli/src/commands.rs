use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use topoforge::datagen::{self, GenerateConfig, SamplerConfig};
use topoforge::mesh::{standard_bc_case, BcCase, DesignDomain, Grid, PointLoad};
use topoforge::metrics::{self, EvalReport};
use topoforge::networks::{self, FilterPlan, FreezePolicy, Model, TrainConfig, TrainManifest};
use topoforge::nn::AdamConfig;
use topoforge::problem::Problem;
use topoforge::simp::{self, MaterialModel, SimpConfig};
use topoforge::{json_hash, DensityField};

use crate::args::*;
use crate::error::CliError;
use crate::raster::{read_raster, write_raster};

/// Runs a parsed command. The returned JSON summary is printed on stdout.
pub fn run(cli: Cli) -> Result<Value, CliError> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Simp(a) => simp_cmd(a),
        Command::TrainSource(a) => train_source(a),
        Command::TrainTarget(a) => train_target(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Refine(a) => refine(a),
        Command::Serve(a) => {
            crate::server::run_blocking(crate::server::ServerConfig::from_args(&a))?;
            Ok(json!({ "v": 1, "status": "stopped" }))
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::File { path: path.display().to_string(), source })
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|source| CliError::File { path: path.display().to_string(), source })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}


pub fn build_problem(args: &ProblemArgs) -> Result<Problem, CliError> {
    if let Some(path) = &args.problem {
        return Ok(Problem::from_str(&read_text(path)?)?);
    }
    let grid = args
        .dims
        .ok_or_else(|| CliError::Usage("either --problem or --dims is required".into()))?;
    let case = args.case.unwrap_or(BcCase::Cantilever);
    let domain = DesignDomain::full(grid);
    let at = match &args.load {
        Some(c) if c.0.len() == grid.rank => [c.0[0], c.0[1], c.0.get(2).copied().unwrap_or(0)],
        Some(c) => return Err(CliError::Usage(format!("--load needs {} coordinates, got {}", grid.rank, c.0.len()))),
        None => topoforge::mesh::default_load_node(grid, case),
    };
    let [ex, ey, ez] = grid.node_extents();
    if at[0] >= ex || at[1] >= ey || at[2] >= ez {
        return Err(CliError::Usage(format!("--load {at:?} is outside the node grid")));
    }
    let force = match &args.force {
        Some(f) if f.0.len() == grid.rank => f.0.clone(),
        Some(f) => return Err(CliError::Usage(format!("--force needs {} components, got {}", grid.rank, f.0.len()))),
        None => {
            let mut f = vec![0.0; grid.rank];
            f[1] = -1.0;
            f
        }
    };
    let load = PointLoad { node: grid.node_index(at[0], at[1], at[2]), force };
    let bc = standard_bc_case(&domain, case, load)?;
    Ok(Problem::new(domain, bc, args.volfrac))
}

fn simp_config(opts: &SimpOpts, volfrac: f64) -> (SimpConfig, MaterialModel) {
    let cfg = SimpConfig {
        volfrac,
        filter_radius: opts.rmin,
        max_iters: opts.max_iters,
        change_tol: opts.change_tol,
        ..SimpConfig::default()
    };
    let material = MaterialModel { penal: opts.penal, ..MaterialModel::default() };
    (cfg, material)
}

fn maybe_pgm(enabled: bool, prefix: &Path, grid: Grid, values: &[f64]) -> Result<Option<PathBuf>, CliError> {
    if !enabled {
        return Ok(None);
    }
    let path = with_suffix(prefix, ".pgm");
    metrics::write_pgm(&path, grid, values)?;
    Ok(Some(path))
}

fn simp_report(res: &topoforge::SimpResult) -> Value {
    json!({
        "iterations": res.iterations,
        "converged": res.converged,
        "compliance": res.history.last(),
        "history": res.records,
    })
}

fn gen(a: GenArgs) -> Result<Value, CliError> {
    let domain = match (&a.domain, a.dims) {
        (Some(path), _) => Problem::from_str(&read_text(path)?)?.domain,
        (None, Some(grid)) => DesignDomain::full(grid),
        (None, None) => return Err(CliError::Usage("--dims or --domain is required".into())),
    };
    let cfg = match &a.config {
        Some(path) => serde_json::from_str::<GenerateConfig>(&read_text(path)?)?,
        None => {
            let (simp, material) = simp_config(&a.simp, a.volfrac);
            GenerateConfig {
                count: a.count,
                seed: a.seed,
                test_fraction: 0.2,
                test_count: a.test_count,
                sampler: SamplerConfig {
                    cases: a.cases.clone(),
                    volfrac: a.volfrac,
                    normalize_forces: a.normalize_forces,
                    ..SamplerConfig::default()
                },
                simp,
                material,
            }
        }
    };
    let started = Instant::now();
    let (data, manifest) = datagen::generate_dataset(&domain, &cfg)?;
    datagen::save_dataset(&a.out, &data, &manifest)?;
    Ok(json!({
        "v": 1,
        "out": a.out,
        "manifest": datagen::manifest_path(&a.out),
        "count": data.samples.len(),
        "train": manifest.splits.train.len(),
        "test": manifest.splits.test.len(),
        "failures": manifest.failures.len(),
        "duplicates": manifest.duplicates.len(),
        "seed": manifest.base_seed,
        "config_hash": manifest.config_hash,
        "seconds": started.elapsed().as_secs_f64(),
    }))
}

fn simp_cmd(a: SimpArgs) -> Result<Value, CliError> {
    let problem = build_problem(&a.problem)?;
    problem.check_well_posed()?;
    let (cfg, material) = simp_config(&a.simp, problem.volfrac);
    let started = Instant::now();
    let res = simp::optimize(&problem.domain, &problem.bc, &material, &cfg, None)?;
    let seconds = started.elapsed().as_secs_f64();
    let densities = res.densities.values();
    let raster = with_suffix(&a.out, ".bin");
    write_raster(&raster, densities)?;
    let job = json!({ "problem": problem.to_json(), "config": cfg, "material": material });
    let mut summary = json!({
        "v": 1,
        "dims": problem.grid().dims(),
        "densities": raster,
        "config_hash": json_hash(&job),
        "seed": Value::Null,
        "seconds": seconds,
    });
    merge(&mut summary, simp_report(&res));
    let mut record = summary.clone();
    merge(&mut record, job);
    write_json(&with_suffix(&a.out, ".json"), &record)?;
    if let Some(p) = maybe_pgm(a.pgm, &a.out, problem.grid(), densities)? {
        summary["pgm"] = json!(p);
    }
    summary.as_object_mut().expect("object").remove("history");
    Ok(summary)
}

fn merge(into: &mut Value, from: Value) {
    if let (Some(a), Value::Object(b)) = (into.as_object_mut(), from) {
        a.extend(b);
    }
}

fn train_config(t: &TrainOpts) -> TrainConfig {
    TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        adam: AdamConfig { lr: t.lr, ..AdamConfig::default() },
        seed: t.seed,
        patience: t.patience,
        validation_fraction: t.validation_fraction,
        freeze: FreezePolicy::Frozen,
        target_loss: None,
        augment_mirror: t.augment_mirror,
    }
}

fn training_indices(t: &TrainOpts, manifest: &datagen::DatasetManifest) -> Vec<usize> {
    if t.all_samples {
        (0..manifest.count).collect()
    } else {
        manifest.splits.train.clone()
    }
}

fn finish_training(
    model: &Model,
    out: &Path,
    manifest: &datagen::DatasetManifest,
    cfg: TrainConfig,
    history: networks::TrainHistory,
) -> Result<Value, CliError> {
    model.save(out)?;
    let record = TrainManifest {
        v: 1,
        kind: model.meta.kind,
        dataset_hash: manifest.config_hash.clone(),
        config: cfg,
        history,
        weights_hash: model.file_hash(),
    };
    let value = serde_json::to_value(&record)?;
    write_json(&with_suffix(out, ".json"), &value)?;
    Ok(json!({
        "v": 1,
        "out": out,
        "kind": record.kind,
        "dims": model.meta.dims,
        "params": model.net.param_count(),
        "best_epoch": record.history.best_epoch,
        "best_loss": record.history.best_loss,
        "epochs_run": record.history.train_loss.len(),
        "seconds": record.history.seconds,
        "seed": record.config.seed,
        "config_hash": json_hash(&record.config),
        "weights_hash": record.weights_hash,
    }))
}

fn train_source(a: TrainSourceArgs) -> Result<Value, CliError> {
    if a.width_divisor == 0 {
        return Err(CliError::Usage("--width-divisor must be >= 1".into()));
    }
    let (data, manifest) = datagen::load_dataset(&a.data)?;
    let plan = FilterPlan::default().scaled(a.width_divisor);
    let mut model = Model::new_source(data.grid, &plan, a.train.seed)?;
    let cfg = train_config(&a.train);
    let idx = training_indices(&a.train, &manifest);
    let history = networks::train_source(&mut model, &data, Some(&manifest), &idx, &cfg)?;
    finish_training(&model, &a.out, &manifest, cfg, history)
}

fn train_target(a: TrainTargetArgs) -> Result<Value, CliError> {
    let source = std::fs::read(&a.source)
        .map_err(|source| CliError::File { path: a.source.display().to_string(), source })?;
    let (data, manifest) = datagen::load_dataset(&a.data)?;
    let freeze = match a.freeze {
        FreezeArg::Frozen => FreezePolicy::Frozen,
        FreezeArg::Unfrozen => FreezePolicy::Unfrozen,
    };
    let mut model = networks::build_target(&source, data.grid, freeze, a.train.seed)?;
    if a.scratch {
        model = networks::build_scratch(&model, a.train.seed);
    }
    let mut cfg = train_config(&a.train);
    cfg.freeze = model.meta.freeze;
    let idx = training_indices(&a.train, &manifest);
    let history = networks::fine_tune(&mut model, &data, Some(&manifest), &idx, &cfg)?;
    finish_training(&model, &a.out, &manifest, cfg, history)
}

/// Loads a checkpoint and adapts source models to the problem grid.
pub fn model_for(path: &Path, grid: Grid) -> Result<Model, CliError> {
    let bytes = std::fs::read(path).map_err(|source| CliError::File { path: path.display().to_string(), source })?;
    let model = Model::from_bytes(&bytes)?;
    Ok(model.for_grid(grid)?)
}

fn predict(a: PredictArgs) -> Result<Value, CliError> {
    let problem = build_problem(&a.problem)?;
    let model = model_for(&a.model, problem.grid())?;
    let started = Instant::now();
    let pred = model.predict(&problem)?;
    let seconds = started.elapsed().as_secs_f64();
    let raw = with_suffix(&a.out, ".bin");
    let binary = with_suffix(&a.out, ".binary.bin");
    write_raster(&raw, pred.densities.values())?;
    write_raster(&binary, pred.binary.values())?;
    let mut summary = json!({
        "v": 1,
        "dims": problem.grid().dims(),
        "densities": raw,
        "binary": binary,
        "volume_fraction": pred.binary.volume_fraction(&problem.domain),
        "model_hash": model.file_hash(),
        "seed": model.meta.seed,
        "config_hash": json_hash(&problem.to_json()),
        "seconds": seconds,
    });
    write_json(&with_suffix(&a.out, ".json"), &summary)?;
    if let Some(p) = maybe_pgm(a.pgm, &a.out, problem.grid(), pred.densities.values())? {
        summary["pgm"] = json!(p);
    }
    Ok(summary)
}

fn eval(a: EvalArgs) -> Result<Value, CliError> {
    let material = MaterialModel::default();
    let report = match (&a.pred, &a.model) {
        (Some(pred_path), _) => {
            let truth_path = a.truth.as_ref().ok_or_else(|| CliError::Usage("--truth is required".into()))?;
            let pred = read_raster(pred_path)?;
            let truth = read_raster(truth_path)?;
            let problem = a.problem.as_ref().map(|p| read_text(p).and_then(|t| Ok(Problem::from_str(&t)?))).transpose()?;
            let used = if a.no_compliance { None } else { problem.as_ref() };
            let mut sample = metrics::evaluate_sample(0, &pred, &truth, used, &material)?;
            if a.no_compliance {
                // Still restrict to the active mask when a problem is given.
                if let Some(p) = &problem {
                    let mask = Some(p.domain.mask());
                    sample.mse = metrics::mse_metric(&pred, &truth, mask)?;
                    sample.ba = metrics::binary_accuracy(&pred, &truth, mask)?;
                }
            }
            if let Some(path) = &a.diff_pgm {
                let grid = problem
                    .as_ref()
                    .map(|p| p.grid())
                    .ok_or_else(|| CliError::Usage("--diff-pgm needs --problem for the grid".into()))?;
                let diff = metrics::symmetric_difference(&pred, &truth, problem.as_ref().map(|p| p.domain.mask()))?;
                metrics::write_pgm(path, grid, &diff)?;
            }
            EvalReport::from_samples(vec![sample])?
        }
        (None, Some(model_path)) => {
            let data_path = a.data.as_ref().ok_or_else(|| CliError::Usage("--data is required".into()))?;
            let (data, manifest) = datagen::load_dataset(data_path)?;
            let model = model_for(model_path, data.grid)?;
            let domain = manifest.domain()?;
            let idx = &manifest.splits.test;
            let started = Instant::now();
            let preds = networks::predict_dataset(&model, &data, Some(&manifest), idx)?;
            let per = started.elapsed().as_secs_f64() / idx.len().max(1) as f64;
            let mut samples = Vec::with_capacity(idx.len());
            for (pred, &i) in preds.iter().zip(idx) {
                let truth: Vec<f64> = data.samples[i].target.iter().map(|&v| v as f64).collect();
                let problem = manifest.problem(&domain, i)?;
                let pred = DensityField::new(data.grid, pred.clone()).clamped_to(&domain).into_values();
                let mut s = if a.no_compliance {
                    let mask = Some(domain.mask());
                    metrics::SampleEval {
                        index: i,
                        mse: metrics::mse_metric(&pred, &truth, mask)?,
                        ba: metrics::binary_accuracy(&pred, &truth, mask)?,
                        compliance_error: None,
                        disconnected: false,
                        seconds: None,
                    }
                } else {
                    metrics::evaluate_sample(i, &pred, &truth, Some(&problem), &material)?
                };
                s.seconds = Some(per);
                samples.push(s);
            }
            EvalReport::from_samples(samples)?
        }
        (None, None) => return Err(CliError::Usage("give --pred/--truth or --model/--data".into())),
    };
    let value = serde_json::to_value(&report)?;
    match &a.out {
        Some(path) => {
            write_json(path, &value)?;
            Ok(json!({ "v": 1, "out": path, "count": report.count, "mse": report.mse, "ba": report.ba,
                       "compliance_error": report.compliance_error }))
        }
        None => Ok(value),
    }
}

fn refine(a: RefineArgs) -> Result<Value, CliError> {
    let problem = build_problem(&a.problem)?;
    problem.check_well_posed()?;
    let grid = problem.grid();
    let (init, source) = match (&a.init, &a.model) {
        (Some(path), _) => {
            let values = read_raster(path)?;
            if values.len() != grid.n_elements() {
                return Err(CliError::Usage(format!(
                    "{} has {} values, grid {grid} needs {}",
                    path.display(),
                    values.len(),
                    grid.n_elements()
                )));
            }
            (DensityField::new(grid, values), json!(path))
        }
        (None, Some(model_path)) => {
            let model = model_for(model_path, grid)?;
            (model.predict(&problem)?.densities, json!(model.file_hash()))
        }
        (None, None) => return Err(CliError::Usage("--init or --model is required".into())),
    };
    let (cfg, material) = simp_config(&a.simp, problem.volfrac);
    let started = Instant::now();
    let start = simp::warm_start_field(&init, &problem.domain, cfg.filter_radius);
    let res = simp::optimize(&problem.domain, &problem.bc, &material, &cfg, Some(&start))?;
    let seconds = started.elapsed().as_secs_f64();
    let raster = with_suffix(&a.out, ".bin");
    write_raster(&raster, res.densities.values())?;
    let job = json!({ "problem": problem.to_json(), "config": cfg, "material": material, "start": source });
    let mut summary = json!({
        "v": 1,
        "dims": grid.dims(),
        "densities": raster,
        "config_hash": json_hash(&job),
        "seed": Value::Null,
        "seconds": seconds,
    });
    merge(&mut summary, simp_report(&res));
    let mut record = summary.clone();
    merge(&mut record, job);
    write_json(&with_suffix(&a.out, ".json"), &record)?;
    if let Some(p) = maybe_pgm(a.pgm, &a.out, grid, res.densities.values())? {
        summary["pgm"] = json!(p);
    }
    summary.as_object_mut().expect("object").remove("history");
    Ok(summary)
}
