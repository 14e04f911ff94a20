//! Source and target encoder-decoder networks, transfer surgery, training
//! and prediction.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{self, channel_count, encode_channels, Dataset};
use crate::field::DensityField;
use crate::mesh::Grid;
use crate::nn::{
    adam_step, decode_weights, encode_weights, mse_loss, AdamConfig, AdamState, Conv, ConvTranspose,
    Layer, LayerGrad, MaxPool, Mode, NnError, Sequential, Tensor,
};
use crate::problem::Problem;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid filter plan: {0}")]
    ShapePlanInvalid(String),
    #[error("transferred parameters do not match the source checkpoint")]
    ChecksumMismatch,
    #[error("incompatible dimensions: {0}")]
    IncompatibleDims(String),
    #[error("no model weights loaded")]
    WeightsNotLoaded,
    #[error("dataset does not match the network: {0}")]
    DatasetMismatch(String),
    #[error("bad model metadata: {0}")]
    Metadata(String),
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Datagen(#[from] datagen::DatagenError),
}

impl From<std::io::Error> for NetworkError {
    fn from(e: std::io::Error) -> Self {
        NetworkError::Nn(NnError::Io(e))
    }
}

/// Filter counts for every parameterised layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterPlan {
    /// Eight encoder convolutions, pooled after the 2nd, 4th and 6th.
    pub encoder: Vec<usize>,
    /// Three stride-2 transposed convolutions.
    pub transposes: Vec<usize>,
    /// Seven decoder convolutions: three after the first transpose, two
    /// after each of the others.
    pub decoder: Vec<usize>,
    /// Target head: transposed convolution width, then three convolutions,
    /// the last with one output channel.
    pub target_head: Vec<usize>,
    pub kernel: usize,
}

impl Default for FilterPlan {
    fn default() -> Self {
        FilterPlan {
            encoder: vec![16, 16, 32, 32, 64, 64, 64, 64],
            transposes: vec![64, 32, 16],
            decoder: vec![64, 64, 64, 32, 32, 16, 16],
            target_head: vec![16, 16, 1],
            kernel: 3,
        }
    }
}

impl FilterPlan {
    /// Every width divided by `factor` (at least 1; the head's last stays 1).
    pub fn scaled(&self, factor: usize) -> Self {
        let s = |v: &Vec<usize>| v.iter().map(|&c| (c / factor).max(1)).collect();
        let mut head: Vec<usize> = s(&self.target_head);
        if let Some(last) = head.last_mut() {
            *last = 1;
        }
        FilterPlan {
            encoder: s(&self.encoder),
            transposes: s(&self.transposes),
            decoder: s(&self.decoder),
            target_head: head,
            kernel: self.kernel,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::ShapePlanInvalid(m));
        if self.encoder.len() != 8 {
            return bad(format!("encoder needs 8 widths, got {}", self.encoder.len()));
        }
        if self.transposes.len() != 3 {
            return bad(format!("decoder needs 3 transposed widths, got {}", self.transposes.len()));
        }
        if self.decoder.len() != 7 {
            return bad(format!("decoder needs 7 conv widths, got {}", self.decoder.len()));
        }
        if self.target_head.len() != 3 || self.target_head[2] != 1 {
            return bad(format!("target head must be 3 widths ending in 1, got {:?}", self.target_head));
        }
        let all = self.encoder.iter().chain(&self.transposes).chain(&self.decoder).chain(&self.target_head);
        if all.copied().any(|c| c == 0) {
            return bad("zero-width layer".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        Ok(())
    }
}

/// Spatial extents `[d, h, w]` of a grid; `d == 1` in 2D.
pub fn spatial_dims(grid: Grid) -> [usize; 3] {
    [grid.nz, grid.ny, grid.nx]
}

/// Axes of at least this extent are pooled three times.
pub const POOL_MIN_EXTENT: usize = 16;

/// Which axes get pooled and the padded extents that make three 2x pools
/// exact.
pub fn pool_plan(dims: [usize; 3]) -> ([bool; 3], [usize; 3]) {
    let pooled = dims.map(|d| d >= POOL_MIN_EXTENT);
    let mut padded = dims;
    for a in 0..3 {
        if pooled[a] {
            padded[a] = dims[a].div_ceil(8) * 8;
        }
    }
    (pooled, padded)
}

fn kernel_for(dims: [usize; 3], k: usize) -> [usize; 3] {
    dims.map(|d| if d == 1 { 1 } else { k })
}

/// Index of the 1-channel output convolution of a source network.
pub fn source_head_index(net: &Sequential) -> Option<usize> {
    net.layers.iter().rposition(|l| matches!(l, Layer::Conv(_)))
}

/// Encoder-decoder mapping `1 + 2*rank` input channels to one density
/// channel at the same spatial extents.
pub fn build_source(grid: Grid, plan: &FilterPlan) -> Result<Sequential, NetworkError> {
    plan.validate()?;
    let rank = grid.rank;
    let dims = spatial_dims(grid);
    let (pooled, padded) = pool_plan(dims);
    let kernel = kernel_for(dims, plan.kernel);
    let two = pooled.map(|p| if p { 2 } else { 1 });
    let mut net = Sequential::new(channel_count(rank), dims, rank);
    if padded != dims {
        net.push(Layer::Pad(padded));
    }
    let mut ch = channel_count(rank);
    let conv = |net: &mut Sequential, ch: &mut usize, out: usize| {
        net.push(Layer::Conv(Conv::same(*ch, out, kernel)));
        net.push(Layer::Relu);
        *ch = out;
    };
    for (i, &w) in plan.encoder.iter().enumerate() {
        conv(&mut net, &mut ch, w);
        if i % 2 == 1 && i < 6 {
            net.push(Layer::MaxPool(MaxPool { kernel: two }));
        }
    }
    let stages: [&[usize]; 3] = [&plan.decoder[..3], &plan.decoder[3..5], &plan.decoder[5..]];
    for (t, convs) in plan.transposes.iter().zip(stages) {
        net.push(Layer::ConvTranspose(ConvTranspose::new(ch, *t, two, two, [0; 3])));
        net.push(Layer::Relu);
        ch = *t;
        for &w in convs {
            conv(&mut net, &mut ch, w);
        }
    }
    net.push(Layer::Conv(Conv::same(ch, 1, kernel)));
    net.push(Layer::Clamp);
    if padded != dims {
        net.push(Layer::Crop(dims));
    }
    let (out_ch, out_dims) = net.output_dims()?;
    if out_ch != 1 || out_dims != dims {
        return Err(NetworkError::ShapePlanInvalid(format!(
            "network maps {dims:?} to {out_ch} x {out_dims:?}"
        )));
    }
    Ok(net)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Transferred layers keep their source values.
    #[default]
    Frozen,
    /// Every layer is trained.
    Unfrozen,
}

/// Provenance of transferred layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferInfo {
    /// SHA-256 footer of the source weight file.
    pub source_file_hash: String,
    pub source_dims: Vec<usize>,
    /// Layers `[start, end)` of the target copied from the source.
    pub start: usize,
    pub end: usize,
    /// Parameter hash of the copied layers at build time.
    pub param_hash: String,
}

/// Metadata stored in the weight file next to the layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub v: u32,
    pub kind: ModelKind,
    /// Input grid in wire order `[ny, nx(, nz)]`.
    pub dims: Vec<usize>,
    pub plan: FilterPlan,
    /// Force channels are divided by this before entering the network.
    pub force_scale: f64,
    /// Force channels are divided by the largest nodal force norm, so only
    /// directions and relative magnitudes reach the network. Compliance
    /// optimal layouts do not depend on the overall load scale.
    #[serde(default)]
    pub unit_loads: bool,
    #[serde(default)]
    pub freeze: FreezePolicy,
    #[serde(default)]
    pub transfer: Option<TransferInfo>,
    #[serde(default)]
    pub seed: u64,
}

/// A network with the metadata needed to feed it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub net: Sequential,
    pub meta: ModelMeta,
}

/// Raw and 0.5-thresholded prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub densities: DensityField,
    pub binary: DensityField,
}

impl Model {
    pub fn new_source(grid: Grid, plan: &FilterPlan, seed: u64) -> Result<Self, NetworkError> {
        let mut net = build_source(grid, plan)?;
        net.init(&mut ChaCha8Rng::seed_from_u64(seed));
        let meta = ModelMeta {
            v: 1,
            kind: ModelKind::Source,
            dims: grid.dims(),
            plan: plan.clone(),
            force_scale: 1.0,
            unit_loads: true,
            freeze: FreezePolicy::Unfrozen,
            transfer: None,
            seed,
        };
        Ok(Model { net, meta })
    }

    pub fn grid(&self) -> Grid {
        Grid::from_dims(&self.meta.dims).expect("validated at construction")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_weights(&self.net, &serde_json::to_value(&self.meta).expect("meta serializes"))
    }

    /// Decodes a checkpoint; the footer checksum and, for target models,
    /// the transferred-parameter hash are verified.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetworkError> {
        let (net, meta) = decode_weights(bytes)?;
        let meta: ModelMeta =
            serde_json::from_value(meta).map_err(|e| NetworkError::Metadata(e.to_string()))?;
        let grid = Grid::from_dims(&meta.dims).map_err(|e| NetworkError::Metadata(e.to_string()))?;
        if spatial_dims(grid) != net.in_dims || grid.rank != net.rank {
            return Err(NetworkError::Metadata("metadata dims disagree with the network".into()));
        }
        if let (Some(t), FreezePolicy::Frozen) = (&meta.transfer, meta.freeze) {
            if t.end > net.layers.len() || net.param_hash(t.start..t.end) != t.param_hash {
                return Err(NetworkError::ChecksumMismatch);
            }
        }
        Ok(Model { net, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        let tmp = path.with_extension("twgt.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        Model::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 footer of the serialized checkpoint.
    pub fn file_hash(&self) -> String {
        let bytes = self.to_bytes();
        crate::nn::hex_digest(&bytes[bytes.len() - 32..])
    }

    /// Same source weights rebuilt for another grid. Only the padding and
    /// crop extents change, so the pooling plan must agree.
    pub fn for_grid(&self, grid: Grid) -> Result<Model, NetworkError> {
        if grid == self.grid() {
            return Ok(self.clone());
        }
        if self.meta.kind != ModelKind::Source || grid.rank != self.grid().rank {
            return Err(NetworkError::IncompatibleDims(format!(
                "a {:?} model for {} cannot run on {grid}",
                self.meta.kind,
                self.grid()
            )));
        }
        let old = pool_plan(spatial_dims(self.grid())).0;
        let dims = spatial_dims(grid);
        if pool_plan(dims).0 != old || kernel_for(dims, 3) != kernel_for(self.net.in_dims, 3) {
            return Err(NetworkError::IncompatibleDims(format!(
                "pooling plan for {grid} differs from the trained {}",
                self.grid()
            )));
        }
        let mut rebuilt = build_source(grid, &self.meta.plan)?;
        let params = self.net.layers.iter().filter(|l| l.params().is_some());
        let slots = rebuilt.layers.iter_mut().filter(|l| l.params().is_some());
        for (src, dst) in params.zip(slots) {
            *dst = src.clone();
        }
        let meta = ModelMeta { dims: grid.dims(), ..self.meta.clone() };
        Ok(Model { net: rebuilt, meta })
    }

    /// Network input for a problem, shaped `[1, C, (D,) H, W]`.
    pub fn encode(&self, problem: &Problem) -> Result<Tensor, NetworkError> {
        if problem.grid() != self.grid() {
            return Err(NetworkError::IncompatibleDims(format!(
                "model expects {}, problem is {}",
                self.grid(),
                problem.grid()
            )));
        }
        let mut x = encode_channels(&problem.domain, &problem.bc, problem.volfrac, self.meta.force_scale)?;
        if self.meta.unit_loads {
            unit_force_channels(&mut x, problem.grid().rank, problem.grid().n_elements());
        }
        Ok(Tensor::new(self.net.input_shape(1), x)?)
    }

    pub fn predict(&self, problem: &Problem) -> Result<Prediction, NetworkError> {
        let y = self.net.forward(&self.encode(problem)?)?;
        let mut field = DensityField::new(problem.grid(), y.into_data());
        field = field.clamped_to(&problem.domain);
        let binary = field.thresholded();
        Ok(Prediction { densities: field, binary })
    }
}

/// Prediction with an optional model, for callers that may not have one.
pub fn predict(model: Option<&Model>, problem: &Problem) -> Result<Prediction, NetworkError> {
    model.ok_or(NetworkError::WeightsNotLoaded)?.predict(problem)
}

/// Target network for `hi` grids built on a source checkpoint: a front
/// downsampler to the source grid, the source layers without the output
/// convolution, then a transposed convolution reaching at least `hi` and
/// three convolutions. Output is cropped to `hi`.
pub fn build_target(
    source_bytes: &[u8],
    hi: Grid,
    freeze: FreezePolicy,
    seed: u64,
) -> Result<Model, NetworkError> {
    let source = Model::from_bytes(source_bytes).map_err(|e| match e {
        NetworkError::Nn(NnError::ChecksumMismatch) => NetworkError::ChecksumMismatch,
        other => other,
    })?;
    if source.meta.kind != ModelKind::Source {
        return Err(NetworkError::Metadata("transfer needs a source checkpoint".into()));
    }
    let lo = source.grid();
    if hi.rank != lo.rank {
        return Err(NetworkError::IncompatibleDims(format!("rank of {hi} differs from source {lo}")));
    }
    let (lo_d, hi_d) = (spatial_dims(lo), spatial_dims(hi));
    if (0..3).any(|a| hi_d[a] < lo_d[a]) {
        return Err(NetworkError::IncompatibleDims(format!("{hi} is smaller than the source {lo}")));
    }
    let head = source_head_index(&source.net)
        .ok_or_else(|| NetworkError::Metadata("source has no convolutions".into()))?;
    let plan = &source.meta.plan;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut net = Sequential::new(channel_count(hi.rank), hi_d, hi.rank);
    if hi_d != lo_d {
        net.push(Layer::InputRescale(lo_d));
    }
    let start = net.layers.len();
    for layer in &source.net.layers[..head] {
        net.push(layer.clone());
    }
    let end = net.layers.len();
    let (feat, feat_dims) = net.output_dims()?;
    if feat_dims != lo_d {
        net.push(Layer::Crop(lo_d));
    }
    let stride: [usize; 3] = std::array::from_fn(|a| hi_d[a].div_ceil(lo_d[a]));
    let kernel = kernel_for(hi_d, plan.kernel);
    let [w0, w1, w2] = [plan.target_head[0], plan.target_head[1], plan.target_head[2]];
    let mut fresh = vec![
        Layer::ConvTranspose(ConvTranspose::new(feat, w0, stride, stride, [0; 3])),
        Layer::Relu,
        Layer::Conv(Conv::same(w0, w0, kernel)),
        Layer::Relu,
        Layer::Conv(Conv::same(w0, w1, kernel)),
        Layer::Relu,
        Layer::Conv(Conv::same(w1, w2, kernel)),
        Layer::Clamp,
    ];
    for l in &mut fresh {
        l.init(&mut rng);
    }
    for l in fresh {
        net.push(l);
    }
    let up: [usize; 3] = std::array::from_fn(|a| lo_d[a] * stride[a]);
    if up != hi_d {
        net.push(Layer::Crop(hi_d));
    }
    for i in 0..net.layers.len() {
        net.frozen[i] = freeze == FreezePolicy::Frozen && (start..end).contains(&i);
    }
    let (out_ch, out_dims) = net.output_dims()?;
    if out_ch != 1 || out_dims != hi_d {
        return Err(NetworkError::IncompatibleDims(format!("target maps to {out_ch} x {out_dims:?}")));
    }

    let param_hash = net.param_hash(start..end);
    if param_hash != source.net.param_hash(0..head) {
        return Err(NetworkError::ChecksumMismatch);
    }
    let meta = ModelMeta {
        v: 1,
        kind: ModelKind::Target,
        dims: hi.dims(),
        plan: plan.clone(),
        force_scale: source.meta.force_scale,
        unit_loads: source.meta.unit_loads,
        freeze,
        transfer: Some(TransferInfo {
            source_file_hash: crate::nn::hex_digest(&source_bytes[source_bytes.len() - 32..]),
            source_dims: lo.dims(),
            start,
            end,
            param_hash,
        }),
        seed,
    };
    Ok(Model { net, meta })
}

/// Same architecture as [`build_target`] with every layer freshly
/// initialised and trainable: the from-scratch baseline.
pub fn build_scratch(target: &Model, seed: u64) -> Model {
    let mut net = target.net.clone();
    net.init(&mut ChaCha8Rng::seed_from_u64(seed));
    net.frozen.iter_mut().for_each(|f| *f = false);
    let meta = ModelMeta { freeze: FreezePolicy::Unfrozen, transfer: None, seed, ..target.meta.clone() };
    Model { net, meta }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Share of the training indices held out for checkpoint selection.
    pub validation_fraction: f64,
    #[serde(default)]
    pub freeze: FreezePolicy,
    /// Stop once the training loss falls below this value.
    #[serde(default)]
    pub target_loss: Option<f64>,
    /// Adds mirror images of training samples whose supports and mask are
    /// symmetric about a midplane. Needs the dataset manifest.
    #[serde(default)]
    pub augment_mirror: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            patience: None,
            validation_fraction: 0.1,
            freeze: FreezePolicy::Frozen,
            target_loss: None,
            augment_mirror: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub seconds: f64,
    pub train_count: usize,
    pub val_count: usize,
}

/// JSON written next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub v: u32,
    pub kind: ModelKind,
    pub dataset_hash: String,
    pub config: TrainConfig,
    pub history: TrainHistory,
    pub weights_hash: String,
}

/// Scales the force channels of an encoded input so the largest per-cell
/// force vector has unit norm. Inputs without loads are left alone.
pub fn unit_force_channels(x: &mut [f64], rank: usize, n: usize) {
    let base = (1 + rank) * n;
    let peak = (0..n)
        .map(|e| (0..rank).map(|a| x[base + a * n + e].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if peak > 0.0 {
        x[base..base + rank * n].iter_mut().for_each(|v| *v /= peak);
    }
}

/// How stored force channels are mapped to network inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ForceInput {
    /// Divide by this factor.
    Rescale(f64),
    /// See [`unit_force_channels`].
    Unit,
}

impl ForceInput {
    pub fn for_model(meta: &ModelMeta, manifest: Option<&datagen::DatasetManifest>) -> Self {
        if meta.unit_loads {
            ForceInput::Unit
        } else {
            ForceInput::Rescale(meta.force_scale / dataset_force_scale(manifest))
        }
    }
}

/// Converts stored samples to network tensors.
pub fn dataset_tensors(
    net: &Sequential,
    data: &Dataset,
    indices: &[usize],
    force: ForceInput,
) -> Result<(Vec<Tensor>, Vec<Tensor>), NetworkError> {
    if spatial_dims(data.grid) != net.in_dims || data.channels != net.in_channels {
        return Err(NetworkError::DatasetMismatch(format!(
            "dataset is {} with {} channels, network expects {:?} with {}",
            data.grid, data.channels, net.in_dims, net.in_channels
        )));
    }
    let n = data.grid.n_elements();
    let rank = data.grid.rank;
    let mut out_shape = net.input_shape(1);
    out_shape[1] = 1;
    let mut xs = Vec::with_capacity(indices.len());
    let mut ys = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = data
            .samples
            .get(i)
            .ok_or_else(|| NetworkError::DatasetMismatch(format!("no sample {i}")))?;
        let mut x: Vec<f64> = s.input.iter().map(|&v| v as f64).collect();
        match force {
            ForceInput::Unit => unit_force_channels(&mut x, rank, n),
            ForceInput::Rescale(f) if f != 1.0 => x[(1 + rank) * n..].iter_mut().for_each(|v| *v /= f),
            ForceInput::Rescale(_) => {}
        }
        xs.push(Tensor::new(net.input_shape(1), x)?);
        ys.push(Tensor::new(out_shape.clone(), s.target.iter().map(|&v| v as f64).collect())?);
    }
    Ok((xs, ys))
}

/// Reflects a problem about the midplane normal to `axis`. Returns `None`
/// unless the mask and the supports are unchanged by the reflection, in
/// which case the reflected problem has the reflected optimum.
pub fn mirror_problem(problem: &Problem, axis: usize) -> Option<Problem> {
    let grid = problem.grid();
    let ext = grid.extents();
    let flip_node = |n: usize| {
        let mut c = grid.node_coords(n);
        c[axis] = ext[axis] - c[axis];
        grid.node_index(c[0], c[1], c[2])
    };
    let mask = problem.domain.mask();
    let flipped_mask: Vec<bool> = (0..grid.n_elements()).map(|e| mask[mirror_element(grid, e, axis)]).collect();
    if flipped_mask != mask {
        return None;
    }
    let fixed: std::collections::BTreeSet<(usize, usize)> =
        problem.bc.fixed.iter().map(|&(n, a)| (flip_node(n), a)).collect();
    if fixed != problem.bc.fixed {
        return None;
    }
    let mut bc = problem.bc.clone();
    for load in &mut bc.loads {
        load.node = flip_node(load.node);
        load.force[axis] = -load.force[axis];
    }
    Some(Problem::new(problem.domain.clone(), bc, problem.volfrac))
}

/// Element index reflected about the midplane normal to `axis`.
pub fn mirror_element(grid: Grid, e: usize, axis: usize) -> usize {
    let mut c = grid.element_coords(e);
    c[axis] = grid.extents()[axis] - 1 - c[axis];
    grid.element_index(c[0], c[1], c[2])
}

/// Mirror images of the listed samples, as extra training pairs.
fn mirrored_pairs(
    model: &Model,
    data: &Dataset,
    manifest: &datagen::DatasetManifest,
    indices: &[usize],
) -> Result<(Vec<Tensor>, Vec<Tensor>), NetworkError> {
    let domain = manifest.domain()?;
    let grid = data.grid;
    let mut out_shape = model.net.input_shape(1);
    out_shape[1] = 1;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &i in indices {
        let problem = manifest.problem(&domain, i)?;
        // Manifest forces are raw Newtons, which is what `encode` expects.
        for axis in 0..grid.rank {
            let Some(m) = mirror_problem(&problem, axis) else { continue };
            let target = &data.samples[i].target;
            let y: Vec<f64> =
                (0..grid.n_elements()).map(|e| target[mirror_element(grid, e, axis)] as f64).collect();
            xs.push(model.encode(&m)?);
            ys.push(Tensor::new(out_shape.clone(), y)?);
        }
    }
    Ok((xs, ys))
}

/// Splits `indices` into train / validation parts deterministically.
pub fn validation_split(indices: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_da7e));
    let n_val = ((fraction * order.len() as f64).round() as usize).min(order.len().saturating_sub(1));
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    (train, val)
}

struct Optimizer {
    states: Vec<Option<(AdamState, AdamState)>>,
}

impl Optimizer {
    fn new(net: &Sequential, cfg: AdamConfig) -> Self {
        let states = net
            .layers
            .iter()
            .zip(&net.frozen)
            .map(|(l, &frozen)| match l.params() {
                Some((w, b)) if !frozen => Some((AdamState::new(w.len(), cfg), AdamState::new(b.len(), cfg))),
                _ => None,
            })
            .collect();
        Optimizer { states }
    }

    fn step(&mut self, net: &mut Sequential, grads: &[LayerGrad]) -> Result<(), NnError> {
        for (i, st) in self.states.iter_mut().enumerate() {
            if let Some((sw, sb)) = st {
                let (w, b) = net.layers[i].params_mut().expect("parameterised");
                adam_step(w, &grads[i].weight, sw)?;
                adam_step(b, &grads[i].bias, sb)?;
            }
        }
        Ok(())
    }
}

/// First layer that receives parameter updates; everything before it is a
/// fixed feature extractor whose output can be cached.
pub fn first_trainable(net: &Sequential) -> usize {
    (0..net.layers.len())
        .find(|&i| !net.frozen[i] && net.layers[i].params().is_some())
        .unwrap_or(net.layers.len())
}

fn mean_loss(net: &Sequential, start: usize, xs: &[Tensor], ys: &[Tensor]) -> Result<f64, NnError> {
    let losses: Vec<f64> = xs
        .par_iter()
        .zip(ys)
        .map(|(x, y)| {
            let out = net.forward_range(start, net.layers.len(), x, Mode::Train)?;
            Ok(mse_loss(&out, y)?.0)
        })
        .collect::<Result<_, NnError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// ADAM/MSE training with best-validation checkpointing. `xs`/`ys` are
/// single-sample tensors. The loss is taken on the raw output, so the clamp
/// acts as a straight-through identity while training.
pub fn train(
    net: &mut Sequential,
    xs: &[Tensor],
    ys: &[Tensor],
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainHistory, NetworkError> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(NetworkError::Metadata("epochs and batch size must be >= 1".into()));
    }
    if train_idx.is_empty() {
        return Err(NetworkError::DatasetMismatch("empty training set".into()));
    }
    let started = Instant::now();
    let start = first_trainable(net);
    // Frozen prefix runs once.
    let feats: Vec<Tensor> = xs
        .par_iter()
        .map(|x| net.forward_range(0, start, x, Mode::Train))
        .collect::<Result<_, NnError>>()?;
    let pick = |idx: &[usize]| -> (Vec<Tensor>, Vec<Tensor>) {
        (idx.iter().map(|&i| feats[i].clone()).collect(), idx.iter().map(|&i| ys[i].clone()).collect())
    };
    let (val_x, val_y) = pick(val_idx);

    let mut opt = Optimizer::new(net, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = train_idx.to_vec();
    let mut history = TrainHistory {
        best_loss: f64::INFINITY,
        train_count: train_idx.len(),
        val_count: val_idx.len(),
        ..Default::default()
    };
    let mut best = net.clone();
    let batch = cfg.batch_size.min(order.len());
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let scale = 1.0 / chunk.len() as f64;
            let net_ref = &*net;
            let parts: Vec<(f64, Vec<LayerGrad>)> = chunk
                .par_iter()
                .map(|&i| {
                    let trace = net_ref.forward_trace(start, &feats[i], Mode::Train)?;
                    let (loss, mut dy) = mse_loss(&trace.output, &ys[i])?;
                    dy.data_mut().iter_mut().for_each(|g| *g *= scale);
                    let mut grads = net_ref.zero_grads();
                    net_ref.backward(&trace, dy, &mut grads, Mode::Train, false)?;
                    Ok((loss, grads))
                })
                .collect::<Result<_, NnError>>()?;
            // Ordered reduction keeps results independent of thread count.
            let mut total = net.zero_grads();
            for (loss, g) in &parts {
                epoch_loss += loss;
                for (t, p) in total.iter_mut().zip(g) {
                    t.weight.iter_mut().zip(&p.weight).for_each(|(a, b)| *a += b);
                    t.bias.iter_mut().zip(&p.bias).for_each(|(a, b)| *a += b);
                }
            }
            opt.step(net, &total)?;
        }
        let train_loss = epoch_loss / order.len() as f64;
        if !train_loss.is_finite() {
            return Err(NetworkError::Diverged(epoch));
        }
        let val_loss = if val_x.is_empty() { train_loss } else { mean_loss(net, start, &val_x, &val_y)? };
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        if val_loss < history.best_loss {
            history.best_loss = val_loss;
            history.best_epoch = epoch;
            best = net.clone();
        }
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if cfg.patience.is_some_and(|p| epoch - history.best_epoch >= p) {
            break;
        }
        if cfg.target_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }
    *net = best;
    history.seconds = started.elapsed().as_secs_f64();
    Ok(history)
}

fn dataset_force_scale(manifest: Option<&datagen::DatasetManifest>) -> f64 {
    match manifest {
        Some(m) if m.config.sampler.normalize_forces => m.config.sampler.force_range,
        _ => 1.0,
    }
}

/// Trains a source model on `indices` of a dataset (validation is carved
/// out of them).
pub fn train_source(
    model: &mut Model,
    data: &Dataset,
    manifest: Option<&datagen::DatasetManifest>,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainHistory, NetworkError> {
    model.meta.force_scale = dataset_force_scale(manifest);
    fit(model, data, manifest, indices, cfg)
}

fn fit(
    model: &mut Model,
    data: &Dataset,
    manifest: Option<&datagen::DatasetManifest>,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainHistory, NetworkError> {
    let (mut xs, mut ys) =
        dataset_tensors(&model.net, data, indices, ForceInput::for_model(&model.meta, manifest))?;
    let local: Vec<usize> = (0..indices.len()).collect();
    let (mut tr, va) = validation_split(&local, cfg.validation_fraction, cfg.seed);
    if cfg.augment_mirror {
        let manifest = manifest
            .ok_or_else(|| NetworkError::DatasetMismatch("mirror augmentation needs the manifest".into()))?;
        let originals: Vec<usize> = tr.iter().map(|&k| indices[k]).collect();
        let (mx, my) = mirrored_pairs(model, data, manifest, &originals)?;
        tr.extend(xs.len()..xs.len() + mx.len());
        xs.extend(mx);
        ys.extend(my);
    }
    train(&mut model.net, &xs, &ys, &tr, &va, cfg)
}

/// Fine-tunes a target model; frozen layers are never updated.
pub fn fine_tune(
    model: &mut Model,
    data: &Dataset,
    manifest: Option<&datagen::DatasetManifest>,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainHistory, NetworkError> {
    // Inputs reach the network in the scale the source was trained on.
    fit(model, data, manifest, indices, cfg)
}

/// Predicts each listed sample of a dataset, returning raw outputs.
pub fn predict_dataset(
    model: &Model,
    data: &Dataset,
    manifest: Option<&datagen::DatasetManifest>,
    indices: &[usize],
) -> Result<Vec<Vec<f64>>, NetworkError> {
    let (xs, _) = dataset_tensors(&model.net, data, indices, ForceInput::for_model(&model.meta, manifest))?;
    xs.par_iter()
        .map(|x| {
            let y = model.net.forward(x)?;
            Ok(y.into_data())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Sample;

    fn tiny_plan() -> FilterPlan {
        FilterPlan::default().scaled(8)
    }

    #[test]
    fn source_shapes() {
        let net = build_source(Grid::new_2d(80, 40), &FilterPlan::default()).unwrap();
        assert_eq!(net.output_dims().unwrap(), (1, [1, 40, 80]));
        let convs = net.layers.iter().filter(|l| matches!(l, Layer::Conv(_))).count();
        let ts = net.layers.iter().filter(|l| matches!(l, Layer::ConvTranspose(_))).count();
        let pools = net.layers.iter().filter(|l| matches!(l, Layer::MaxPool(_))).count();
        assert_eq!((convs, ts, pools), (16, 3, 3));

        let net3 = build_source(Grid::new_3d(40, 20, 10), &tiny_plan()).unwrap();
        assert_eq!(net3.output_dims().unwrap(), (1, [10, 20, 40]));
        let net_odd = build_source(Grid::new_2d(60, 20), &tiny_plan()).unwrap();
        assert_eq!(net_odd.output_dims().unwrap(), (1, [1, 20, 60]));
    }

    #[test]
    fn forward_shapes_match_the_grid() {
        let mut m = Model::new_source(Grid::new_2d(40, 20), &tiny_plan(), 1).unwrap();
        let x = Tensor::filled(&m.net.input_shape(1), 0.3);
        assert_eq!(m.net.forward(&x).unwrap().shape(), &[1, 1, 20, 40]);
        m.net.init(&mut ChaCha8Rng::seed_from_u64(4));
        let x3 = Tensor::filled(&[1, 7, 10, 20, 40], 0.1);
        let m3 = Model::new_source(Grid::new_3d(40, 20, 10), &tiny_plan(), 2).unwrap();
        assert_eq!(m3.net.forward(&x3).unwrap().shape(), &[1, 1, 10, 20, 40]);
    }

    #[test]
    fn bad_plans_are_rejected() {
        let mut p = FilterPlan::default();
        p.encoder.pop();
        assert!(matches!(build_source(Grid::new_2d(80, 40), &p), Err(NetworkError::ShapePlanInvalid(_))));
        let mut q = FilterPlan::default();
        q.target_head = vec![16, 16, 2];
        assert!(q.validate().is_err());
    }

    #[test]
    fn target_shapes_for_table_resolutions() {
        let src = Model::new_source(Grid::new_2d(80, 40), &tiny_plan(), 3).unwrap();
        let bytes = src.to_bytes();
        for (ny, nx) in [(80, 160), (120, 160), (120, 240), (160, 320), (200, 400)] {
            let t = build_target(&bytes, Grid::new_2d(nx, ny), FreezePolicy::Frozen, 0).unwrap();
            assert_eq!(t.net.output_dims().unwrap(), (1, [1, ny, nx]), "{ny}x{nx}");
        }
        assert!(matches!(
            build_target(&bytes, Grid::new_2d(60, 40), FreezePolicy::Frozen, 0),
            Err(NetworkError::IncompatibleDims(_))
        ));
        let mut corrupt = bytes.clone();
        corrupt[40] ^= 1;
        assert!(matches!(
            build_target(&corrupt, Grid::new_2d(160, 80), FreezePolicy::Frozen, 0),
            Err(NetworkError::ChecksumMismatch)
        ));
    }

    fn toy_dataset(grid: Grid, count: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.n_elements();
        let samples = (0..count)
            .map(|_| {
                let mut input = vec![0f32; 5 * n];
                input[..n].iter_mut().for_each(|v| *v = 0.5);
                let cell = rng.gen_range(0..n);
                input[3 * n + cell] = rng.gen_range(-1.0..1.0);
                let target = (0..n).map(|e| if (e + cell) % 3 == 0 { 1.0 } else { 0.0 }).collect();
                Sample { input, target }
            })
            .collect();
        Dataset { grid, channels: 5, samples }
    }

    #[test]
    fn frozen_layers_do_not_change() {
        let lo = Grid::new_2d(16, 16);
        let src = Model::new_source(lo, &tiny_plan(), 5).unwrap();
        let mut t = build_target(&src.to_bytes(), Grid::new_2d(32, 32), FreezePolicy::Frozen, 1).unwrap();
        let info = t.meta.transfer.clone().unwrap();
        let before = t.net.param_hash(info.start..info.end);
        let data = toy_dataset(Grid::new_2d(32, 32), 6, 2);
        let cfg = TrainConfig { epochs: 2, batch_size: 3, ..TrainConfig::default() };
        let idx: Vec<usize> = (0..6).collect();
        let head_before = t.net.param_hash(info.end..t.net.layers.len());
        fine_tune(&mut t, &data, None, &idx, &cfg).unwrap();
        assert_eq!(t.net.param_hash(info.start..info.end), before);
        assert_ne!(t.net.param_hash(info.end..t.net.layers.len()), head_before);

        // Gradients of frozen layers are identically zero.
        let (xs, ys) = dataset_tensors(&t.net, &data, &[0], ForceInput::Unit).unwrap();
        // The front downsampler has no backward pass; start after it.
        let front = t.net.forward_range(0, 1, &xs[0], Mode::Train).unwrap();
        let trace = t.net.forward_trace(1, &front, Mode::Train).unwrap();
        let (_, dy) = mse_loss(&trace.output, &ys[0]).unwrap();
        let mut grads = t.net.zero_grads();
        t.net.backward(&trace, dy, &mut grads, Mode::Train, false).unwrap();
        for i in info.start..info.end {
            assert!(grads[i].weight.iter().chain(&grads[i].bias).all(|&g| g == 0.0));
        }

        // Round trip keeps the transfer hash verifiable.
        let back = Model::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), t.to_bytes());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let grid = Grid::new_2d(16, 16);
        let data = toy_dataset(grid, 8, 7);
        let idx: Vec<usize> = (0..8).collect();
        let cfg = TrainConfig { epochs: 6, batch_size: 4, validation_fraction: 0.0, adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() }, ..TrainConfig::default() };
        let run = || {
            let mut m = Model::new_source(grid, &tiny_plan(), 9).unwrap();
            let h = train_source(&mut m, &data, None, &idx, &cfg).unwrap();
            (m, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1.train_loss, h2.train_loss);
        assert_eq!(m1, m2);
        assert!(h1.train_loss.last().unwrap() < &h1.train_loss[0]);
    }

    #[test]
    fn mirror_only_for_symmetric_supports() {
        use crate::mesh::{standard_bc_case, BcCase, DesignDomain, PointLoad};
        let d = DesignDomain::full(Grid::new_2d(6, 4));
        let g = d.grid();
        let load = PointLoad { node: g.node_index(6, 1, 0), force: vec![3.0, -5.0] };
        let bc = standard_bc_case(&d, BcCase::Cantilever, load.clone()).unwrap();
        let p = Problem::new(d.clone(), bc, 0.5);
        assert!(mirror_problem(&p, 0).is_none());
        let m = mirror_problem(&p, 1).unwrap();
        assert_eq!(m.bc.loads[0].node, g.node_index(6, 3, 0));
        assert_eq!(m.bc.loads[0].force, vec![3.0, 5.0]);
        assert_eq!(mirror_problem(&m, 1).unwrap().bc, p.bc);
        let ss = standard_bc_case(&d, BcCase::SimplySupported, load).unwrap();
        let q = Problem::new(d, ss, 0.5);
        assert!(mirror_problem(&q, 0).is_none() && mirror_problem(&q, 1).is_none());
        assert_eq!(mirror_element(g, g.element_index(0, 0, 0), 1), g.element_index(0, 3, 0));
    }

    #[test]
    fn retarget_keeps_weights() {
        let m = Model::new_source(Grid::new_2d(40, 20), &tiny_plan(), 3).unwrap();
        let r = m.for_grid(Grid::new_2d(60, 20)).unwrap();
        assert_eq!(r.net.output_dims().unwrap(), (1, [1, 20, 60]));
        assert!(m.for_grid(Grid::new_2d(40, 8)).is_err());
        assert!(matches!(predict(None, &toy_problem()), Err(NetworkError::WeightsNotLoaded)));
    }

    fn toy_problem() -> Problem {
        use crate::mesh::{standard_bc_case, BcCase, DesignDomain, PointLoad};
        let d = DesignDomain::full(Grid::new_2d(40, 20));
        let load = PointLoad { node: d.grid().node_index(40, 10, 0), force: vec![0.0, -50.0] };
        let bc = standard_bc_case(&d, BcCase::Cantilever, load).unwrap();
        Problem::new(d, bc, 0.5)
    }

    #[test]
    fn prediction_is_bounded_and_repeatable() {
        let m = Model::new_source(Grid::new_2d(40, 20), &tiny_plan(), 3).unwrap();
        let p = toy_problem();
        let a = m.predict(&p).unwrap();
        let b = m.predict(&p).unwrap();
        assert_eq!(a, b);
        assert!(a.densities.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.binary.values().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
