//! Random problem sampling, input-channel encoding and the `TOPO` dataset
//! file format.

use std::collections::BTreeSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::field::DensityField;
use crate::mesh::{
    case_fixed_dofs, standard_bc_case, BcCase, BoundaryConditions, DesignDomain, Grid, MeshError,
    PointLoad,
};
use crate::nn::hex_digest;
use crate::problem::{decode_mask, encode_mask, Problem};
use crate::resample;
use crate::simp::{optimize, MaterialModel, SimpConfig, SimpError};

pub const DATASET_MAGIC: &[u8; 4] = b"TOPO";
pub const DATASET_VERSION: u32 = 1;
/// Abort generation when more than this fraction of samples fail.
pub const MAX_FAILURE_RATE: f64 = 0.10;
const SPLIT_SALT: u64 = 0x5eed_0f5b_1175_u64;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("no admissible load node for case {0}")]
    EmptyAdmissibleRegion(BcCase),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("{failed} of {total} samples failed, above the {:.0}% limit", MAX_FAILURE_RATE * 100.0)]
    TooManyFailures { failed: usize, total: usize },
    #[error("corrupt dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Simp(#[from] SimpError),
}

/// Load sampling parameters. Region bounds are fractions of the domain
/// extent per axis `[x, y, z]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Each force component is uniform in `[-force_range, force_range]` N.
    pub force_range: f64,
    pub region_lo: [f64; 3],
    pub region_hi: [f64; 3],
    /// Support cases drawn uniformly. Empty means the rank default:
    /// the three beam cases in 2D, all four cases in 3D.
    #[serde(default)]
    pub cases: Vec<BcCase>,
    pub volfrac: f64,
    /// Divide force channels by `force_range`.
    #[serde(default)]
    pub normalize_forces: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            force_range: 100.0,
            region_lo: [0.5, 0.0, 0.0],
            region_hi: [1.0, 1.0, 1.0],
            cases: Vec::new(),
            volfrac: 0.5,
            normalize_forces: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if !(self.force_range > 0.0 && self.force_range.is_finite()) {
            return Err(DatagenError::InvalidConfig(format!("force range {}", self.force_range)));
        }
        for a in 0..3 {
            let (lo, hi) = (self.region_lo[a], self.region_hi[a]);
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(DatagenError::InvalidConfig(format!(
                    "region bounds [{lo}, {hi}] on axis {a}"
                )));
            }
        }
        if !(self.volfrac > 0.0 && self.volfrac < 1.0) {
            return Err(DatagenError::InvalidConfig(format!("volfrac {}", self.volfrac)));
        }
        Ok(())
    }

    pub fn cases_for(&self, rank: usize) -> Vec<BcCase> {
        if !self.cases.is_empty() {
            self.cases.clone()
        } else if rank == 2 {
            vec![BcCase::Cantilever, BcCase::SimplySupported, BcCase::ConstrainedCantilever]
        } else {
            BcCase::ALL.to_vec()
        }
    }
}

/// What was drawn for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub case: BcCase,
    pub load: PointLoad,
    pub volfrac: f64,
}

impl SampleSpec {
    pub fn boundary_conditions(&self, domain: &DesignDomain) -> Result<BoundaryConditions, MeshError> {
        standard_bc_case(domain, self.case, self.load.clone())
    }

    /// Deduplication key: case, load node and force quantized to 0.01 N.
    pub fn key(&self) -> (u8, usize, Vec<i64>) {
        let q = self.load.force.iter().map(|f| (f * 100.0).round() as i64).collect();
        (self.case.id(), self.load.node, q)
    }
}

/// Boundary nodes inside the load region that carry no support in `case`.
pub fn admissible_load_nodes(domain: &DesignDomain, case: BcCase, cfg: &SamplerConfig) -> Vec<usize> {
    let grid = domain.grid();
    let fixed: BTreeSet<usize> = case_fixed_dofs(domain, case).into_iter().map(|(n, _)| n).collect();
    let ext = grid.extents();
    (0..grid.n_nodes())
        .filter(|&n| {
            if !domain.is_boundary_node(n) || fixed.contains(&n) {
                return false;
            }
            let c = grid.node_coords(n);
            (0..grid.rank).all(|a| {
                let t = c[a] as f64 / ext[a] as f64;
                t >= cfg.region_lo[a] - 1e-12 && t <= cfg.region_hi[a] + 1e-12
            })
        })
        .collect()
}

/// Draws a support case, a load node and a force vector.
pub fn sample_problem<R: Rng>(
    domain: &DesignDomain,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(BoundaryConditions, f64, SampleSpec), DatagenError> {
    cfg.validate()?;
    let cases = cfg.cases_for(domain.rank());
    let case = cases[rng.gen_range(0..cases.len())];
    let nodes = admissible_load_nodes(domain, case, cfg);
    if nodes.is_empty() {
        return Err(DatagenError::EmptyAdmissibleRegion(case));
    }
    let node = nodes[rng.gen_range(0..nodes.len())];
    let force = (0..domain.rank()).map(|_| rng.gen_range(-cfg.force_range..=cfg.force_range)).collect();
    let spec = SampleSpec { case, load: PointLoad { node, force }, volfrac: cfg.volfrac };
    let bc = spec.boundary_conditions(domain)?;
    Ok((bc, cfg.volfrac, spec))
}

/// Number of input channels for a spatial rank: density, one constraint
/// indicator per axis, one force component per axis.
pub fn channel_count(rank: usize) -> usize {
    1 + 2 * rank
}

/// Element cell that carries a node's value: the cell whose lower-left
/// corner is the node, clamped at the upper faces.
pub fn node_cell(grid: Grid, node: usize) -> usize {
    let [x, y, z] = grid.node_coords(node);
    grid.element_index(x.min(grid.nx - 1), y.min(grid.ny - 1), z.min(grid.nz - 1))
}

/// Builds the `[channels, nz, ny, nx]` input raster (x fastest).
pub fn encode_channels(
    domain: &DesignDomain,
    bc: &BoundaryConditions,
    volfrac: f64,
    force_scale: f64,
) -> Result<Vec<f64>, DatagenError> {
    let grid = domain.grid();
    let rank = grid.rank;
    let n = grid.n_elements();
    bc.validate(domain).map_err(|e| DatagenError::DimensionMismatch(e.to_string()))?;
    let mut out = vec![0.0; channel_count(rank) * n];
    for (e, &m) in domain.mask().iter().enumerate() {
        if m {
            out[e] = volfrac;
        }
    }
    for &(node, axis) in &bc.fixed {
        out[(1 + axis) * n + node_cell(grid, node)] = 1.0;
    }
    for load in &bc.loads {
        let cell = node_cell(grid, load.node);
        for (a, f) in load.force.iter().enumerate() {
            out[(1 + rank + a) * n + cell] += f / force_scale;
        }
    }
    Ok(out)
}

/// Area/volume-weighted downsampling or (bi/tri)linear upsampling.
pub fn rescale_field(field: &DensityField, to: Grid) -> Result<DensityField, DatagenError> {
    let from = field.grid();
    if from.rank != to.rank {
        return Err(DatagenError::DimensionMismatch(format!("cannot rescale {from} to {to}")));
    }
    let f = [from.nz, from.ny, from.nx];
    let t = [to.nz, to.ny, to.nx];
    Ok(DensityField::new(to, resample::resample(field.values(), f, t)))
}

/// One input/target pair, stored in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
}

/// In-memory dataset: every sample shares the grid and channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: Grid,
    pub channels: usize,
    pub samples: Vec<Sample>,
}

/// Provenance of one stored sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub spec: SampleSpec,
    pub iterations: usize,
    pub converged: bool,
    pub compliance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// JSON sidecar written next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub v: u32,
    pub format: String,
    pub version: u32,
    pub dims: Vec<usize>,
    pub channels: usize,
    pub count: usize,
    pub mask: String,
    pub config: GenerateConfig,
    pub config_hash: String,
    pub base_seed: u64,
    pub samples: Vec<SampleRecord>,
    pub splits: Splits,
    pub failures: Vec<(u64, String)>,
    pub duplicates: Vec<u64>,
}

impl DatasetManifest {
    pub fn domain(&self) -> Result<DesignDomain, DatagenError> {
        let grid = Grid::from_dims(&self.dims)?;
        let mask = decode_mask(&self.mask, grid.n_elements())
            .map_err(|e| DatagenError::Format(e.to_string()))?;
        Ok(DesignDomain::new(grid, mask)?)
    }

    /// Rebuilds the problem behind sample `i`.
    pub fn problem(&self, domain: &DesignDomain, i: usize) -> Result<Problem, DatagenError> {
        let rec = &self.samples[i];
        let bc = rec.spec.boundary_conditions(domain)?;
        Ok(Problem::new(domain.clone(), bc, rec.spec.volfrac))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub count: usize,
    pub seed: u64,
    /// Fraction of samples held out; rounded up.
    pub test_fraction: f64,
    /// Overrides `test_fraction` when set.
    #[serde(default)]
    pub test_count: Option<usize>,
    pub sampler: SamplerConfig,
    pub simp: SimpConfig,
    pub material: MaterialModel,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            count: 100,
            seed: 0,
            test_fraction: 0.2,
            test_count: None,
            sampler: SamplerConfig::default(),
            simp: SimpConfig::default(),
            material: MaterialModel::default(),
        }
    }
}

/// SHA-256 of the canonical JSON of the configuration and domain.
pub fn config_hash(cfg: &GenerateConfig, domain: &DesignDomain) -> String {
    let payload = serde_json::json!({
        "config": cfg,
        "dims": domain.grid().dims(),
        "mask": encode_mask(domain.mask()),
    });
    hex_digest(&Sha256::digest(payload.to_string().as_bytes()))
}

/// Samples problems, solves each with SIMP (in parallel) and assembles a
/// dataset with provenance. Draws continue until `count` distinct problems
/// are found; SIMP failures are skipped and logged.
pub fn generate_dataset(
    domain: &DesignDomain,
    cfg: &GenerateConfig,
) -> Result<(Dataset, DatasetManifest), DatagenError> {
    if cfg.count == 0 {
        return Err(DatagenError::InvalidConfig("count must be >= 1".into()));
    }
    cfg.sampler.validate()?;
    cfg.simp.validate()?;
    let mut seen = BTreeSet::new();
    let mut drawn = Vec::with_capacity(cfg.count);
    let mut duplicates = Vec::new();
    let mut seed = cfg.seed;
    let attempt_cap = cfg.count * 20 + 100;
    for _ in 0..attempt_cap {
        if drawn.len() == cfg.count {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bc, volfrac, spec) = sample_problem(domain, &cfg.sampler, &mut rng)?;
        if seen.insert(spec.key()) {
            drawn.push((seed, bc, volfrac, spec));
        } else {
            log::info!("seed {seed}: duplicate problem skipped");
            duplicates.push(seed);
        }
        seed = seed.wrapping_add(1);
    }
    if drawn.len() < cfg.count {
        log::warn!("only {} distinct problems found for {} requested", drawn.len(), cfg.count);
    }

    let force_scale = if cfg.sampler.normalize_forces { cfg.sampler.force_range } else { 1.0 };
    let results: Vec<_> = drawn
        .par_iter()
        .map(|(seed, bc, volfrac, spec)| {
            let simp = SimpConfig { volfrac: *volfrac, ..cfg.simp.clone() };
            let out = optimize(domain, bc, &cfg.material, &simp, None).and_then(|res| {
                let input = encode_channels(domain, bc, *volfrac, force_scale)
                    .map_err(|e| SimpError::InvalidConfig(e.to_string()))?;
                Ok((input, res))
            });
            (*seed, spec.clone(), out)
        })
        .collect();

    let total = results.len();
    let mut samples = Vec::new();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (seed, spec, out) in results {
        match out {
            Ok((input, res)) => {
                records.push(SampleRecord {
                    index: samples.len(),
                    seed,
                    spec,
                    iterations: res.iterations,
                    converged: res.converged,
                    compliance: res.history.last().copied().unwrap_or(f64::NAN),
                });
                samples.push(Sample {
                    input: input.iter().map(|&v| v as f32).collect(),
                    target: res.densities.values().iter().map(|&v| v as f32).collect(),
                });
            }
            Err(e) => {
                log::warn!("seed {seed}: SIMP failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    if failures.len() as f64 > MAX_FAILURE_RATE * total as f64 {
        return Err(DatagenError::TooManyFailures { failed: failures.len(), total });
    }
    let count = samples.len();
    let n_test = cfg
        .test_count
        .unwrap_or_else(|| (cfg.test_fraction * count as f64 - 1e-9).ceil().max(0.0) as usize)
        .min(count);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ SPLIT_SALT));
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut train: Vec<usize> = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();

    let grid = domain.grid();
    let dataset = Dataset { grid, channels: channel_count(grid.rank), samples };
    let manifest = DatasetManifest {
        v: 1,
        format: "TOPO".into(),
        version: DATASET_VERSION,
        dims: grid.dims(),
        channels: dataset.channels,
        count,
        mask: encode_mask(domain.mask()),
        config: cfg.clone(),
        config_hash: config_hash(cfg, domain),
        base_seed: cfg.seed,
        samples: records,
        splits: Splits { train, test },
        failures,
        duplicates,
    };
    Ok((dataset, manifest))
}


/// `data.topo` -> `data.topo.json`
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn put_f32s<W: Write>(w: &mut W, vals: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_dataset_to<W: Write>(w: &mut W, ds: &Dataset) -> Result<(), DatagenError> {
    let n = ds.grid.n_elements();
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&[ds.grid.rank as u8])?;
    for d in ds.grid.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(ds.channels as u32).to_le_bytes())?;
    w.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    for (i, s) in ds.samples.iter().enumerate() {
        if s.input.len() != ds.channels * n || s.target.len() != n {
            return Err(DatagenError::DimensionMismatch(format!("sample {i} has the wrong size")));
        }
        put_f32s(w, &s.input)?;
        put_f32s(w, &s.target)?;
    }
    Ok(())
}

pub fn read_dataset_from<R: Read>(r: &mut R) -> Result<Dataset, DatagenError> {
    let mut head = [0u8; 9];
    r.read_exact(&mut head)?;
    if &head[..4] != DATASET_MAGIC {
        return Err(DatagenError::Format("missing TOPO magic".into()));
    }
    let version = u32::from_le_bytes([head[4], head[5], head[6], head[7]]);
    if version != DATASET_VERSION {
        return Err(DatagenError::Format(format!("unsupported version {version}")));
    }
    let rank = head[8] as usize;
    if rank != 2 && rank != 3 {
        return Err(DatagenError::Format(format!("spatial rank {rank}")));
    }
    let mut u32s = |k: usize| -> Result<Vec<usize>, DatagenError> {
        let mut b = vec![0u8; 4 * k];
        r.read_exact(&mut b)?;
        Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize).collect())
    };
    let dims = u32s(rank)?;
    let channels = u32s(1)?[0];
    let grid = Grid::from_dims(&dims).map_err(|e| DatagenError::Format(e.to_string()))?;
    let mut cb = [0u8; 8];
    r.read_exact(&mut cb)?;
    let count = u64::from_le_bytes(cb) as usize;
    let n = grid.n_elements();
    let per = (channels + 1)
        .checked_mul(n)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| DatagenError::Format("sample size overflows".into()))?;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    let mut buf = vec![0u8; per];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        let vals: Vec<f32> =
            buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let target = vals[channels * n..].to_vec();
        let mut input = vals;
        input.truncate(channels * n);
        samples.push(Sample { input, target });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(DatagenError::Format("trailing bytes after last sample".into()));
    }
    Ok(Dataset { grid, channels, samples })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), DatagenError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_dataset_to(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatagenError> {
    read_dataset_from(&mut BufReader::new(std::fs::File::open(path)?))
}

/// Writes the dataset file and its manifest sidecar.
pub fn save_dataset(path: &Path, ds: &Dataset, manifest: &DatasetManifest) -> Result<(), DatagenError> {
    write_dataset(path, ds)?;
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(manifest_path(path), json)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, DatasetManifest), DatagenError> {
    let ds = read_dataset(path)?;
    let text = std::fs::read_to_string(manifest_path(path))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DatagenError::Format(format!("manifest: {e}")))?;
    if manifest.count != ds.samples.len() || manifest.dims != ds.grid.dims() {
        return Err(DatagenError::Format("manifest does not match the dataset file".into()));
    }
    Ok((ds, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::l_shape;

    fn beam() -> DesignDomain {
        DesignDomain::full(Grid::new_2d(40, 20))
    }

    #[test]
    fn load_nodes_respect_the_region() {
        let d = beam();
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let (bc, vf, spec) = sample_problem(&d, &cfg, &mut rng).unwrap();
            assert_eq!(vf, 0.5);
            let [x, y, _] = d.grid().node_coords(spec.load.node);
            assert!((20..=40).contains(&x) && y <= 20);
            assert!(d.is_boundary_node(spec.load.node));
            assert!(!bc.is_node_fixed(spec.load.node));
            assert!(spec.load.force.iter().all(|f| f.abs() <= 100.0));
        }
    }

    #[test]
    fn case_frequencies_are_uniform() {
        let d = DesignDomain::full(Grid::new_2d(12, 6));
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 4];
        let mut force_sum = 0.0;
        let draws = 10_000;
        for _ in 0..draws {
            let (_, _, spec) = sample_problem(&d, &cfg, &mut rng).unwrap();
            counts[spec.case.id() as usize] += 1;
            force_sum += spec.load.force[0];
        }
        let p = 1.0 / 3.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts[..3] {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
        assert_eq!(counts[3], 0);
        let mean_sigma = 100.0 / 3f64.sqrt() / (draws as f64).sqrt();
        assert!((force_sum / draws as f64).abs() < 3.0 * mean_sigma);
    }

    #[test]
    fn channels_follow_the_layout() {
        let d = DesignDomain::full(Grid::new_2d(4, 3));
        let g = d.grid();
        let n = g.n_elements();
        let node = g.node_index(2, 1, 0);
        let bc = BoundaryConditions::new(
            [(g.node_index(0, 0, 0), 0)],
            vec![PointLoad { node, force: vec![37.5, -12.0] }],
        );
        let x = encode_channels(&d, &bc, 0.5, 1.0).unwrap();
        assert_eq!(x.len(), 5 * n);
        assert!(x[..n].iter().all(|&v| v == 0.5));
        assert_eq!(x[n], 1.0);
        assert!(x[2 * n..3 * n].iter().all(|&v| v == 0.0));
        let cell = g.element_index(2, 1, 0);
        for (c, want) in [(3, 37.5), (4, -12.0)] {
            let ch = &x[c * n..(c + 1) * n];
            assert_eq!(ch.iter().filter(|&&v| v != 0.0).count(), 1);
            assert_eq!(ch[cell], want);
        }
        let empty = BoundaryConditions::default();
        let y = encode_channels(&d, &empty, 0.3, 1.0).unwrap();
        assert!(y[n..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_zeroes_the_density_channel() {
        let d = l_shape(Grid::new_2d(8, 8)).unwrap();
        let x = encode_channels(&d, &BoundaryConditions::default(), 0.5, 1.0).unwrap();
        for (e, &m) in d.mask().iter().enumerate() {
            assert_eq!(x[e], if m { 0.5 } else { 0.0 });
        }
    }

    #[test]
    fn rescale_checkerboard_and_ramp() {
        let g = Grid::new_2d(160, 80);
        let vals = (0..g.n_elements())
            .map(|e| {
                let [x, y, _] = g.element_coords(e);
                ((x + y) % 2) as f64
            })
            .collect();
        let small = rescale_field(&DensityField::new(g, vals), Grid::new_2d(80, 40)).unwrap();
        assert!(small.values().iter().all(|&v| (v - 0.5).abs() < 1e-12));

        let ramp: Vec<f64> = (0..g.n_elements()).map(|e| g.element_coords(e)[0] as f64 / 160.0).collect();
        let f = DensityField::new(g, ramp.clone());
        let back = rescale_field(&rescale_field(&f, Grid::new_2d(80, 40)).unwrap(), g).unwrap();
        let slope = 1.0 / 160.0;
        let err = back.values().iter().zip(&ramp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= slope + 1e-12, "{err}");
        assert!(rescale_field(&f, Grid::new_3d(2, 2, 2)).is_err());
    }

    fn small_config(count: usize) -> GenerateConfig {
        GenerateConfig {
            count,
            seed: 11,
            test_fraction: 0.2,
            simp: SimpConfig { max_iters: 30, ..SimpConfig::default() },
            ..GenerateConfig::default()
        }
    }

    #[test]
    fn generate_round_trip_and_split() {
        let d = DesignDomain::full(Grid::new_2d(16, 8));
        let (ds, manifest) = generate_dataset(&d, &small_config(10)).unwrap();
        assert_eq!(ds.samples.len(), 10);
        assert_eq!(manifest.splits.test.len(), 2);
        let train: BTreeSet<_> = manifest.splits.train.iter().collect();
        assert!(manifest.splits.test.iter().all(|i| !train.contains(i)));
        assert_eq!(train.len() + manifest.splits.test.len(), 10);
        for s in &ds.samples {
            assert!(s.target.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let vol: f64 = s.target.iter().map(|&v| v as f64).sum::<f64>() / s.target.len() as f64;
            assert!((vol - 0.5).abs() < 1e-3);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.topo");
        save_dataset(&path, &ds, &manifest).unwrap();
        let (back, m2) = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(m2, manifest);
        let mut bytes = Vec::new();
        write_dataset_to(&mut bytes, &back).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());

        // Same seed, same bytes.
        let (again, _) = generate_dataset(&d, &small_config(10)).unwrap();
        assert_eq!(again, ds);
        // Problems can be rebuilt from the manifest.
        let dom = manifest.domain().unwrap();
        let p = manifest.problem(&dom, 3).unwrap();
        let x = encode_channels(&dom, &p.bc, p.volfrac, 1.0).unwrap();
        assert!(x.iter().zip(&ds.samples[3].input).all(|(a, &b)| *a as f32 == b));
    }

    #[test]
    fn duplicates_are_skipped() {
        // A 2x1 beam has very few load nodes; force quantization makes
        // collisions unlikely, so force one by restricting the range.
        let d = DesignDomain::full(Grid::new_2d(4, 2));
        let mut cfg = small_config(3);
        cfg.sampler.force_range = 0.004;
        cfg.sampler.cases = vec![BcCase::Cantilever];
        let (_, manifest) = generate_dataset(&d, &cfg).unwrap();
        assert!(!manifest.duplicates.is_empty());
        let keys: BTreeSet<_> = manifest.samples.iter().map(|r| r.spec.key()).collect();
        assert_eq!(keys.len(), manifest.samples.len());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ds = Dataset {
            grid: Grid::new_2d(2, 2),
            channels: 5,
            samples: vec![Sample { input: vec![0.0; 20], target: vec![1.0; 4] }],
        };
        let mut bytes = Vec::new();
        write_dataset_to(&mut bytes, &ds).unwrap();
        assert_eq!(read_dataset_from(&mut bytes.as_slice()).unwrap(), ds);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset_from(&mut bad.as_slice()), Err(DatagenError::Format(_))));
        assert!(read_dataset_from(&mut &bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_dataset_from(&mut long.as_slice()).is_err());
    }
}
