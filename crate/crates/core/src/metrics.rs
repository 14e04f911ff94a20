//! Prediction quality metrics: MSE, binary accuracy, compliance error and
//! symmetric difference, all restricted to active elements.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fea::{self, FeaError};
use crate::field::DensityField;
use crate::mesh::{DesignDomain, Grid};
use crate::problem::Problem;
use crate::simp::MaterialModel;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("thresholded prediction does not connect the load to the supports")]
    DisconnectedPrediction,
    #[error("thresholded ground truth does not connect the load to the supports")]
    DisconnectedTruth,
    #[error("empty evaluation set")]
    Empty,
    #[error(transparent)]
    Fea(#[from] FeaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check(pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<(), MetricsError> {
    if pred.len() != truth.len() || mask.is_some_and(|m| m.len() != pred.len()) {
        return Err(MetricsError::DimensionMismatch(format!(
            "pred {} vs truth {} elements",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

fn active<'a>(
    pred: &'a [f64],
    truth: &'a [f64],
    mask: Option<&'a [bool]>,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.iter()
        .zip(truth)
        .enumerate()
        .filter(move |(i, _)| mask.map_or(true, |m| m[*i]))
        .map(|(_, (&p, &t))| (p, t))
}

/// Rounds to 0/1 with 0.5 going up.
#[inline]
pub fn binarize(v: f64) -> bool {
    v >= 0.5
}

/// Mean squared deviation over active elements (all when `mask` is `None`).
pub fn mse_metric(pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<f64, MetricsError> {
    check(pred, truth, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, t) in active(pred, truth, mask) {
        sum += (p - t) * (p - t);
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(sum / n as f64)
}

/// Fraction of active elements whose rounded values agree.
pub fn binary_accuracy(pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<f64, MetricsError> {
    check(pred, truth, mask)?;
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, t) in active(pred, truth, mask) {
        hit += (binarize(p) == binarize(t)) as usize;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(hit as f64 / n as f64)
}

/// XOR of the thresholded fields; inactive elements are 0.
pub fn symmetric_difference(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>, MetricsError> {
    check(a, b, mask)?;
    Ok(a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (&x, &y))| {
            let on = mask.map_or(true, |m| m[i]) && (binarize(x) != binarize(y));
            on as u8 as f64
        })
        .collect())
}

/// Whether solid elements link some load node to some supported node,
/// counting elements that share at least one node as connected.
pub fn load_path_exists(domain: &DesignDomain, problem: &Problem, solid: &[bool]) -> bool {
    let grid = domain.grid();
    let n_nodes = grid.n_nodes();
    // Union-find over nodes touched by solid elements.
    let mut parent: Vec<usize> = (0..n_nodes).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut touched = vec![false; n_nodes];
    for e in 0..grid.n_elements() {
        if !(solid[e] && domain.is_active(e)) {
            continue;
        }
        let (nodes, k) = grid.element_nodes(e);
        for &n in &nodes[..k] {
            touched[n] = true;
        }
        let r0 = find(&mut parent, nodes[0]);
        for &n in &nodes[1..k] {
            let r = find(&mut parent, n);
            parent[r] = r0;
        }
    }
    let support_roots: std::collections::BTreeSet<usize> = problem
        .bc
        .fixed
        .iter()
        .filter(|(n, _)| touched[*n])
        .map(|&(n, _)| find(&mut parent, n))
        .collect();
    problem.bc.loads.iter().all(|l| touched[l.node] && support_roots.contains(&find(&mut parent, l.node)))
}

fn binary_compliance(problem: &Problem, field: &[f64], material: &MaterialModel) -> Result<Option<f64>, MetricsError> {
    let solid: Vec<bool> = field.iter().map(|&v| binarize(v)).collect();
    if !load_path_exists(&problem.domain, problem, &solid) {
        return Ok(None);
    }
    let dens: Vec<f64> = solid.iter().map(|&s| s as u8 as f64).collect();
    let rho = DensityField::new(problem.grid(), dens).clamped_to(&problem.domain);
    match fea::solve(&problem.domain, &problem.bc, &rho, material) {
        Ok(sol) => Ok(Some(sol.compliance)),
        Err(FeaError::SingularSystem) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Signed relative compliance error `(c_pred - c_truth) / c_truth` of the
/// thresholded fields.
pub fn compliance_error(
    pred: &[f64],
    truth: &[f64],
    problem: &Problem,
    material: &MaterialModel,
) -> Result<f64, MetricsError> {
    let n = problem.grid().n_elements();
    if pred.len() != n || truth.len() != n {
        return Err(MetricsError::DimensionMismatch(format!(
            "fields must have {n} elements, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let c_truth = binary_compliance(problem, truth, material)?.ok_or(MetricsError::DisconnectedTruth)?;
    let c_pred = binary_compliance(problem, pred, material)?.ok_or(MetricsError::DisconnectedPrediction)?;
    Ok((c_pred - c_truth) / c_truth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub index: usize,
    pub mse: f64,
    pub ba: f64,
    /// `None` when either structure is disconnected or compliance was not
    /// evaluated.
    pub compliance_error: Option<f64>,
    #[serde(default)]
    pub disconnected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub v: u32,
    pub count: usize,
    pub mse: f64,
    pub ba: f64,
    pub compliance_error: Option<f64>,
    pub compliance_error_std: Option<f64>,
    pub disconnected: usize,
    pub compliance_evaluated: usize,
    pub mean_seconds: Option<f64>,
    pub max_seconds: Option<f64>,
    pub samples: Vec<SampleEval>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    /// Aggregates per-sample values; means are recomputed from `samples`.
    pub fn from_samples(samples: Vec<SampleEval>) -> Result<Self, MetricsError> {
        if samples.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mses: Vec<f64> = samples.iter().map(|s| s.mse).collect();
        let bas: Vec<f64> = samples.iter().map(|s| s.ba).collect();
        let ces: Vec<f64> = samples.iter().filter_map(|s| s.compliance_error).collect();
        let secs: Vec<f64> = samples.iter().filter_map(|s| s.seconds).collect();
        let ce_mean = mean(&ces);
        let ce_std = ce_mean.map(|m| (ces.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / ces.len() as f64).sqrt());
        Ok(EvalReport {
            v: 1,
            count: samples.len(),
            mse: mean(&mses).expect("non-empty"),
            ba: mean(&bas).expect("non-empty"),
            compliance_error: ce_mean,
            compliance_error_std: ce_std,
            disconnected: samples.iter().filter(|s| s.disconnected).count(),
            compliance_evaluated: ces.len(),
            mean_seconds: mean(&secs),
            max_seconds: secs.iter().copied().reduce(f64::max),
            samples,
        })
    }
}

/// Evaluates one prediction; the compliance error is computed when a
/// problem is supplied.
pub fn evaluate_sample(
    index: usize,
    pred: &[f64],
    truth: &[f64],
    problem: Option<&Problem>,
    material: &MaterialModel,
) -> Result<SampleEval, MetricsError> {
    let mask = problem.map(|p| p.domain.mask());
    let mse = mse_metric(pred, truth, mask)?;
    let ba = binary_accuracy(pred, truth, mask)?;
    let (ce, disconnected) = match problem {
        None => (None, false),
        Some(p) => match compliance_error(pred, truth, p, material) {
            Ok(c) => (Some(c), false),
            Err(MetricsError::DisconnectedPrediction) => (None, true),
            Err(MetricsError::DisconnectedTruth) => {
                log::warn!("sample {index}: ground truth is disconnected after thresholding");
                (None, false)
            }
            Err(e) => return Err(e),
        },
    };
    Ok(SampleEval { index, mse, ba, compliance_error: ce, disconnected, seconds: None })
}

/// 8-bit binary PGM, 0 -> white and 1 -> black, top row = highest y. 3D
/// fields are written as z-slices stacked vertically.
pub fn write_pgm(path: &Path, grid: Grid, values: &[f64]) -> Result<(), MetricsError> {
    if values.len() != grid.n_elements() {
        return Err(MetricsError::DimensionMismatch("raster size does not match grid".into()));
    }
    let (w, h) = (grid.nx, grid.ny * grid.nz);
    let mut out = Vec::with_capacity(w * h + 32);
    write!(out, "P5\n{w} {h}\n255\n")?;
    for z in 0..grid.nz {
        for y in (0..grid.ny).rev() {
            for x in 0..w {
                let v = values[grid.element_index(x, y, z)].clamp(0.0, 1.0);
                out.push((255.0 * (1.0 - v)).round() as u8);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{standard_bc_case, BcCase, PointLoad};
    use crate::simp::{optimize, SimpConfig};

    #[test]
    fn footnote_example() {
        let mse = mse_metric(&[0.49], &[0.51], None).unwrap();
        assert!((mse - 0.0004).abs() < 1e-15);
        assert_eq!(binary_accuracy(&[0.49], &[0.51], None).unwrap(), 0.0);
    }

    #[test]
    fn basic_values() {
        assert_eq!(mse_metric(&[1.0; 4], &[0.0; 4], None).unwrap(), 1.0);
        assert_eq!(mse_metric(&[0.3; 4], &[0.3; 4], None).unwrap(), 0.0);
        let ba = binary_accuracy(&[0.9, 0.2, 0.7, 0.1], &[1.0, 0.0, 0.0, 0.0], None).unwrap();
        assert_eq!(ba, 0.75);
        assert_eq!(binary_accuracy(&[0.5], &[1.0], None).unwrap(), 1.0);
        assert!(matches!(mse_metric(&[0.0], &[0.0, 1.0], None), Err(MetricsError::DimensionMismatch(_))));
    }

    #[test]
    fn mask_excludes_elements() {
        let mask = [true, false];
        assert_eq!(binary_accuracy(&[1.0, 1.0], &[1.0, 0.0], Some(&mask)).unwrap(), 1.0);
        assert_eq!(symmetric_difference(&[1.0, 1.0], &[0.0, 0.0], Some(&mask)).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn symmetric_difference_is_xor() {
        let a = [0.1, 0.6, 0.9, 0.4];
        let b = [0.7, 0.8, 0.2, 0.3];
        assert_eq!(symmetric_difference(&a, &b, None).unwrap(), vec![1.0, 0.0, 1.0, 0.0]);
        assert!(symmetric_difference(&a, &a, None).unwrap().iter().all(|&v| v == 0.0));
        let not_a: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert!(symmetric_difference(&a, &not_a, None).unwrap().iter().all(|&v| v == 1.0));
    }

    fn solved() -> (Problem, Vec<f64>) {
        let d = DesignDomain::full(Grid::new_2d(24, 12));
        let g = d.grid();
        let load = PointLoad { node: g.node_index(24, 6, 0), force: vec![0.0, -10.0] };
        let bc = standard_bc_case(&d, BcCase::Cantilever, load).unwrap();
        let p = Problem::new(d, bc, 0.5);
        let r = optimize(&p.domain, &p.bc, &MaterialModel::default(), &SimpConfig::default(), None).unwrap();
        (p, r.densities.into_values())
    }

    #[test]
    fn compliance_error_cases() {
        let (p, truth) = solved();
        let m = MaterialModel::default();
        assert_eq!(compliance_error(&truth, &truth, &p, &m).unwrap(), 0.0);

        // Filling a void can only stiffen the binary structure.
        let void = truth.iter().position(|&v| v < 0.5).unwrap();
        let mut filled = truth.clone();
        filled[void] = 1.0;
        let ce = compliance_error(&filled, &truth, &p, &m).unwrap();
        assert!(ce <= 1e-12);
        let bin = |f: &[f64]| {
            let d: Vec<f64> = f.iter().map(|&v| binarize(v) as u8 as f64).collect();
            fea::solve(&p.domain, &p.bc, &DensityField::new(p.grid(), d), &m).unwrap().compliance
        };
        let brute = (bin(&filled) - bin(&truth)) / bin(&truth);
        assert!((ce - brute).abs() <= 1e-12 * brute.abs().max(1.0));

        let empty = vec![0.0; truth.len()];
        assert!(matches!(compliance_error(&empty, &truth, &p, &m), Err(MetricsError::DisconnectedPrediction)));
    }

    #[test]
    fn report_means_match_samples() {
        let s = |i, mse, ba, ce| SampleEval { index: i, mse, ba, compliance_error: ce, disconnected: ce.is_none(), seconds: None };
        let r = EvalReport::from_samples(vec![s(0, 0.1, 0.9, Some(0.2)), s(1, 0.3, 0.7, None), s(2, 0.2, 0.8, Some(-0.1))]).unwrap();
        assert!((r.mse - 0.2).abs() < 1e-15);
        assert!((r.ba - 0.8).abs() < 1e-15);
        assert!((r.compliance_error.unwrap() - 0.05).abs() < 1e-15);
        assert!((r.compliance_error_std.unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(r.disconnected, 1);
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        let g = Grid::new_2d(2, 2);
        write_pgm(&path, g, &[1.0, 0.0, 0.0, 0.5]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[255, 128, 0, 255]);
    }
}
