//! SIMP compliance minimization: material interpolation, adjoint
//! sensitivities, neighbourhood filtering and optimality-criteria updates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fea::{FeaError, FeaSolution, FeaSystem, SolverKind};
use crate::field::DensityField;
use crate::mesh::{BoundaryConditions, DesignDomain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimpError {
    #[error("density {0} outside [0, 1]")]
    OutOfRangeDensity(f64),
    #[error("solution does not match the density field ({solution} vs {densities} elements)")]
    StaleSolution { solution: usize, densities: usize },
    #[error("lagrange multiplier bisection failed (volume fraction {volume:.6}, target {target:.6})")]
    BisectionFailure { volume: f64, target: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fea(#[from] FeaError),
}

/// Modified SIMP interpolation `E(ρ) = E_min + ρ^p (E0 - E_min)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialModel {
    pub e0: f64,
    pub e_min: f64,
    pub penal: f64,
    pub poisson_ratio: f64,
}

impl Default for MaterialModel {
    fn default() -> Self {
        MaterialModel { e0: 1.0, e_min: 1e-9, penal: 3.0, poisson_ratio: 0.3 }
    }
}

impl MaterialModel {
    pub fn validate(&self) -> Result<(), SimpError> {
        if !(self.e0 > self.e_min && self.e_min > 0.0) {
            return Err(SimpError::InvalidConfig(format!(
                "need E0 > E_min > 0, got E0={} E_min={}",
                self.e0, self.e_min
            )));
        }
        if !(self.penal >= 1.0) {
            return Err(SimpError::InvalidConfig(format!("penalization {} < 1", self.penal)));
        }
        Ok(())
    }
}

pub fn simp_modulus(rho: f64, material: &MaterialModel) -> Result<f64, SimpError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(SimpError::OutOfRangeDensity(rho));
    }
    Ok(material.e_min + rho.powf(material.penal) * (material.e0 - material.e_min))
}

/// `dc/dρ_e = -p ρ_e^(p-1) (E0 - E_min) u_eᵀ k0 u_e`, zero on inactive elements.
pub fn compliance_sensitivity(
    solution: &FeaSolution,
    densities: &DensityField,
    material: &MaterialModel,
) -> Result<Vec<f64>, SimpError> {
    let rho = densities.values();
    if solution.element_energy.len() != rho.len() {
        return Err(SimpError::StaleSolution {
            solution: solution.element_energy.len(),
            densities: rho.len(),
        });
    }
    rho.iter()
        .zip(&solution.element_energy)
        .map(|(&r, &energy)| {
            if !(0.0..=1.0).contains(&r) {
                return Err(SimpError::OutOfRangeDensity(r));
            }
            let p = material.penal;
            let slope = if r == 0.0 && p > 1.0 { 0.0 } else { p * r.powf(p - 1.0) };
            Ok(-slope * (material.e0 - material.e_min) * energy)
        })
        .collect()
}

/// Which quantity the neighbourhood filter acts on inside the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterScheme {
    Sensitivity,
    Density,
}

/// Linear hat filter `w_ij = max(0, r - |c_i - c_j|)` over active elements.
#[derive(Clone, Debug)]
pub struct Filter {
    mask: Vec<bool>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
    weight_sums: Vec<f64>,
}

impl Filter {
    pub fn new(domain: &DesignDomain, radius: f64) -> Self {
        let grid = domain.grid();
        let reach = radius.floor() as isize;
        let ext = grid.extents();
        let mut offsets = Vec::with_capacity(grid.n_elements() + 1);
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        let mut weight_sums = vec![0.0; grid.n_elements()];
        offsets.push(0);
        let zreach = if grid.rank == 3 { reach } else { 0 };
        for e in 0..grid.n_elements() {
            if domain.is_active(e) {
                let c = grid.element_coords(e);
                let mut sum = 0.0;
                for dz in -zreach..=zreach {
                    for dy in -reach..=reach {
                        for dx in -reach..=reach {
                            let nc = [c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz];
                            if (0..3).any(|a| nc[a] < 0 || nc[a] as usize >= ext[a]) {
                                continue;
                            }
                            let j = grid.element_index(nc[0] as usize, nc[1] as usize, nc[2] as usize);
                            if !domain.is_active(j) {
                                continue;
                            }
                            let dist = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                            let w = radius - dist;
                            if w > 0.0 {
                                neighbors.push(j);
                                weights.push(w);
                                sum += w;
                            }
                        }
                    }
                }
                weight_sums[e] = sum;
            }
            offsets.push(neighbors.len());
        }
        Filter { mask: domain.mask().to_vec(), offsets, neighbors, weights, weight_sums }
    }

    fn row(&self, e: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[e], self.offsets[e + 1]);
        self.neighbors[a..b].iter().copied().zip(self.weights[a..b].iter().copied())
    }

    /// `Σ_j w_ij x_j / Σ_j w_ij`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|e| {
                if !self.mask[e] {
                    return 0.0;
                }
                let s: f64 = self.row(e).map(|(j, w)| w * x[j]).sum();
                s / self.weight_sums[e]
            })
            .collect()
    }

    /// Chain rule through [`Filter::apply`]: `Σ_i w_ij g_i / Σ_k w_ik`.
    pub fn apply_adjoint(&self, g: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = (0..g.len())
            .map(|i| if self.mask[i] { g[i] / self.weight_sums[i] } else { 0.0 })
            .collect();
        // The weights are symmetric, so row j lists every i with w_ij > 0.
        (0..g.len())
            .map(|j| if self.mask[j] { self.row(j).map(|(i, w)| w * scaled[i]).sum() } else { 0.0 })
            .collect()
    }

    /// Heuristic sensitivity filter:
    /// `Σ_j w_ij x_j dc_j / (max(1e-3, x_i) Σ_j w_ij)`.
    pub fn apply_sensitivity(&self, x: &[f64], dc: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|e| {
                if !self.mask[e] {
                    return 0.0;
                }
                let s: f64 = self.row(e).map(|(j, w)| w * x[j] * dc[j]).sum();
                s / (self.weight_sums[e] * x[e].max(1e-3))
            })
            .collect()
    }
}

/// One density-filter pass over a field.
pub fn density_filter(field: &DensityField, domain: &DesignDomain, radius: f64) -> DensityField {
    DensityField::new(field.grid(), Filter::new(domain, radius).apply(field.values()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimpConfig {
    pub volfrac: f64,
    pub filter_radius: f64,
    pub max_iters: usize,
    pub move_limit: f64,
    pub change_tol: f64,
    pub oc_damping: f64,
    /// Defaults to sensitivity filtering in 2D and density filtering in 3D.
    #[serde(default)]
    pub scheme: Option<FilterScheme>,
}

impl Default for SimpConfig {
    fn default() -> Self {
        SimpConfig {
            volfrac: 0.5,
            filter_radius: 1.5,
            max_iters: 200,
            move_limit: 0.2,
            change_tol: 0.01,
            oc_damping: 0.5,
            scheme: None,
        }
    }
}

impl SimpConfig {
    pub fn validate(&self) -> Result<(), SimpError> {
        let bad = |m: String| Err(SimpError::InvalidConfig(m));
        if !(self.volfrac > 0.0 && self.volfrac < 1.0) {
            return bad(format!("volfrac {} outside (0, 1)", self.volfrac));
        }
        if !(self.filter_radius >= 1.0) {
            return bad(format!("filter radius {} < 1", self.filter_radius));
        }
        if !(self.move_limit > 0.0 && self.move_limit <= 1.0) {
            return bad(format!("move limit {} outside (0, 1]", self.move_limit));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        Ok(())
    }

    pub fn scheme_for(&self, rank: usize) -> FilterScheme {
        self.scheme.unwrap_or(if rank == 2 {
            FilterScheme::Sensitivity
        } else {
            FilterScheme::Density
        })
    }
}

const LAMBDA_LO: f64 = 1e-9;
const LAMBDA_HI: f64 = 1e9;
const BISECTION_CAP: usize = 200;
const VOLUME_SLACK_BELOW: f64 = 1e-4;
const VOLUME_SLACK_ABOVE: f64 = 1e-7;

/// Optimality-criteria update with the volume measured on the densities
/// themselves. Inactive elements (where `dv == 0`) stay at zero.
pub fn oc_update(
    densities: &[f64],
    dc: &[f64],
    dv: &[f64],
    config: &SimpConfig,
) -> Result<Vec<f64>, SimpError> {
    let active = dv.iter().filter(|&&v| v > 0.0).count();
    oc_update_with(densities, dc, dv, config, |x| {
        x.iter().zip(dv).filter(|(_, &v)| v > 0.0).map(|(x, _)| x).sum::<f64>() / active as f64
    })
}

/// As [`oc_update`] but with a caller-supplied volume-fraction measure
/// (e.g. volume of the filtered field).
pub fn oc_update_with(
    x: &[f64],
    dc: &[f64],
    dv: &[f64],
    config: &SimpConfig,
    volume_fraction: impl Fn(&[f64]) -> f64,
) -> Result<Vec<f64>, SimpError> {
    if x.len() != dc.len() || x.len() != dv.len() {
        return Err(SimpError::StaleSolution { solution: dc.len(), densities: x.len() });
    }
    if dc.iter().chain(dv).any(|v| !v.is_finite()) {
        return Err(SimpError::BisectionFailure { volume: f64::NAN, target: config.volfrac });
    }
    let m = config.move_limit;
    let eta = config.oc_damping;
    let target = config.volfrac;
    let update = |lambda: f64, out: &mut Vec<f64>| {
        out.clear();
        out.extend(x.iter().zip(dc).zip(dv).map(|((&rho, &g), &v)| {
            if v <= 0.0 {
                return 0.0;
            }
            let ratio = (-g).max(0.0) / (lambda * v);
            let candidate = rho * ratio.powf(eta);
            candidate.clamp((rho - m).max(0.0), (rho + m).min(1.0))
        }));
    };
    let mut xnew = Vec::with_capacity(x.len());
    let (mut lo, mut hi) = (LAMBDA_LO, LAMBDA_HI);
    for _ in 0..BISECTION_CAP {
        let mid = (lo * hi).sqrt();
        update(mid, &mut xnew);
        let vol = volume_fraction(&xnew);
        if vol > target * (1.0 + VOLUME_SLACK_ABOVE) {
            lo = mid;
        } else if vol < target * (1.0 - VOLUME_SLACK_BELOW) {
            hi = mid;
        } else {
            return Ok(xnew);
        }
    }
    // Either the constraint is inactive (everything pinned at its bounds)
    // or no multiplier reaches the band; accept any feasible point.
    update(hi, &mut xnew);
    let vol = volume_fraction(&xnew);
    if vol <= target * (1.0 + 1e-6) {
        Ok(xnew)
    } else {
        Err(SimpError::BisectionFailure { volume: vol, target })
    }
}

/// Per-iteration trace of the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Compliance of the design entering the iteration.
    pub compliance: f64,
    /// Volume fraction of the updated physical densities.
    pub volume: f64,
    /// Max absolute change of the design variables.
    pub change: f64,
    pub min_density: f64,
    pub max_density: f64,
}

#[derive(Clone, Debug)]
pub struct SimpResult {
    pub densities: DensityField,
    pub history: Vec<f64>,
    pub records: Vec<IterationRecord>,
    pub iterations: usize,
    pub converged: bool,
}

/// Clamp a predicted field into `[0, 1]`, zero inactive elements and smooth
/// it with one density-filter pass.
pub fn warm_start_field(
    prediction: &DensityField,
    domain: &DesignDomain,
    filter_radius: f64,
) -> DensityField {
    density_filter(&prediction.clamped_to(domain), domain, filter_radius)
}

/// Runs SIMP until the max density change drops below `change_tol` or
/// `max_iters` is reached. `initial` is clamped and masked but otherwise
/// used as-is; see [`warm_start_field`] for preparing network output.
pub fn optimize(
    domain: &DesignDomain,
    bc: &BoundaryConditions,
    material: &MaterialModel,
    config: &SimpConfig,
    initial: Option<&DensityField>,
) -> Result<SimpResult, SimpError> {
    optimize_with_solver(domain, bc, material, config, initial, SolverKind::Auto)
}

pub fn optimize_with_solver(
    domain: &DesignDomain,
    bc: &BoundaryConditions,
    material: &MaterialModel,
    config: &SimpConfig,
    initial: Option<&DensityField>,
    solver: SolverKind,
) -> Result<SimpResult, SimpError> {
    material.validate()?;
    config.validate()?;
    let grid = domain.grid();
    if let Some(init) = initial {
        if init.grid() != grid {
            return Err(SimpError::InvalidConfig(format!(
                "initial field grid {} does not match domain {}",
                init.grid(),
                grid
            )));
        }
    }
    let system = FeaSystem::new(domain, bc, material.poisson_ratio)?.with_solver(solver);
    let filter = Filter::new(domain, config.filter_radius);
    let scheme = config.scheme_for(domain.rank());
    let mask = domain.mask();
    let n_active = domain.active_count() as f64;
    let active_volume = |v: &[f64]| -> f64 {
        v.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum::<f64>() / n_active
    };
    let physical = |x: &[f64]| -> Vec<f64> {
        match scheme {
            FilterScheme::Sensitivity => x.to_vec(),
            FilterScheme::Density => filter.apply(x),
        }
    };

    let mut x = match initial {
        Some(init) => init.clamped_to(domain).into_values(),
        None => DensityField::filled(domain, config.volfrac).into_values(),
    };
    let mut xphys = physical(&x);
    let dv_unit: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mut history = Vec::new();
    let mut records = Vec::new();
    let mut converged = false;

    for iteration in 1..=config.max_iters {
        let field = DensityField::new(grid, xphys.clone());
        let solution = system.solve(&field, material)?;
        let raw_dc = compliance_sensitivity(&solution, &field, material)?;
        let (dc, dv) = match scheme {
            FilterScheme::Sensitivity => (filter.apply_sensitivity(&x, &raw_dc), dv_unit.clone()),
            FilterScheme::Density => (filter.apply_adjoint(&raw_dc), filter.apply_adjoint(&dv_unit)),
        };
        let xnew = match scheme {
            FilterScheme::Sensitivity => oc_update_with(&x, &dc, &dv, config, active_volume)?,
            FilterScheme::Density => {
                oc_update_with(&x, &dc, &dv, config, |v| active_volume(&filter.apply(v)))?
            }
        };
        let change = x
            .iter()
            .zip(&xnew)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| (a - b).abs())
            .fold(0.0, f64::max);
        x = xnew;
        xphys = physical(&x);

        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (&v, _) in xphys.iter().zip(mask).filter(|(_, &m)| m) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let record = IterationRecord {
            compliance: solution.compliance,
            volume: active_volume(&xphys),
            change,
            min_density: lo,
            max_density: hi,
        };
        debug_assert!(record.min_density >= 0.0 && record.max_density <= 1.0);
        log::debug!(
            "simp it {iteration}: c={:.6e} vol={:.4} change={:.4}",
            record.compliance,
            record.volume,
            change
        );
        history.push(solution.compliance);
        records.push(record);
        if change < config.change_tol {
            converged = true;
            break;
        }
    }
    let iterations = records.len();
    Ok(SimpResult {
        densities: DensityField::new(grid, xphys),
        history,
        records,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fea::solve;
    use crate::mesh::{standard_bc_case, BcCase, Grid, PointLoad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn modulus_endpoints() {
        let m = MaterialModel::default();
        assert_eq!(simp_modulus(1.0, &m).unwrap(), 1.0);
        assert_eq!(simp_modulus(0.0, &m).unwrap(), 1e-9);
        let half = simp_modulus(0.5, &m).unwrap();
        assert!((half - (0.125 * (1.0 - 1e-9) + 1e-9)).abs() < 1e-15);
        assert_eq!(simp_modulus(1.2, &m), Err(SimpError::OutOfRangeDensity(1.2)));
    }

    fn cantilever(nx: usize, ny: usize) -> (DesignDomain, BoundaryConditions) {
        let d = DesignDomain::full(Grid::new_2d(nx, ny));
        let g = d.grid();
        let load = PointLoad { node: g.node_index(nx, ny / 2, 0), force: vec![0.0, -1.0] };
        let bc = standard_bc_case(&d, BcCase::Cantilever, load).unwrap();
        (d, bc)
    }

    #[test]
    fn sensitivities_are_nonpositive_and_vanish_at_zero() {
        let (d, bc) = cantilever(6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rho = DensityField::filled(&d, 0.5);
        for v in rho.values_mut() {
            *v = rng.gen_range(0.1..1.0);
        }
        rho.values_mut()[5] = 0.0;
        let mat = MaterialModel::default();
        let sol = solve(&d, &bc, &rho, &mat).unwrap();
        let dc = compliance_sensitivity(&sol, &rho, &mat).unwrap();
        assert!(dc.iter().all(|&g| g <= 0.0));
        assert_eq!(dc[5], 0.0);
    }

    #[test]
    fn sensitivities_match_central_differences() {
        let (d, bc) = cantilever(6, 4);
        let mat = MaterialModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rho = DensityField::filled(&d, 0.5);
        for v in rho.values_mut() {
            *v = rng.gen_range(0.2..0.9);
        }
        let sol = solve(&d, &bc, &rho, &mat).unwrap();
        let dc = compliance_sensitivity(&sol, &rho, &mat).unwrap();
        let h = 1e-6;
        for e in 0..rho.values().len() {
            let mut plus = rho.clone();
            plus.values_mut()[e] += h;
            let mut minus = rho.clone();
            minus.values_mut()[e] -= h;
            let cp = solve(&d, &bc, &plus, &mat).unwrap().compliance;
            let cm = solve(&d, &bc, &minus, &mat).unwrap().compliance;
            let fd = (cp - cm) / (2.0 * h);
            assert!(((fd - dc[e]) / dc[e]).abs() <= 1e-4, "element {e}: fd {fd} vs {}", dc[e]);
        }
    }

    #[test]
    fn stale_solution_is_detected() {
        let (d, bc) = cantilever(4, 2);
        let mat = MaterialModel::default();
        let sol = solve(&d, &bc, &DensityField::filled(&d, 0.5), &mat).unwrap();
        let other = DensityField::filled(&DesignDomain::full(Grid::new_2d(5, 2)), 0.5);
        assert!(matches!(
            compliance_sensitivity(&sol, &other, &mat),
            Err(SimpError::StaleSolution { .. })
        ));
    }

    #[test]
    fn filter_keeps_uniform_fields() {
        let d = DesignDomain::full(Grid::new_2d(7, 5));
        let f = density_filter(&DensityField::filled(&d, 0.37), &d, 1.5);
        assert!(f.values().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn filter_spike_weights() {
        let d = DesignDomain::full(Grid::new_2d(5, 5));
        let mut spike = DensityField::filled(&d, 0.0);
        spike.values_mut()[12] = 1.0;
        let out = density_filter(&spike, &d, 1.5);
        // Self weight 1.5, four face neighbours at 0.5, four diagonal
        // neighbours at 1.5 - sqrt(2).
        let diag = 1.5 - 2f64.sqrt();
        let expected = 1.5 / (1.5 + 4.0 * 0.5 + 4.0 * diag);
        assert!((out.values()[12] - expected).abs() < 1e-14);
        assert!(out.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    fn brute_force_sensitivity(d: &DesignDomain, r: f64, x: &[f64], dc: &[f64]) -> Vec<f64> {
        let g = d.grid();
        let n = g.n_elements();
        let mut out = vec![0.0; n];
        for i in 0..n {
            if !d.is_active(i) {
                continue;
            }
            let ci = g.element_coords(i);
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..n {
                if !d.is_active(j) {
                    continue;
                }
                let cj = g.element_coords(j);
                let dist = (0..3)
                    .map(|a| (ci[a] as f64 - cj[a] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let w = r - dist;
                if w > 0.0 {
                    num += w * x[j] * dc[j];
                    den += w;
                }
            }
            out[i] = num / (den * x[i].max(1e-3));
        }
        out
    }

    #[test]
    fn sensitivity_filter_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (nx, ny) in [(8, 8), (5, 7), (8, 3)] {
            let d = crate::mesh::MaskBuilder::new(Grid::new_2d(nx, ny))
                .remove_box([0, 0, 0], [2, 1, 1])
                .build()
                .unwrap();
            for r in [1.0, 1.5, 2.3] {
                let x: Vec<f64> = (0..nx * ny).map(|_| rng.gen_range(0.0..1.0)).collect();
                let dc: Vec<f64> = (0..nx * ny).map(|_| -rng.gen_range(0.0..5.0)).collect();
                let fast = Filter::new(&d, r).apply_sensitivity(&x, &dc);
                assert_eq!(fast, brute_force_sensitivity(&d, r, &x, &dc));
            }
        }
    }

    #[test]
    fn adjoint_filter_is_transpose() {
        let d = DesignDomain::full(Grid::new_3d(4, 3, 3));
        let f = Filter::new(&d, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = f.apply(&a).iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(f.apply_adjoint(&b)).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn oc_uniform_fixed_point() {
        let cfg = SimpConfig::default();
        let x = vec![0.5; 20];
        let out = oc_update(&x, &[-2.0; 20], &[1.0; 20], &cfg).unwrap();
        assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-4));
    }

    #[test]
    fn oc_hits_volume_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = SimpConfig::default();
        for _ in 0..20 {
            let x: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
            let dc: Vec<f64> = (0..50).map(|_| -rng.gen_range(0.0..3.0)).collect();
            let out = oc_update(&x, &dc, &[1.0; 50], &cfg).unwrap();
            let vol = out.iter().sum::<f64>() / 50.0;
            assert!((vol - 0.5).abs() / 0.5 <= 1e-4);
            assert!(out.iter().zip(&x).all(|(n, o)| (n - o).abs() <= 0.2 + 1e-12));
        }
    }

    #[test]
    fn oc_zero_sensitivity_removes_material() {
        let cfg = SimpConfig::default();
        let x = vec![0.5, 0.5, 0.5, 0.5];
        let out = oc_update(&x, &[0.0, -1.0, -1.0, -1.0], &[1.0; 4], &cfg).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn warm_start_from_optimum_stops_immediately() {
        let (d, bc) = cantilever(24, 8);
        let mat = MaterialModel::default();
        let cfg = SimpConfig::default();
        let cold = optimize(&d, &bc, &mat, &cfg, None).unwrap();
        assert!(cold.converged);
        let warm = optimize(&d, &bc, &mat, &cfg, Some(&cold.densities)).unwrap();
        assert!(warm.iterations <= 2, "took {}", warm.iterations);
    }

    #[test]
    fn optimize_is_deterministic() {
        let (d, bc) = cantilever(16, 6);
        let mat = MaterialModel::default();
        let cfg = SimpConfig { max_iters: 15, ..SimpConfig::default() };
        let a = optimize(&d, &bc, &mat, &cfg, None).unwrap();
        let b = optimize(&d, &bc, &mat, &cfg, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.densities, b.densities);
    }

    #[test]
    fn density_scheme_in_3d_respects_constraints() {
        let d = DesignDomain::full(Grid::new_3d(8, 4, 2));
        let g = d.grid();
        let load = PointLoad { node: g.node_index(8, 2, 1), force: vec![0.0, -1.0, 0.0] };
        let bc = standard_bc_case(&d, BcCase::Cantilever, load).unwrap();
        let cfg = SimpConfig { max_iters: 20, ..SimpConfig::default() };
        let res = optimize(&d, &bc, &MaterialModel::default(), &cfg, None).unwrap();
        for r in &res.records {
            assert!(r.volume <= 0.5 * (1.0 + 1e-6));
            assert!((r.volume - 0.5).abs() / 0.5 <= 1e-4);
            assert!(r.min_density >= 0.0 && r.max_density <= 1.0);
        }
    }
}
