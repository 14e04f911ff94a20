//! Linear-elastic finite elements on the voxel grid: Q4 plane-stress and H8
//! element matrices, reduced global assembly and the linear solve.

use thiserror::Error;

use crate::field::DensityField;
use crate::mesh::{BoundaryConditions, DesignDomain, DofMap, Grid, MeshError};
use crate::simp::{simp_modulus, MaterialModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeaError {
    #[error("poisson ratio {0} outside [0, 0.5)")]
    InvalidPoissonRatio(f64),
    #[error("stiffness matrix is singular (insufficient constraints)")]
    SingularSystem,
    #[error("conjugate gradients did not converge in {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("density field does not match the domain: {0}")]
    DensityMismatch(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Unit-modulus element stiffness matrix on a unit square / cube.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementStiffness {
    pub rank: usize,
    pub poisson_ratio: f64,
    pub size: usize,
    pub k0: Vec<f64>,
}

impl ElementStiffness {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.k0[i * self.size + j]
    }

    /// `u_eᵀ k0 u_e` for an element displacement vector.
    pub fn energy(&self, ue: &[f64]) -> f64 {
        let n = self.size;
        let mut total = 0.0;
        for i in 0..n {
            let row = &self.k0[i * n..(i + 1) * n];
            let ku: f64 = row.iter().zip(ue).map(|(k, u)| k * u).sum();
            total += ue[i] * ku;
        }
        total
    }
}

/// Bilinear quadrilateral, plane stress, unit E.
pub fn element_stiffness_q4(poisson_ratio: f64) -> Result<ElementStiffness, FeaError> {
    element_stiffness(2, poisson_ratio)
}

/// Trilinear hexahedron, unit E.
pub fn element_stiffness_h8(poisson_ratio: f64) -> Result<ElementStiffness, FeaError> {
    element_stiffness(3, poisson_ratio)
}

pub fn element_stiffness(rank: usize, nu: f64) -> Result<ElementStiffness, FeaError> {
    if !(0.0..0.5).contains(&nu) || !nu.is_finite() {
        return Err(FeaError::InvalidPoissonRatio(nu));
    }
    assert!(rank == 2 || rank == 3, "rank must be 2 or 3");
    let (lambda, mu) = if rank == 2 {
        (nu / (1.0 - nu * nu), 1.0 / (2.0 * (1.0 + nu)))
    } else {
        (nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), 1.0 / (2.0 * (1.0 + nu)))
    };
    let nodes = 1usize << rank;
    let size = nodes * rank;
    let mut k0 = vec![0.0; size * size];
    for i in 0..nodes {
        for j in 0..nodes {
            let g = |k: usize, l: usize| gradient_product_integral(rank, i, j, k, l);
            let trace: f64 = (0..rank).map(|k| g(k, k)).sum();
            for p in 0..rank {
                for q in 0..rank {
                    let mut v = lambda * g(p, q) + mu * g(q, p);
                    if p == q {
                        v += mu * trace;
                    }
                    k0[(i * rank + p) * size + j * rank + q] = v;
                }
            }
        }
    }
    Ok(ElementStiffness { rank, poisson_ratio: nu, size, k0 })
}

/// Corner bit of local node `i` along `axis` (0 = low face, 1 = high face).
#[inline]
pub(crate) fn corner_bit(i: usize, axis: usize) -> usize {
    match axis {
        0 => usize::from(matches!(i % 4, 1 | 2)),
        1 => usize::from(matches!(i % 4, 2 | 3)),
        _ => i / 4,
    }
}

/// Exact `∫ ∂N_i/∂x_k ∂N_j/∂x_l dV` over the unit element, as a product of
/// one-dimensional integrals of linear shape functions.
fn gradient_product_integral(rank: usize, i: usize, j: usize, k: usize, l: usize) -> f64 {
    let sign = |b: usize| if b == 1 { 1.0 } else { -1.0 };
    let mut v = 1.0;
    for a in 0..rank {
        let (bi, bj) = (corner_bit(i, a), corner_bit(j, a));
        v *= match (a == k, a == l) {
            (true, true) => {
                if bi == bj {
                    1.0
                } else {
                    -1.0
                }
            }
            (true, false) => 0.5 * sign(bi),
            (false, true) => 0.5 * sign(bj),
            (false, false) => {
                if bi == bj {
                    1.0 / 3.0
                } else {
                    1.0 / 6.0
                }
            }
        };
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SolverKind {
    /// Banded Cholesky when the band is affordable, otherwise CG.
    #[default]
    Auto,
    Direct,
    ConjugateGradient,
}

/// Result of one linear-elastic analysis.
#[derive(Clone, Debug)]
pub struct FeaSolution {
    /// Displacements for every grid dof; fixed and inactive dofs are zero.
    pub u: Vec<f64>,
    /// Nodal loads for every grid dof.
    pub f: Vec<f64>,
    pub compliance: f64,
    /// Unit-modulus strain energy `u_eᵀ k0 u_e` per element (zero when inactive).
    pub element_energy: Vec<f64>,
}

/// Compressed sparse row matrix over the free dofs.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
            *yi = self.col_idx[a..b].iter().zip(&self.values[a..b]).map(|(&j, v)| v * x[j]).sum();
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
                (a..b).find(|&p| self.col_idx[p] == i).map_or(0.0, |p| self.values[p])
            })
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for i in 0..self.n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[i][self.col_idx[p]] = self.values[p];
            }
        }
        out
    }
}

const NONE: u32 = u32::MAX;

/// Precomputed assembly structure for a fixed domain and boundary conditions.
/// Reused across SIMP iterations where only the densities change.
#[derive(Clone, Debug)]
pub struct FeaSystem {
    grid: Grid,
    mask: Vec<bool>,
    ke: ElementStiffness,
    dofmap: DofMap,
    /// Full dof → reduced index, or `usize::MAX` for fixed / inactive dofs.
    free_index: Vec<usize>,
    free_dofs: Vec<usize>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    /// Per active element, CSR slots of its local `(i, j)` pairs.
    elem_slots: Vec<u32>,
    elem_offset: Vec<usize>,
    f_full: Vec<f64>,
    f_free: Vec<f64>,
    band_perm: Vec<usize>,
    bandwidth: usize,
    solver: SolverKind,
}

/// Band factorization budget (multiply-adds) below which `Auto` picks the
/// direct solver.
const DIRECT_BUDGET: f64 = 2.0e9;

impl FeaSystem {
    pub fn new(
        domain: &DesignDomain,
        bc: &BoundaryConditions,
        poisson_ratio: f64,
    ) -> Result<Self, FeaError> {
        bc.validate(domain)?;
        if bc.fixed.is_empty() {
            return Err(FeaError::SingularSystem);
        }
        let grid = domain.grid();
        let rank = grid.rank;
        let ke = element_stiffness(rank, poisson_ratio)?;
        let dofmap = DofMap::new(domain);
        let ndof = dofmap.dof_count();

        let mut is_free = vec![false; ndof];
        for (n, &active) in domain.active_nodes().iter().enumerate() {
            if active {
                for a in 0..rank {
                    is_free[n * rank + a] = true;
                }
            }
        }
        for &(n, a) in &bc.fixed {
            is_free[n * rank + a] = false;
        }
        let mut free_index = vec![usize::MAX; ndof];
        let mut free_dofs = Vec::new();
        for (d, &free) in is_free.iter().enumerate() {
            if free {
                free_index[d] = free_dofs.len();
                free_dofs.push(d);
            }
        }
        let nfree = free_dofs.len();
        if nfree == 0 {
            return Err(FeaError::SingularSystem);
        }

        // Sparsity pattern.
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); nfree];
        let mut edofs = [0usize; 24];
        for e in (0..grid.n_elements()).filter(|&e| domain.is_active(e)) {
            let m = dofmap.element_dofs(e, &mut edofs);
            for &gi in &edofs[..m] {
                let ri = free_index[gi];
                if ri == usize::MAX {
                    continue;
                }
                for &gj in &edofs[..m] {
                    let rj = free_index[gj];
                    if rj != usize::MAX {
                        rows[ri].push(rj);
                    }
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(nfree + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        drop(rows);

        let mut elem_slots = Vec::new();
        let mut elem_offset = vec![usize::MAX; grid.n_elements()];
        for e in (0..grid.n_elements()).filter(|&e| domain.is_active(e)) {
            elem_offset[e] = elem_slots.len();
            let m = dofmap.element_dofs(e, &mut edofs);
            for &gi in &edofs[..m] {
                let ri = free_index[gi];
                for &gj in &edofs[..m] {
                    let rj = free_index[gj];
                    if ri == usize::MAX || rj == usize::MAX {
                        elem_slots.push(NONE);
                    } else {
                        let cols = &col_idx[row_ptr[ri]..row_ptr[ri + 1]];
                        let p = cols.binary_search(&rj).expect("pattern contains element pair");
                        elem_slots.push((row_ptr[ri] + p) as u32);
                    }
                }
            }
        }

        let mut f_full = vec![0.0; ndof];
        for load in &bc.loads {
            for (a, &fa) in load.force.iter().enumerate() {
                f_full[load.node * rank + a] += fa;
            }
        }
        let f_free: Vec<f64> = free_dofs.iter().map(|&d| f_full[d]).collect();

        let band_perm = band_ordering(&grid, &free_index, rank);
        let mut bandwidth = 0;
        for i in 0..nfree {
            for &j in &col_idx[row_ptr[i]..row_ptr[i + 1]] {
                bandwidth = bandwidth.max(band_perm[i].abs_diff(band_perm[j]));
            }
        }

        Ok(FeaSystem {
            grid,
            mask: domain.mask().to_vec(),
            ke,
            dofmap,
            free_index,
            free_dofs,
            row_ptr,
            col_idx,
            elem_slots,
            elem_offset,
            f_full,
            f_free,
            band_perm,
            bandwidth,
            solver: SolverKind::Auto,
        })
    }

    pub fn with_solver(mut self, solver: SolverKind) -> Self {
        self.solver = solver;
        self
    }

    pub fn element_stiffness(&self) -> &ElementStiffness {
        &self.ke
    }

    pub fn free_dof_count(&self) -> usize {
        self.free_dofs.len()
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    fn check_densities(&self, densities: &DensityField) -> Result<(), FeaError> {
        if densities.grid() != self.grid {
            return Err(FeaError::DensityMismatch(format!(
                "field grid {} vs domain grid {}",
                densities.grid(),
                self.grid
            )));
        }
        for (e, &rho) in densities.values().iter().enumerate() {
            if self.mask[e] && !(0.0..=1.0).contains(&rho) {
                return Err(FeaError::DensityMismatch(format!(
                    "density {rho} of element {e} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Reduced stiffness `K = Σ E_e(ρ_e) k0` over free dofs, accumulated in
    /// element order.
    pub fn assemble(
        &self,
        densities: &DensityField,
        material: &MaterialModel,
    ) -> Result<CsrMatrix, FeaError> {
        self.check_densities(densities)?;
        let size = self.ke.size;
        let mut values = vec![0.0; self.col_idx.len()];
        for e in 0..self.grid.n_elements() {
            if !self.mask[e] {
                continue;
            }
            let modulus = simp_modulus(densities.values()[e], material)
                .map_err(|err| FeaError::DensityMismatch(err.to_string()))?;
            let slots = &self.elem_slots[self.elem_offset[e]..self.elem_offset[e] + size * size];
            for (&slot, &k) in slots.iter().zip(&self.ke.k0) {
                if slot != NONE {
                    values[slot as usize] += modulus * k;
                }
            }
        }
        Ok(CsrMatrix {
            n: self.free_dofs.len(),
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values,
        })
    }

    pub fn solve(
        &self,
        densities: &DensityField,
        material: &MaterialModel,
    ) -> Result<FeaSolution, FeaError> {
        let k = self.assemble(densities, material)?;
        let n = k.n;
        let direct_cost = n as f64 * (self.bandwidth as f64).powi(2) / 2.0;
        let use_direct = match self.solver {
            SolverKind::Direct => true,
            SolverKind::ConjugateGradient => false,
            SolverKind::Auto => direct_cost <= DIRECT_BUDGET,
        };
        let u_free = if use_direct {
            banded_cholesky_solve(&k, &self.band_perm, self.bandwidth, &self.f_free)?
        } else {
            pcg_solve(&k, &self.f_free, 1e-8, 10 * n)?
        };

        let mut u = vec![0.0; self.f_full.len()];
        for (r, &d) in self.free_dofs.iter().enumerate() {
            u[d] = u_free[r];
        }
        let compliance: f64 = self.f_full.iter().zip(&u).map(|(f, u)| f * u).sum();

        let mut element_energy = vec![0.0; self.grid.n_elements()];
        let mut edofs = [0usize; 24];
        let mut ue = [0.0f64; 24];
        for (e, energy) in element_energy.iter_mut().enumerate() {
            if !self.mask[e] {
                continue;
            }
            let m = self.dofmap.element_dofs(e, &mut edofs);
            for i in 0..m {
                ue[i] = u[edofs[i]];
            }
            *energy = self.ke.energy(&ue[..m]);
        }
        Ok(FeaSolution { u, f: self.f_full.clone(), compliance, element_energy })
    }

    /// Reduced index of a full dof, if it is free.
    pub fn free_index(&self, dof: usize) -> Option<usize> {
        self.free_index.get(dof).copied().filter(|&i| i != usize::MAX)
    }
}

/// One-shot analysis.
pub fn solve(
    domain: &DesignDomain,
    bc: &BoundaryConditions,
    densities: &DensityField,
    material: &MaterialModel,
) -> Result<FeaSolution, FeaError> {
    FeaSystem::new(domain, bc, material.poisson_ratio)?.solve(densities, material)
}

/// Orders free dofs node by node with the shortest grid axis varying fastest,
/// which keeps the band narrow on structured grids.
fn band_ordering(grid: &Grid, free_index: &[usize], rank: usize) -> Vec<usize> {
    let ext = grid.node_extents();
    let mut axes = [0usize, 1, 2];
    axes.sort_by_key(|&a| (ext[a], a));
    let nfree = free_index.iter().filter(|&&i| i != usize::MAX).count();
    let mut perm = vec![0usize; nfree];
    let mut next = 0;
    let mut c = [0usize; 3];
    for s in 0..ext[axes[2]] {
        c[axes[2]] = s;
        for m in 0..ext[axes[1]] {
            c[axes[1]] = m;
            for f in 0..ext[axes[0]] {
                c[axes[0]] = f;
                let node = grid.node_index(c[0], c[1], c[2]);
                for a in 0..rank {
                    let r = free_index[node * rank + a];
                    if r != usize::MAX {
                        perm[r] = next;
                        next += 1;
                    }
                }
            }
        }
    }
    perm
}

/// Relative pivot below which the factorization reports a singular system.
const PIVOT_TOL: f64 = 1e-11;

fn banded_cholesky_solve(
    k: &CsrMatrix,
    perm: &[usize],
    bw: usize,
    rhs: &[f64],
) -> Result<Vec<f64>, FeaError> {
    let n = k.n;
    let w = bw + 1;
    // Row i holds L[i][i-bw ..= i] at offsets 0..=bw.
    let mut band = vec![0.0; n * w];
    for i in 0..n {
        let pi = perm[i];
        for p in k.row_ptr[i]..k.row_ptr[i + 1] {
            let pj = perm[k.col_idx[p]];
            if pj <= pi {
                band[pi * w + (pj + bw - pi)] = k.values[p];
            }
        }
    }
    for i in 0..n {
        let j0 = i.saturating_sub(bw);
        for j in j0..=i {
            // Overlap of rows i and j to the left of column j.
            let k0 = j0.max(j.saturating_sub(bw));
            let mut s = band[i * w + (j + bw - i)];
            if k0 < j {
                let ri = &band[i * w + (k0 + bw - i)..i * w + (j + bw - i)];
                let rj = &band[j * w + (k0 + bw - j)..j * w + bw];
                s -= dot(ri, rj);
            }
            if i == j {
                let orig = band[i * w + bw];
                if !(s > PIVOT_TOL * orig.abs()) || !s.is_finite() {
                    return Err(FeaError::SingularSystem);
                }
                band[i * w + bw] = s.sqrt();
            } else {
                band[i * w + (j + bw - i)] = s / band[j * w + bw];
            }
        }
    }
    let mut y = vec![0.0; n];
    for (i, &r) in rhs.iter().enumerate() {
        y[perm[i]] = r;
    }
    for i in 0..n {
        let j0 = i.saturating_sub(bw);
        let s = dot(&band[i * w + (j0 + bw - i)..i * w + bw], &y[j0..i]);
        y[i] = (y[i] - s) / band[i * w + bw];
    }
    for i in (0..n).rev() {
        y[i] /= band[i * w + bw];
        let yi = y[i];
        let j0 = i.saturating_sub(bw);
        for j in j0..i {
            y[j] -= band[i * w + (j + bw - i)] * yi;
        }
    }
    Ok((0..n).map(|i| y[perm[i]]).collect())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Jacobi-preconditioned conjugate gradients.
pub fn pcg_solve(k: &CsrMatrix, b: &[f64], rtol: f64, max_iter: usize) -> Result<Vec<f64>, FeaError> {
    let n = k.n;
    let diag = k.diagonal();
    if diag.iter().any(|&d| !(d > 0.0)) {
        return Err(FeaError::SingularSystem);
    }
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        k.matvec(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            return Err(FeaError::SingularSystem);
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        let rnorm = dot(&r, &r).sqrt();
        if rnorm <= rtol * bnorm {
            log::trace!("pcg converged in {} iterations", it + 1);
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let residual = dot(&r, &r).sqrt() / bnorm;
    Err(FeaError::NonConvergence { iterations: max_iter, residual })
}
