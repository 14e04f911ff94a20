//! Voxel design domains, boundary conditions and element/node/dof numbering.
//!
//! Elements and nodes are numbered row-major with x fastest, then y, then z.
//! The y axis points "up": y = 0 is the bottom edge of a beam.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("design domain has no active element")]
    EmptyDomain,
    #[error("active region is not face-connected ({components} components)")]
    DisconnectedDomain { components: usize },
    #[error("unknown boundary-condition case `{0}`")]
    UnknownCase(String),
    #[error("load node {0} is outside the design domain or its admissible region")]
    LoadOutsideDomain(usize),
    #[error("node {0} does not touch any active element")]
    InactiveNode(usize),
    #[error("axis {axis} out of range for a rank-{rank} domain")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("boundary-condition case {0} constrains no active node")]
    NoSupports(BcCase),
}

/// Structured grid extents in elements. `nz == 1` for 2D grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub rank: usize,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Grid {
    pub fn new_2d(nx: usize, ny: usize) -> Self {
        Grid { rank: 2, nx, ny, nz: 1 }
    }

    pub fn new_3d(nx: usize, ny: usize, nz: usize) -> Self {
        Grid { rank: 3, nx, ny, nz }
    }

    /// Builds a grid from the wire ordering `[ny, nx]` or `[ny, nx, nz]`.
    pub fn from_dims(dims: &[usize]) -> Result<Self, MeshError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(MeshError::DimensionMismatch(format!(
                "all dims must be >= 1, got {dims:?}"
            )));
        }
        match *dims {
            [ny, nx] => Ok(Grid::new_2d(nx, ny)),
            [ny, nx, nz] => Ok(Grid::new_3d(nx, ny, nz)),
            _ => Err(MeshError::DimensionMismatch(format!(
                "expected 2 or 3 dims, got {}",
                dims.len()
            ))),
        }
    }

    /// Wire ordering `[ny, nx(, nz)]`.
    pub fn dims(&self) -> Vec<usize> {
        if self.rank == 2 {
            vec![self.ny, self.nx]
        } else {
            vec![self.ny, self.nx, self.nz]
        }
    }

    /// Extents as `[nx, ny, nz]`.
    pub fn extents(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn n_elements(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Node lattice extents. The z extent is 1 for 2D grids.
    pub fn node_extents(&self) -> [usize; 3] {
        if self.rank == 2 {
            [self.nx + 1, self.ny + 1, 1]
        } else {
            [self.nx + 1, self.ny + 1, self.nz + 1]
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.node_extents().iter().product()
    }

    pub fn nodes_per_element(&self) -> usize {
        1 << self.rank
    }

    #[inline]
    pub fn element_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn element_coords(&self, e: usize) -> [usize; 3] {
        let x = e % self.nx;
        let y = (e / self.nx) % self.ny;
        let z = e / (self.nx * self.ny);
        [x, y, z]
    }

    #[inline]
    pub fn node_index(&self, x: usize, y: usize, z: usize) -> usize {
        let [ex, ey, _] = self.node_extents();
        x + ex * (y + ey * z)
    }

    #[inline]
    pub fn node_coords(&self, n: usize) -> [usize; 3] {
        let [ex, ey, _] = self.node_extents();
        [n % ex, (n / ex) % ey, n / (ex * ey)]
    }

    /// Corner nodes of an element: counter-clockwise from the lower-left
    /// corner on the bottom face, then the same on the top face in 3D.
    pub fn element_nodes(&self, e: usize) -> ([usize; 8], usize) {
        let [x, y, z] = self.element_coords(e);
        let quad = |z: usize| {
            [
                self.node_index(x, y, z),
                self.node_index(x + 1, y, z),
                self.node_index(x + 1, y + 1, z),
                self.node_index(x, y + 1, z),
            ]
        };
        let mut out = [0usize; 8];
        let bottom = quad(z);
        out[..4].copy_from_slice(&bottom);
        if self.rank == 3 {
            out[4..].copy_from_slice(&quad(z + 1));
            (out, 8)
        } else {
            (out, 4)
        }
    }

    /// Elements sharing the given node (up to 4 in 2D, 8 in 3D), paired with
    /// a flag telling whether the cell exists inside the grid.
    pub fn node_cells(&self, n: usize) -> Vec<Option<usize>> {
        let [x, y, z] = self.node_coords(n);
        let zs: &[isize] = if self.rank == 3 { &[-1, 0] } else { &[0] };
        let mut out = Vec::with_capacity(8);
        for &dz in zs {
            for dy in [-1isize, 0] {
                for dx in [-1isize, 0] {
                    let (cx, cy, cz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    let inside = cx >= 0
                        && cy >= 0
                        && cz >= 0
                        && (cx as usize) < self.nx
                        && (cy as usize) < self.ny
                        && (cz as usize) < self.nz;
                    out.push(inside.then(|| self.element_index(cx as usize, cy as usize, cz as usize)));
                }
            }
        }
        out
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.rank == 2 {
            write!(f, "{}x{}", self.ny, self.nx)
        } else {
            write!(f, "{}x{}x{}", self.ny, self.nx, self.nz)
        }
    }
}

/// A voxel design domain: grid plus active-element mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignDomain {
    grid: Grid,
    mask: Vec<bool>,
    active_nodes: Vec<bool>,
    active_count: usize,
    element_size: f64,
}

/// Validates and builds a domain from wire-ordered dims and a mask.
pub fn make_domain(dims: &[usize], mask: Vec<bool>) -> Result<DesignDomain, MeshError> {
    DesignDomain::new(Grid::from_dims(dims)?, mask)
}

impl DesignDomain {
    pub fn new(grid: Grid, mask: Vec<bool>) -> Result<Self, MeshError> {
        if mask.len() != grid.n_elements() {
            return Err(MeshError::DimensionMismatch(format!(
                "mask has {} entries, grid {} has {} elements",
                mask.len(),
                grid,
                grid.n_elements()
            )));
        }
        let active_count = mask.iter().filter(|&&m| m).count();
        if active_count == 0 {
            return Err(MeshError::EmptyDomain);
        }
        let components = count_components(&grid, &mask);
        if components != 1 {
            return Err(MeshError::DisconnectedDomain { components });
        }
        let mut active_nodes = vec![false; grid.n_nodes()];
        for e in (0..grid.n_elements()).filter(|&e| mask[e]) {
            let (nodes, k) = grid.element_nodes(e);
            for &n in &nodes[..k] {
                active_nodes[n] = true;
            }
        }
        Ok(DesignDomain {
            grid,
            mask,
            active_nodes,
            active_count,
            element_size: 1.0,
        })
    }

    /// Full rectangle / box.
    pub fn full(grid: Grid) -> Self {
        let n = grid.n_elements();
        Self::new(grid, vec![true; n]).expect("a full grid is always a valid domain")
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn rank(&self) -> usize {
        self.grid.rank
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_active(&self, e: usize) -> bool {
        self.mask[e]
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    pub fn element_size(&self) -> f64 {
        self.element_size
    }

    pub fn element_volume(&self) -> f64 {
        self.element_size.powi(self.grid.rank as i32)
    }

    /// True when the node touches at least one active element.
    pub fn node_is_active(&self, n: usize) -> bool {
        self.active_nodes.get(n).copied().unwrap_or(false)
    }

    pub fn active_nodes(&self) -> &[bool] {
        &self.active_nodes
    }

    /// A node on the boundary of the active region: it touches an active
    /// element and at least one inactive or out-of-grid cell.
    pub fn is_boundary_node(&self, n: usize) -> bool {
        if !self.node_is_active(n) {
            return false;
        }
        self.grid
            .node_cells(n)
            .iter()
            .any(|c| c.map_or(true, |e| !self.mask[e]))
    }
}

/// Builder for masks made of a rectangle minus boxes and discs.
#[derive(Clone, Debug)]
pub struct MaskBuilder {
    grid: Grid,
    mask: Vec<bool>,
}

impl MaskBuilder {
    pub fn new(grid: Grid) -> Self {
        MaskBuilder { grid, mask: vec![true; grid.n_elements()] }
    }

    /// Clears elements whose coordinates lie in the half-open element box
    /// `[lo, hi)` given as `[x, y, z]`.
    pub fn remove_box(mut self, lo: [usize; 3], hi: [usize; 3]) -> Self {
        for e in 0..self.grid.n_elements() {
            let c = self.grid.element_coords(e);
            if (0..3).all(|a| c[a] >= lo[a] && c[a] < hi[a]) {
                self.mask[e] = false;
            }
        }
        self
    }

    /// Clears elements whose centers lie within `radius` of `center`
    /// (element units, `[x, y, z]`). In 2D this is a disc, in 3D a ball.
    pub fn remove_disc(mut self, center: [f64; 3], radius: f64) -> Self {
        for e in 0..self.grid.n_elements() {
            let c = self.grid.element_coords(e);
            let mut d2 = 0.0;
            for a in 0..self.grid.rank {
                let d = c[a] as f64 + 0.5 - center[a];
                d2 += d * d;
            }
            if d2 <= radius * radius {
                self.mask[e] = false;
            }
        }
        self
    }

    pub fn build(self) -> Result<DesignDomain, MeshError> {
        DesignDomain::new(self.grid, self.mask)
    }
}

/// L-shaped beam: the upper-right quadrant of the rectangle is removed.
pub fn l_shape(grid: Grid) -> Result<DesignDomain, MeshError> {
    MaskBuilder::new(grid)
        .remove_box([grid.nx / 2, grid.ny / 2, 0], [grid.nx, grid.ny, grid.nz])
        .build()
}

fn count_components(grid: &Grid, mask: &[bool]) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut components = 0;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(e) = queue.pop_front() {
            let c = grid.element_coords(e);
            let ext = grid.extents();
            for axis in 0..grid.rank {
                for step in [-1isize, 1] {
                    let v = c[axis] as isize + step;
                    if v < 0 || v as usize >= ext[axis] {
                        continue;
                    }
                    let mut nc = c;
                    nc[axis] = v as usize;
                    let ne = grid.element_index(nc[0], nc[1], nc[2]);
                    if mask[ne] && !seen[ne] {
                        seen[ne] = true;
                        queue.push_back(ne);
                    }
                }
            }
        }
    }
    components
}

/// A point load in Newtons, one component per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLoad {
    pub node: usize,
    pub force: Vec<f64>,
}

/// Fixed `(node, axis)` pairs plus point loads.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundaryConditions {
    pub fixed: BTreeSet<(usize, usize)>,
    pub loads: Vec<PointLoad>,
}

impl BoundaryConditions {
    pub fn new(fixed: impl IntoIterator<Item = (usize, usize)>, loads: Vec<PointLoad>) -> Self {
        BoundaryConditions { fixed: fixed.into_iter().collect(), loads }
    }

    /// Checks node activity and axis ranges against the domain.
    pub fn validate(&self, domain: &DesignDomain) -> Result<(), MeshError> {
        let rank = domain.rank();
        for &(node, axis) in &self.fixed {
            if axis >= rank {
                return Err(MeshError::InvalidAxis { axis, rank });
            }
            if !domain.node_is_active(node) {
                return Err(MeshError::InactiveNode(node));
            }
        }
        for load in &self.loads {
            if load.force.len() != rank {
                return Err(MeshError::DimensionMismatch(format!(
                    "load on node {} has {} components, domain rank is {}",
                    load.node,
                    load.force.len(),
                    rank
                )));
            }
            if !domain.node_is_active(load.node) {
                return Err(MeshError::LoadOutsideDomain(load.node));
            }
        }
        Ok(())
    }

    pub fn is_node_fixed(&self, node: usize) -> bool {
        self.fixed.range((node, 0)..(node + 1, 0)).next().is_some()
    }
}

/// The displacement-constraint families used for data generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcCase {
    Cantilever,
    SimplySupported,
    ConstrainedCantilever,
    DomeSupport,
}

impl BcCase {
    pub const ALL: [BcCase; 4] = [
        BcCase::Cantilever,
        BcCase::SimplySupported,
        BcCase::ConstrainedCantilever,
        BcCase::DomeSupport,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            BcCase::Cantilever => "cantilever",
            BcCase::SimplySupported => "simply_supported",
            BcCase::ConstrainedCantilever => "constrained_cantilever",
            BcCase::DomeSupport => "dome_support",
        }
    }
}

impl fmt::Display for BcCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BcCase {
    type Err = MeshError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "cantilever" => Ok(BcCase::Cantilever),
            "simplysupported" | "mbb" => Ok(BcCase::SimplySupported),
            "constrainedcantilever" => Ok(BcCase::ConstrainedCantilever),
            "dome" | "domesupport" => Ok(BcCase::DomeSupport),
            _ => Err(MeshError::UnknownCase(s.to_string())),
        }
    }
}

/// Fixed dofs of a named support case, restricted to active nodes.
///
/// * cantilever: every node on the x = 0 face, all axes;
/// * simply supported: bottom-left corner (edge in 3D) pinned, bottom-right
///   corner (edge) free to slide horizontally;
/// * constrained cantilever: the cantilever face plus a vertical support at
///   the bottom-right corner (edge);
/// * dome support: perimeter of the y = 0 base, all axes.
pub fn case_fixed_dofs(domain: &DesignDomain, case: BcCase) -> BTreeSet<(usize, usize)> {
    let grid = domain.grid();
    let rank = grid.rank;
    let [ex, ey, ez] = grid.node_extents();
    let (nx, nz) = (grid.nx, grid.nz);
    let mut fixed = BTreeSet::new();
    let mut fix = |n: usize, axes: &[usize]| {
        if domain.node_is_active(n) {
            for &a in axes {
                fixed.insert((n, a));
            }
        }
    };
    let all: Vec<usize> = (0..rank).collect();
    let vertical = [1usize];
    match case {
        BcCase::Cantilever | BcCase::ConstrainedCantilever => {
            for z in 0..ez {
                for y in 0..ey {
                    fix(grid.node_index(0, y, z), &all);
                }
            }
            if case == BcCase::ConstrainedCantilever {
                for z in 0..ez {
                    fix(grid.node_index(nx, 0, z), &vertical);
                }
            }
        }
        BcCase::SimplySupported => {
            for z in 0..ez {
                fix(grid.node_index(0, 0, z), &all);
                fix(grid.node_index(nx, 0, z), &vertical);
            }
        }
        BcCase::DomeSupport => {
            for z in 0..ez {
                for x in 0..ex {
                    let on_perimeter = if rank == 2 {
                        x == 0 || x == nx
                    } else {
                        x == 0 || x == nx || z == 0 || z == nz
                    };
                    if on_perimeter {
                        fix(grid.node_index(x, 0, z), &all);
                    }
                }
            }
        }
    }
    fixed
}

/// Default load node for a standard case: middle of the right face for
/// cantilevers, middle of the top face otherwise.
pub fn default_load_node(grid: Grid, case: BcCase) -> [usize; 3] {
    let [_, ey, ez] = grid.node_extents();
    let zmid = if grid.rank == 3 { (ez - 1) / 2 } else { 0 };
    match case {
        BcCase::Cantilever | BcCase::ConstrainedCantilever => [grid.nx, (ey - 1) / 2, zmid],
        BcCase::SimplySupported | BcCase::DomeSupport => [grid.nx / 2, grid.ny, zmid],
    }
}

/// Standard support case plus the given load.
pub fn standard_bc_case(
    domain: &DesignDomain,
    case: BcCase,
    load: PointLoad,
) -> Result<BoundaryConditions, MeshError> {
    if load.node >= domain.grid().n_nodes() || !domain.node_is_active(load.node) {
        return Err(MeshError::LoadOutsideDomain(load.node));
    }
    if load.force.len() != domain.rank() {
        return Err(MeshError::DimensionMismatch(format!(
            "load has {} components, domain rank is {}",
            load.force.len(),
            domain.rank()
        )));
    }
    let fixed = case_fixed_dofs(domain, case);
    if fixed.is_empty() {
        return Err(MeshError::NoSupports(case));
    }
    Ok(BoundaryConditions { fixed, loads: vec![load] })
}

/// Element → node → dof numbering over the full grid.
#[derive(Clone, Debug)]
pub struct DofMap {
    grid: Grid,
    active_nodes: Vec<bool>,
}

impl DofMap {
    pub fn new(domain: &DesignDomain) -> Self {
        DofMap { grid: domain.grid(), active_nodes: domain.active_nodes().to_vec() }
    }

    pub fn node_count(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn dof_count(&self) -> usize {
        self.grid.rank * self.node_count()
    }

    pub fn dofs_per_node(&self) -> usize {
        self.grid.rank
    }

    /// Corner nodes of element `e` and their count (4 or 8).
    pub fn element_nodes(&self, e: usize) -> ([usize; 8], usize) {
        self.grid.element_nodes(e)
    }

    /// Writes the element's dofs (node-major, axis-minor) into `out`.
    pub fn element_dofs(&self, e: usize, out: &mut [usize; 24]) -> usize {
        let d = self.grid.rank;
        let (nodes, k) = self.grid.element_nodes(e);
        for (i, &n) in nodes[..k].iter().enumerate() {
            for a in 0..d {
                out[i * d + a] = n * d + a;
            }
        }
        k * d
    }

    pub fn node_dof(&self, node: usize, axis: usize) -> usize {
        node * self.grid.rank + axis
    }

    /// Nodes touched by at least one active element.
    pub fn active_nodes(&self) -> &[bool] {
        &self.active_nodes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_2x2_domain() {
        let d = make_domain(&[2, 2], vec![true; 4]).unwrap();
        assert_eq!(d.active_count(), 4);
        assert_eq!(d.grid().n_nodes(), 9);
    }

    #[test]
    fn diagonal_mask_is_disconnected() {
        let err = make_domain(&[2, 2], vec![true, false, false, true]).unwrap_err();
        assert_eq!(err, MeshError::DisconnectedDomain { components: 2 });
    }

    #[test]
    fn mask_length_and_empty_checks() {
        assert!(matches!(
            make_domain(&[2, 3], vec![true; 5]),
            Err(MeshError::DimensionMismatch(_))
        ));
        assert_eq!(make_domain(&[2, 2], vec![false; 4]).unwrap_err(), MeshError::EmptyDomain);
        assert!(make_domain(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn l_shape_active_count() {
        let grid = Grid::from_dims(&[120, 240]).unwrap();
        let d = l_shape(grid).unwrap();
        let expected = grid.mask_count_oracle(|x, y| !(x >= 120 && y >= 60));
        assert_eq!(d.active_count(), expected);
        assert_eq!(d.active_count(), 120 * 240 - 60 * 120);
    }

    impl Grid {
        fn mask_count_oracle(&self, f: impl Fn(usize, usize) -> bool) -> usize {
            let mut n = 0;
            for y in 0..self.ny {
                for x in 0..self.nx {
                    n += f(x, y) as usize;
                }
            }
            n
        }
    }

    #[test]
    fn element_nodes_in_bounds_and_distinct() {
        for grid in [Grid::new_2d(3, 2), Grid::new_3d(2, 3, 2)] {
            for e in 0..grid.n_elements() {
                let (nodes, k) = grid.element_nodes(e);
                let set: BTreeSet<_> = nodes[..k].iter().copied().collect();
                assert_eq!(set.len(), k);
                assert!(nodes[..k].iter().all(|&n| n < grid.n_nodes()));
            }
        }
    }

    #[test]
    fn cantilever_fixes_left_edge() {
        let d = DesignDomain::full(Grid::from_dims(&[40, 80]).unwrap());
        let g = d.grid();
        let load = PointLoad { node: g.node_index(80, 20, 0), force: vec![0.0, -1.0] };
        let bc = standard_bc_case(&d, BcCase::Cantilever, load).unwrap();
        assert_eq!(bc.fixed.len(), 41 * 2);
        for &(n, _) in &bc.fixed {
            assert_eq!(g.node_coords(n)[0], 0);
        }
    }

    #[test]
    fn simply_supported_two_corners() {
        let d = DesignDomain::full(Grid::from_dims(&[40, 80]).unwrap());
        let g = d.grid();
        let load = PointLoad { node: g.node_index(60, 40, 0), force: vec![0.0, -1.0] };
        let bc = standard_bc_case(&d, BcCase::SimplySupported, load).unwrap();
        let nodes: BTreeSet<usize> = bc.fixed.iter().map(|&(n, _)| n).collect();
        assert_eq!(nodes, BTreeSet::from([g.node_index(0, 0, 0), g.node_index(80, 0, 0)]));
        assert!(bc.fixed.contains(&(g.node_index(80, 0, 0), 1)));
        assert!(!bc.fixed.contains(&(g.node_index(80, 0, 0), 0)));
    }

    #[test]
    fn load_outside_mask_is_rejected() {
        let d = l_shape(Grid::new_2d(8, 8)).unwrap();
        let g = d.grid();
        let inside_hole = g.node_index(6, 6, 0);
        let err = standard_bc_case(
            &d,
            BcCase::Cantilever,
            PointLoad { node: inside_hole, force: vec![1.0, 0.0] },
        )
        .unwrap_err();
        assert_eq!(err, MeshError::LoadOutsideDomain(inside_hole));
    }

    #[test]
    fn dome_support_fixes_base_perimeter() {
        let d = DesignDomain::full(Grid::new_3d(4, 4, 4));
        let g = d.grid();
        let fixed = case_fixed_dofs(&d, BcCase::DomeSupport);
        // 5x5 base has 16 perimeter nodes.
        assert_eq!(fixed.len(), 16 * 3);
        assert!(fixed.iter().all(|&(n, _)| g.node_coords(n)[1] == 0));
    }

    #[test]
    fn bc_case_parsing() {
        assert_eq!("Simply-Supported".parse::<BcCase>().unwrap(), BcCase::SimplySupported);
        assert_eq!("cantilever".parse::<BcCase>().unwrap(), BcCase::Cantilever);
        assert!(matches!("wobbly".parse::<BcCase>(), Err(MeshError::UnknownCase(_))));
    }

    #[test]
    fn standard_case_is_deterministic() {
        let d = DesignDomain::full(Grid::new_2d(10, 5));
        let load = PointLoad { node: d.grid().node_index(10, 2, 0), force: vec![3.0, -4.0] };
        for case in [BcCase::Cantilever, BcCase::SimplySupported, BcCase::ConstrainedCantilever] {
            let a = standard_bc_case(&d, case, load.clone()).unwrap();
            let b = standard_bc_case(&d, case, load.clone()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn masked_out_nodes_are_inactive() {
        // Remove a 2x2 interior block of a 6x6 grid: its center node is only
        // touched by removed elements.
        let d = MaskBuilder::new(Grid::new_2d(6, 6)).remove_box([2, 2, 0], [4, 4, 1]).build().unwrap();
        let g = d.grid();
        assert!(!d.node_is_active(g.node_index(3, 3, 0)));
        assert!(d.node_is_active(g.node_index(2, 2, 0)));
        assert!(d.is_boundary_node(g.node_index(2, 2, 0)));
        assert!(!d.is_boundary_node(g.node_index(1, 1, 0)));
    }
}
