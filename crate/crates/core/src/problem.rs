//! JSON exchange format for a design problem (domain, supports, loads,
//! volume fraction). Masks travel as a base64 bitset, row-major with x
//! fastest, least significant bit first within each byte.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{BoundaryConditions, DesignDomain, Grid, MeshError, PointLoad};

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("unsupported wire version {0}")]
    Version(u32),
    #[error("ill-posed problem: {0}")]
    IllPosed(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// On-the-wire shape of a problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemJson {
    #[serde(default = "wire_version")]
    pub v: u32,
    pub dims: Vec<usize>,
    /// Omitted mask means a full rectangle / box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub fixed: Vec<(usize, usize)>,
    pub loads: Vec<(usize, Vec<f64>)>,
    #[serde(default = "default_volfrac")]
    pub volfrac: f64,
}

fn wire_version() -> u32 {
    WIRE_VERSION
}

fn default_volfrac() -> f64 {
    0.5
}

/// A validated problem.
#[derive(Clone, Debug)]
pub struct Problem {
    pub domain: DesignDomain,
    pub bc: BoundaryConditions,
    pub volfrac: f64,
}

pub fn encode_mask(mask: &[bool]) -> String {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    B64.encode(bytes)
}

pub fn decode_mask(text: &str, len: usize) -> Result<Vec<bool>, ProblemError> {
    let bytes = B64
        .decode(text.trim())
        .map_err(|e| ProblemError::Malformed(format!("mask is not base64: {e}")))?;
    if bytes.len() != len.div_ceil(8) {
        return Err(ProblemError::Malformed(format!(
            "mask has {} bytes, {} elements need {}",
            bytes.len(),
            len,
            len.div_ceil(8)
        )));
    }
    Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

impl Problem {
    pub fn new(domain: DesignDomain, bc: BoundaryConditions, volfrac: f64) -> Self {
        Problem { domain, bc, volfrac }
    }

    pub fn grid(&self) -> Grid {
        self.domain.grid()
    }

    pub fn to_json(&self) -> ProblemJson {
        let mask = self.domain.mask();
        ProblemJson {
            v: WIRE_VERSION,
            dims: self.domain.grid().dims(),
            mask: (!mask.iter().all(|&m| m)).then(|| encode_mask(mask)),
            fixed: self.bc.fixed.iter().copied().collect(),
            loads: self.bc.loads.iter().map(|l| (l.node, l.force.clone())).collect(),
            volfrac: self.volfrac,
        }
    }

    /// Structural checks only; well-posedness is left to the solver.
    pub fn from_json(json: &ProblemJson) -> Result<Self, ProblemError> {
        if json.v != WIRE_VERSION {
            return Err(ProblemError::Version(json.v));
        }
        let grid = Grid::from_dims(&json.dims)?;
        let mask = match &json.mask {
            Some(m) => decode_mask(m, grid.n_elements())?,
            None => vec![true; grid.n_elements()],
        };
        let domain = DesignDomain::new(grid, mask)?;
        if !(json.volfrac > 0.0 && json.volfrac < 1.0) {
            return Err(ProblemError::Malformed(format!("volfrac {} outside (0, 1)", json.volfrac)));
        }
        let n_nodes = grid.n_nodes();
        for &(node, _) in &json.fixed {
            if node >= n_nodes {
                return Err(MeshError::InactiveNode(node).into());
            }
        }
        let loads = json
            .loads
            .iter()
            .map(|(node, force)| {
                if *node >= n_nodes {
                    return Err(ProblemError::Mesh(MeshError::LoadOutsideDomain(*node)));
                }
                if force.iter().any(|f| !f.is_finite()) {
                    return Err(ProblemError::Malformed(format!("non-finite force on node {node}")));
                }
                Ok(PointLoad { node: *node, force: force.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let bc = BoundaryConditions::new(json.fixed.iter().copied(), loads);
        bc.validate(&domain)?;
        Ok(Problem { domain, bc, volfrac: json.volfrac })
    }

    /// Rejects problems whose equilibrium is undefined: no nonzero load, or
    /// supports that leave a rigid-body mode free.
    pub fn check_well_posed(&self) -> Result<(), ProblemError> {
        if !self.bc.loads.iter().any(|l| l.force.iter().any(|&f| f != 0.0)) {
            return Err(ProblemError::IllPosed("no nonzero load".into()));
        }
        let grid = self.grid();
        let rank = grid.rank;
        let modes = if rank == 2 { 3 } else { 6 };
        // Each fixed dof contributes the values of every rigid-body mode at
        // that dof; the supports suppress all modes iff these rows span.
        let rows: Vec<Vec<f64>> = self
            .bc
            .fixed
            .iter()
            .map(|&(node, axis)| {
                let [x, y, z] = grid.node_coords(node).map(|c| c as f64);
                let mut r = vec![0.0; modes];
                r[axis] = 1.0;
                if rank == 2 {
                    r[2] = if axis == 0 { -y } else { x };
                } else {
                    let rot = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
                    for m in 0..3 {
                        r[3 + m] = rot[m][axis];
                    }
                }
                r
            })
            .collect();
        let found = matrix_rank(rows, modes);
        if found < modes {
            return Err(ProblemError::IllPosed(format!(
                "supports leave {} rigid-body mode(s) free",
                modes - found
            )));
        }
        Ok(())
    }

    pub fn from_str(text: &str) -> Result<Self, ProblemError> {
        let json: ProblemJson =
            serde_json::from_str(text).map_err(|e| ProblemError::Malformed(e.to_string()))?;
        Problem::from_json(&json)
    }

    pub fn to_string_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("problem JSON serializes")
    }
}

fn matrix_rank(mut rows: Vec<Vec<f64>>, cols: usize) -> usize {
    let mut rank = 0;
    for c in 0..cols {
        let Some(pivot) = (rank..rows.len()).max_by(|&a, &b| rows[a][c].abs().total_cmp(&rows[b][c].abs()))
        else {
            break;
        };
        if rows[pivot][c].abs() < 1e-9 {
            continue;
        }
        rows.swap(rank, pivot);
        let p = rows[rank].clone();
        for r in rows.iter_mut().skip(rank + 1) {
            let f = r[c] / p[c];
            r.iter_mut().zip(&p).for_each(|(v, pv)| *v -= f * pv);
        }
        rank += 1;
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{l_shape, standard_bc_case, BcCase};

    #[test]
    fn mask_bits_are_lsb_first() {
        let mask = [true, false, false, false, false, false, false, false, false, true];
        let text = encode_mask(&mask);
        assert_eq!(B64.decode(&text).unwrap(), vec![0b0000_0001, 0b0000_0010]);
        assert_eq!(decode_mask(&text, 10).unwrap(), mask);
        assert!(decode_mask(&text, 20).is_err());
    }

    #[test]
    fn round_trip_with_mask() {
        let d = l_shape(Grid::new_2d(8, 6)).unwrap();
        let g = d.grid();
        let load = PointLoad { node: g.node_index(8, 0, 0), force: vec![0.0, -3.5] };
        let bc = standard_bc_case(&d, BcCase::Cantilever, load).unwrap();
        let p = Problem::new(d, bc, 0.4);
        let text = serde_json::to_string(&p.to_json()).unwrap();
        let back = Problem::from_str(&text).unwrap();
        assert_eq!(back.domain.mask(), p.domain.mask());
        assert_eq!(back.bc, p.bc);
        assert_eq!(serde_json::to_string(&back.to_json()).unwrap(), text);
    }

    #[test]
    fn rejects_bad_input() {
        let base = r#"{"v":1,"dims":[2,2],"fixed":[[0,0]],"loads":[[8,[0,-1]]]}"#;
        assert!(Problem::from_str(base).is_ok());
        assert!(matches!(Problem::from_str("{"), Err(ProblemError::Malformed(_))));
        let bad_node = base.replace("[[8,", "[[99,");
        assert!(matches!(
            Problem::from_str(&bad_node),
            Err(ProblemError::Mesh(MeshError::LoadOutsideDomain(99)))
        ));
        let v2 = base.replace("\"v\":1", "\"v\":2");
        assert!(matches!(Problem::from_str(&v2), Err(ProblemError::Version(2))));
    }

    #[test]
    fn well_posedness() {
        let d = DesignDomain::full(Grid::new_2d(6, 4));
        let g = d.grid();
        let load = PointLoad { node: g.node_index(6, 2, 0), force: vec![0.0, -1.0] };
        for case in [BcCase::Cantilever, BcCase::SimplySupported, BcCase::ConstrainedCantilever] {
            let bc = standard_bc_case(&d, case, load.clone()).unwrap();
            Problem::new(d.clone(), bc, 0.5).check_well_posed().unwrap();
        }
        // A single pin leaves rotation free.
        let pin = BoundaryConditions::new([(0, 0), (0, 1)], vec![load.clone()]);
        assert!(matches!(Problem::new(d.clone(), pin, 0.5).check_well_posed(), Err(ProblemError::IllPosed(_))));
        // Rollers along one line leave a translation free.
        let rollers = BoundaryConditions::new((0..=6).map(|x| (g.node_index(x, 0, 0), 1)), vec![load.clone()]);
        assert!(Problem::new(d.clone(), rollers, 0.5).check_well_posed().is_err());
        let unloaded = standard_bc_case(&d, BcCase::Cantilever, PointLoad { force: vec![0.0, 0.0], ..load }).unwrap();
        assert!(Problem::new(d, unloaded, 0.5).check_well_posed().is_err());

        let d3 = DesignDomain::full(Grid::new_3d(4, 2, 2));
        let g3 = d3.grid();
        let l3 = PointLoad { node: g3.node_index(4, 1, 1), force: vec![0.0, -1.0, 0.0] };
        for case in BcCase::ALL {
            let bc = standard_bc_case(&d3, case, l3.clone()).unwrap();
            let p = Problem::new(d3.clone(), bc, 0.5);
            assert!(p.check_well_posed().is_ok(), "{case}");
        }
    }
}
