//! Per-element scalar fields on a grid.

use crate::mesh::{DesignDomain, Grid};

/// Material density per element, stored as a full raster over the grid
/// (x fastest). Inactive elements carry zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityField {
    grid: Grid,
    values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.n_elements(), "field length must match the grid");
        DensityField { grid, values }
    }

    /// `value` on active elements, zero elsewhere.
    pub fn filled(domain: &DesignDomain, value: f64) -> Self {
        let values = domain.mask().iter().map(|&m| if m { value } else { 0.0 }).collect();
        DensityField { grid: domain.grid(), values }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Clamps into `[0, 1]` and zeroes inactive elements.
    pub fn clamped_to(&self, domain: &DesignDomain) -> Self {
        let values = self
            .values
            .iter()
            .zip(domain.mask())
            .map(|(&v, &m)| if m && v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        DensityField { grid: self.grid, values }
    }

    /// 0/1 field: values `>= 0.5` become solid.
    pub fn thresholded(&self) -> Self {
        let values = self.values.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        DensityField { grid: self.grid, values }
    }

    /// Mean density over active elements.
    pub fn volume_fraction(&self, domain: &DesignDomain) -> f64 {
        let total: f64 =
            self.values.iter().zip(domain.mask()).filter(|(_, &m)| m).map(|(v, _)| v).sum();
        total / domain.active_count() as f64
    }
}
