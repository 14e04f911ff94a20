//! Topology optimization on voxel grids: a SIMP ground-truth solver,
//! randomized dataset generation, a small convolutional network engine and
//! transfer learning from low to high resolution.

pub mod fea;
pub mod datagen;
pub mod field;
pub mod mesh;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod problem;
pub mod resample;
pub mod simp;

pub use field::DensityField;
pub use mesh::{BcCase, BoundaryConditions, DesignDomain, Grid, PointLoad};
pub use simp::{MaterialModel, SimpConfig, SimpResult};
pub use networks::{FilterPlan, Model, Prediction, TrainConfig};
pub use problem::Problem;

/// Hex SHA-256 of a value's JSON serialization; used to tag artifacts with
/// the configuration that produced them.
pub fn json_hash<T: serde::Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(value).expect("config serializes");
    nn::hex_digest(&Sha256::digest(bytes))
}
