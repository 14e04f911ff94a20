//! Raw density rasters: little-endian f32, row-major with x fastest, no
//! header. The grid comes from the accompanying problem or model.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

use crate::error::CliError;

pub fn to_f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn from_f32_bytes(bytes: &[u8]) -> Result<Vec<f64>, String> {
    if bytes.len() % 4 != 0 {
        return Err(format!("raster length {} is not a multiple of 4", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_raster(path: &Path, values: &[f64]) -> Result<(), CliError> {
    std::fs::write(path, to_f32_bytes(values))
        .map_err(|source| CliError::File { path: path.display().to_string(), source })
}

pub fn read_raster(path: &Path) -> Result<Vec<f64>, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|source| CliError::File { path: path.display().to_string(), source })?;
    from_f32_bytes(&bytes).map_err(|m| CliError::Usage(format!("{}: {m}", path.display())))
}

pub fn encode_f32_b64(values: &[f64]) -> String {
    B64.encode(to_f32_bytes(values))
}

pub fn decode_f32_b64(text: &str) -> Result<Vec<f64>, String> {
    let bytes = B64.decode(text.trim()).map_err(|e| format!("not base64: {e}"))?;
    from_f32_bytes(&bytes)
}

/// 0/1 bytes, one per element.
pub fn encode_binary_b64(values: &[f64]) -> String {
    B64.encode(values.iter().map(|&v| u8::from(v >= 0.5)).collect::<Vec<u8>>())
}
