//! Checkpoint persistence: `manifest.json` plus `weights.bin`, a flat
//! little-endian stream of all weight matrices in manifest order.
//!
//! Round trips are bitwise exact; a version mismatch or a payload whose
//! length disagrees with the manifest shapes is rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use gust_core::{DenseMatrix, EncoderParams, TrainConfig};

use crate::error::CliError;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: TrainConfig,
    pub shapes: Vec<WeightShape>,
}

/// Writes `manifest.json` and `weights.bin` into `dir`, creating it if
/// needed.
pub fn save_checkpoint(
    params: &EncoderParams,
    config: &TrainConfig,
    dir: &Path,
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let shapes: Vec<WeightShape> = params
        .params()
        .iter()
        .map(|p| WeightShape {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
        })
        .collect();
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        seed: config.seed,
        config: config.clone(),
        shapes,
    };
    let manifest_path = dir.join("manifest.json");
    let mut manifest_text = serde_json::to_string_pretty(&manifest)?;
    manifest_text.push('\n');
    fs::write(&manifest_path, manifest_text).map_err(CliError::io(&manifest_path))?;

    let mut payload = Vec::new();
    for p in params.params() {
        for &v in p.value.as_slice() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let weights_path = dir.join("weights.bin");
    fs::write(&weights_path, payload).map_err(CliError::io(&weights_path))?;
    Ok(())
}

/// Loads a checkpoint directory back into weights and its manifest.
pub fn load_checkpoint(dir: &Path) -> Result<(EncoderParams, CheckpointManifest), CliError> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text =
        fs::read_to_string(&manifest_path).map_err(CliError::io(&manifest_path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&manifest_text)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CliError::Integrity(format!(
            "unsupported format version {}, expected {}",
            manifest.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    let expected_names = ["w_hidden", "w_mu", "w_sigma", "w_cls"];
    if manifest.shapes.len() != expected_names.len() {
        return Err(CliError::Integrity(format!(
            "expected {} weight matrices, manifest lists {}",
            expected_names.len(),
            manifest.shapes.len()
        )));
    }
    for (shape, expected) in manifest.shapes.iter().zip(expected_names) {
        if shape.name != expected {
            return Err(CliError::Integrity(format!(
                "unexpected weight '{}', expected '{expected}'",
                shape.name
            )));
        }
    }

    let weights_path = dir.join("weights.bin");
    let payload = fs::read(&weights_path).map_err(CliError::io(&weights_path))?;
    let total: usize = manifest.shapes.iter().map(|s| s.rows * s.cols).sum();
    if payload.len() != total * 8 {
        return Err(CliError::Integrity(format!(
            "payload is {} bytes, manifest shapes require {}",
            payload.len(),
            total * 8
        )));
    }

    let mut values = Vec::with_capacity(manifest.shapes.len());
    let mut offset = 0usize;
    for shape in &manifest.shapes {
        let count = shape.rows * shape.cols;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let bytes: [u8; 8] = payload[offset..offset + 8]
                .try_into()
                .expect("length checked above");
            data.push(f64::from_le_bytes(bytes));
            offset += 8;
        }
        let matrix = DenseMatrix::from_vec(shape.rows, shape.cols, data)
            .map_err(|e| CliError::Integrity(format!("weight '{}': {e}", shape.name)))?;
        values.push(matrix);
    }
    let params = EncoderParams::from_values(&values)?;
    Ok((params, manifest))
}
