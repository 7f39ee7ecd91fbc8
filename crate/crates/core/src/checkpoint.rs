//! Binary checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `FCTLCKPT` |
//! | 4 | `u32` format version |
//! | 8 | `u64` manifest length `m` |
//! | m | manifest, UTF-8 JSON |
//! | rest | parameter blob: `f32` values of every array in manifest order |
//!
//! Each array is stored row-major. The manifest carries the SHA-256 of the
//! blob, which is also the checkpoint digest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};
use crate::nn::{Module, ModelBundle, NetConfig, Stage};

pub const MAGIC: &[u8; 8] = b"FCTLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub net_config: NetConfig,
    pub schedule: ScheduleParams,
    pub stage: Stage,
    pub iteration: usize,
    /// Named seeds that produced the weights (init, training, ...).
    pub seeds: BTreeMap<String, u64>,
    pub parent_digest: Option<String>,
    pub has_control: bool,
    pub arrays: Vec<ArrayEntry>,
    pub blob_sha256: String,
}

/// Metadata supplied by the caller when saving.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SaveInfo {
    pub iteration: usize,
    pub seeds: BTreeMap<String, u64>,
    pub parent_digest: Option<String>,
}

fn blob_and_arrays(bundle: &ModelBundle) -> (Vec<u8>, Vec<ArrayEntry>) {
    let mut blob = Vec::with_capacity(bundle.num_params() * 4);
    let mut arrays = Vec::new();
    let mut offset = 0;
    bundle.visit("", &mut |name, p| {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: p.shape.clone(),
            offset,
        });
        offset += p.len();
        for v in &p.value {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    (blob, arrays)
}

/// Serializes a bundle; returns the bytes and the checkpoint digest.
pub fn encode_checkpoint(bundle: &ModelBundle, info: &SaveInfo) -> Result<(Vec<u8>, CheckpointManifest)> {
    let (blob, arrays) = blob_and_arrays(bundle);
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        net_config: bundle.config.clone(),
        schedule: bundle.schedule,
        stage: bundle.stage,
        iteration: info.iteration,
        seeds: info.seeds.clone(),
        parent_digest: info.parent_digest.clone(),
        has_control: bundle.control.is_some(),
        arrays,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok((out, manifest))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corruption(msg.into())
}

/// Parses and verifies a checkpoint; nothing is returned unless every check
/// passes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelBundle, CheckpointManifest)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if mlen > body.len() {
        return Err(corrupt("manifest extends past end of file"));
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let blob = &body[mlen..];
    if hex::encode(Sha256::digest(blob)) != manifest.blob_sha256 {
        return Err(corrupt("parameter blob digest mismatch"));
    }
    let mut bundle = ModelBundle::new(manifest.net_config.clone(), manifest.schedule, 0)
        .map_err(|e| corrupt(format!("manifest config: {e}")))?;
    if manifest.has_control {
        bundle.attach_control(0);
    }
    bundle.stage = manifest.stage;
    let by_name: BTreeMap<&str, &ArrayEntry> = manifest.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
    if by_name.len() != manifest.arrays.len() {
        return Err(corrupt("duplicate array names"));
    }
    let n_floats = blob.len() / 4;
    if blob.len() % 4 != 0 {
        return Err(corrupt("parameter blob is not a whole number of f32 values"));
    }
    let mut problem: Option<String> = None;
    let mut seen = 0;
    bundle.visit_mut("", &mut |name, p| {
        if problem.is_some() {
            return;
        }
        let Some(entry) = by_name.get(name) else {
            problem = Some(format!("array {name} missing"));
            return;
        };
        if entry.shape != p.shape {
            problem = Some(format!("array {name} has shape {:?}, expected {:?}", entry.shape, p.shape));
            return;
        }
        let end = entry.offset + p.len();
        if end > n_floats {
            problem = Some(format!("array {name} extends past the blob"));
            return;
        }
        for (k, v) in p.value.iter_mut().enumerate() {
            let at = 4 * (entry.offset + k);
            *v = f32::from_le_bytes(blob[at..at + 4].try_into().expect("4 bytes"));
        }
        seen += 1;
    });
    if let Some(msg) = problem {
        return Err(corrupt(msg));
    }
    if seen != manifest.arrays.len() {
        return Err(corrupt("manifest lists arrays the configuration does not have"));
    }
    Ok((bundle, manifest))
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(bundle: &ModelBundle, path: &Path, info: &SaveInfo) -> Result<CheckpointManifest> {
    let (bytes, manifest) = encode_checkpoint(bundle, info)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, CheckpointManifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
