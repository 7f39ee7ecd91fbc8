//! Synthetic portrait dataset: sampled parameters, rendered PNGs,
//! `manifest.jsonl` (one record per line) and `model.json`.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::model::{ModelSpec, ToyFaceModel};
use super::params::{FaceParams, DEFAULT_ALPHA, DEFAULT_CAMERA};
use super::render::render_ground_truth;
use crate::error::{invalid_arg, Error, Result};
use crate::imageio::Image;

pub const DATASET_VERSION: &str = "facectl-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MODEL_FILE: &str = "model.json";

/// Sampling ranges for synthetic parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamPriors {
    pub identities: usize,
    pub beta_std: f64,
    pub psi_std: f64,
    pub yaw_pitch_max: f64,
    pub roll_max: f64,
    pub jaw_max: f64,
    /// Range of ambient irradiance; `light[0] = 2 sqrt(pi) * U(lo, hi)`.
    pub ambient: [f64; 2],
    /// Degree-1 SH coefficients are drawn from `U(-dir_max, dir_max)`.
    pub dir_max: f64,
    pub delta_std: f64,
    pub alpha: f64,
    pub camera_jitter: f64,
    /// Every `test_every`-th draw of an identity is tagged `test`.
    pub test_every: usize,
}

impl Default for ParamPriors {
    fn default() -> Self {
        Self {
            identities: 25,
            beta_std: 1.5,
            psi_std: 1.0,
            yaw_pitch_max: 0.6,
            roll_max: 0.15,
            jaw_max: 0.3,
            ambient: [0.75, 0.95],
            dir_max: 0.55,
            delta_std: 0.5,
            alpha: DEFAULT_ALPHA,
            camera_jitter: 0.02,
            test_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    /// Relative to the dataset directory.
    pub image_path: String,
    pub params: FaceParams,
    pub split: String,
    pub identity: usize,
    pub texture_seed: u64,
    pub bg_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: String,
    pub model: ModelSpec,
    pub image_size: (usize, usize),
    pub seed: u64,
    pub priors: ParamPriors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<DatasetRecord>,
    pub model_seed: u64,
    pub model: ModelSpec,
    pub image_size: (usize, usize),
    pub version: String,
}

/// A manifest together with its decoded images, in record order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices_with_split(&self, split: &str) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws everything except `beta`, which belongs to the identity.
pub fn sample_params(model: &ToyFaceModel, priors: &ParamPriors, beta: Vec<f64>, rng: &mut ChaCha8Rng) -> FaceParams {
    let spec = &model.spec;
    let psi_d = Normal::new(0.0, priors.psi_std.max(0.0)).expect("finite std");
    let delta_d = Normal::new(0.0, priors.delta_std.max(0.0)).expect("finite std");
    let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let yaw = sym(rng, priors.yaw_pitch_max);
    let pitch = sym(rng, priors.yaw_pitch_max);
    let roll = sym(rng, priors.roll_max);
    let jaw = if priors.jaw_max > 0.0 { rng.random_range(0.0..=priors.jaw_max) } else { 0.0 };
    let psi = (0..spec.k_psi).map(|_| psi_d.sample(rng)).collect();
    let mut light = [0.0; 9];
    let (lo, hi) = (priors.ambient[0], priors.ambient[1].max(priors.ambient[0]));
    light[0] = 2.0 * PI.sqrt() * if hi > lo { rng.random_range(lo..=hi) } else { lo };
    for l in &mut light[1..4] {
        *l = sym(rng, priors.dir_max);
    }
    let delta = (0..spec.k_delta).map(|_| delta_d.sample(rng)).collect();
    let camera = [
        DEFAULT_CAMERA[0] + sym(rng, priors.camera_jitter),
        DEFAULT_CAMERA[1] + sym(rng, priors.camera_jitter),
        DEFAULT_CAMERA[2] + sym(rng, priors.camera_jitter),
    ];
    FaceParams {
        beta,
        theta_global: [yaw, pitch, roll],
        theta_jaw: jaw,
        psi,
        alpha: priors.alpha,
        light,
        camera,
        delta,
    }
}

/// Renders `n` records, assigning identities round-robin. Each identity owns
/// one `(beta, texture_seed)` pair.
pub fn generate_dataset(
    model: &ToyFaceModel,
    n: usize,
    priors: &ParamPriors,
    out_dir: &Path,
    seed: u64,
    image_size: (usize, usize),
) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid_arg!("dataset size must be at least 1"));
    }
    if priors.identities == 0 {
        return Err(invalid_arg!("at least one identity required"));
    }
    let (h, w) = image_size;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let beta_d = Normal::new(0.0, priors.beta_std.max(0.0)).expect("finite std");
    let identities: Vec<(Vec<f64>, u64)> = (0..priors.identities)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x1D00 + id as u64));
            let beta = (0..model.spec.k_beta).map(|_| beta_d.sample(&mut rng)).collect();
            (beta, mix(seed ^ 0x7E57, id as u64))
        })
        .collect();

    let mut records = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let identity = i % priors.identities;
        let draw = i / priors.identities;
        let (beta, texture_seed) = &identities[identity];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xD4A3_0000 + i as u64));
        let params = sample_params(model, priors, beta.clone(), &mut rng);
        let bg_seed = rng.random::<u64>();
        let img = render_ground_truth(model, &params, *texture_seed, bg_seed, h, w)?.quantized();
        let image_path = format!("images/{i:05}.png");
        img.save_png(&out_dir.join(&image_path))?;
        let split = if priors.test_every > 0 && draw % priors.test_every == priors.test_every - 1 {
            "test"
        } else {
            "train"
        };
        records.push(DatasetRecord {
            image_path,
            params,
            split: split.to_string(),
            identity,
            texture_seed: *texture_seed,
            bg_seed,
        });
        images.push(img);
    }

    let manifest = DatasetManifest {
        records,
        model_seed: model.spec.seed,
        model: model.spec.clone(),
        image_size,
        version: DATASET_VERSION.to_string(),
    };
    let model_file = ModelFile {
        version: DATASET_VERSION.to_string(),
        model: model.spec.clone(),
        image_size,
        seed,
        priors: priors.clone(),
    };
    write_json(&out_dir.join(MODEL_FILE), &model_file)?;
    let path = out_dir.join(MANIFEST_FILE);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for rec in &manifest.records {
        let line = serde_json::to_string(rec)?;
        writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(Dataset { manifest, images })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads `model.json` and `manifest.jsonl`; validates every record against
/// the model dimensions.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let model_path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&model_path).map_err(|e| Error::io(&model_path, e))?;
    let model_file: ModelFile = serde_json::from_str(&text)?;
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<DatasetRecord>(&line)?);
    }
    let spec = &model_file.model;
    for r in &records {
        let p = &r.params;
        if p.beta.len() != spec.k_beta || p.psi.len() != spec.k_psi || p.delta.len() != spec.k_delta {
            return Err(invalid_arg!("record {} has parameter dimensions that do not match the model", r.image_path));
        }
    }
    Ok(DatasetManifest {
        records,
        model_seed: spec.seed,
        model: spec.clone(),
        image_size: model_file.image_size,
        version: model_file.version,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let images = manifest
        .records
        .iter()
        .map(|r| Image::load_png(&dir.join(&r.image_path)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, images })
}
