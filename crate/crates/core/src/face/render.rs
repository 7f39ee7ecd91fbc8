use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::geom::{self, smoothstep, Vec3};
use super::mesh::{assemble_mesh, vertex_normals, Mesh};
use super::model::{ToyFaceModel, HEAD_RADII};
use super::params::FaceParams;
use super::raster::{rasterize, RasterOutput};
use super::sh::sh_irradiance;
use crate::error::Result;
use crate::imageio::{luminance, Image};

/// Pixel-aligned guidance maps (`H x W x 3`, row-major, interleaved).
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotPair {
    pub height: usize,
    pub width: usize,
    /// Unit world-space normals on coverage, exactly zero elsewhere.
    pub normal_map: Vec<f32>,
    /// Gray shading replicated over three channels, in `[0, 1]`.
    pub shading_map: Vec<f32>,
    pub coverage: Vec<bool>,
}

impl SnapshotPair {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            normal_map: vec![0.0; 3 * height * width],
            shading_map: vec![0.0; 3 * height * width],
            coverage: vec![false; height * width],
        }
    }

    /// Channel-major `[normal | shading]` stack (`6 x H x W`) for the networks.
    pub fn to_planar6(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 6 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.normal_map[3 * p + c];
                out[(3 + c) * hw + p] = self.shading_map[3 * p + c];
            }
        }
        out
    }
}

pub(crate) fn posed_mesh(model: &ToyFaceModel, params: &FaceParams) -> Result<Mesh> {
    vertex_normals(assemble_mesh(model, params)?)
}

fn raster_with_normals(
    mesh: &Mesh,
    camera: &[f64; 3],
    extra: Option<&[Vec3]>,
    height: usize,
    width: usize,
) -> Result<RasterOutput> {
    let normals = mesh.normals.as_ref().expect("normals filled");
    let channels = if extra.is_some() { 6 } else { 3 };
    let mut attrs = Vec::with_capacity(normals.len() * channels);
    for (i, n) in normals.iter().enumerate() {
        attrs.extend_from_slice(n);
        if let Some(extra) = extra {
            attrs.extend_from_slice(&extra[i]);
        }
    }
    rasterize(mesh, camera, &attrs, channels, height, width)
}

/// Renormalized interpolated normal at a covered pixel.
fn pixel_normal(raster: &RasterOutput, pix: usize) -> Vec3 {
    let c = raster.channels;
    let n = [raster.attrs[pix * c], raster.attrs[pix * c + 1], raster.attrs[pix * c + 2]];
    geom::normalize(n).unwrap_or([0.0, 0.0, 1.0])
}

/// Normal and shading snapshots from one rasterization pass.
pub fn render_snapshots(
    model: &ToyFaceModel,
    params: &FaceParams,
    height: usize,
    width: usize,
) -> Result<SnapshotPair> {
    let mesh = posed_mesh(model, params)?;
    let raster = raster_with_normals(&mesh, &params.camera, None, height, width)?;
    let mut snap = SnapshotPair::empty(height, width);
    for pix in 0..height * width {
        if !raster.coverage[pix] {
            continue;
        }
        snap.coverage[pix] = true;
        let n = pixel_normal(&raster, pix);
        let shade = (params.alpha * sh_irradiance(&params.light, n).max(0.0)).clamp(0.0, 1.0);
        for c in 0..3 {
            snap.normal_map[3 * pix + c] = n[c] as f32;
            snap.shading_map[3 * pix + c] = shade as f32;
        }
    }
    Ok(snap)
}

fn chroma(rgb: Vec3) -> Vec3 {
    let y = luminance(rgb);
    [rgb[0] - y, rgb[1] - y, rgb[2] - y]
}

fn limit(c: Vec3, max_abs: f64) -> Vec3 {
    let m = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > max_abs {
        geom::scale(c, max_abs / m)
    } else {
        c
    }
}

/// Base skin chroma for a texture seed; shared by all renders of one identity.
pub fn skin_chroma(texture_seed: u64) -> Vec3 {
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed ^ 0x5EED_5EED);
    let c: Vec3 = [rng.random(), rng.random(), rng.random()];
    limit(chroma(c), 0.2)
}

/// Per-vertex albedo: luminance equals `alpha` times the model's landmark
/// pattern, chroma carries the identity (skin tone from the seed, shifted by the first shape coefficient,
/// and a second "hair" tone over the top and back of the head).
pub fn vertex_texture(model: &ToyFaceModel, beta: &[f64], texture_seed: u64, alpha: f64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed ^ 0x7A11_0000);
    let _ = rng.random::<u64>();
    let hair: Vec3 = [rng.random(), rng.random(), rng.random()];
    let hair = limit(chroma(hair), 0.2);
    let shift = beta.first().map_or(0.0, |b| 0.06 * b.tanh());
    let skin = limit(geom::add(skin_chroma(texture_seed), geom::scale(chroma([1.0, 0.0, 0.0]), shift)), 0.22);
    model
        .template
        .iter()
        .zip(&model.landmark_albedo)
        .map(|(p, &lum)| {
            let t = smoothstep(0.35, 0.75, p[1] / HEAD_RADII[1])
                .max(smoothstep(-0.25, -0.65, p[2] / HEAD_RADII[2]));
            let c = geom::add(geom::scale(skin, 1.0 - t), geom::scale(hair, t));
            [lum * (alpha + c[0]), lum * (alpha + c[1]), lum * (alpha + c[2])]
        })
        .collect()
}

/// Background gradient colour at a pixel, in `[0, 1]`. Linear in pixel
/// position, so its luminance is an exact plane.
pub fn background_color(bg_seed: u64, row: usize, col: usize, height: usize, width: usize) -> Vec3 {
    let mut rng = ChaCha8Rng::seed_from_u64(bg_seed ^ 0xB6B6_0000);
    let a: Vec3 = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
    let b: Vec3 = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let xn = (col as f64 + 0.5) / width as f64 * 2.0 - 1.0;
    let yn = 1.0 - (row as f64 + 0.5) / height as f64 * 2.0;
    let t = 0.5 + 0.35 * (angle.cos() * xn + angle.sin() * yn);
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Synthetic training photograph: textured, SH-shaded head over a smooth
/// gradient background, mapped to `[-1, 1]`.
pub fn render_ground_truth(
    model: &ToyFaceModel,
    params: &FaceParams,
    texture_seed: u64,
    bg_seed: u64,
    height: usize,
    width: usize,
) -> Result<Image> {
    let mesh = posed_mesh(model, params)?;
    let tex = vertex_texture(model, &params.beta, texture_seed, params.alpha);
    let raster = raster_with_normals(&mesh, &params.camera, Some(&tex), height, width)?;
    let hw = height * width;
    let mut img = Image::filled(height, width, 0.0);
    for row in 0..height {
        for col in 0..width {
            let pix = row * width + col;
            let rgb = if raster.coverage[pix] {
                let n = pixel_normal(&raster, pix);
                let irr = sh_irradiance(&params.light, n).max(0.0);
                let a = &raster.attrs[pix * 6 + 3..pix * 6 + 6];
                [a[0] * irr, a[1] * irr, a[2] * irr]
            } else {
                background_color(bg_seed, row, col, height, width)
            };
            for c in 0..3 {
                img.data[c * hw + pix] = (rgb[c].clamp(0.0, 1.0) * 2.0 - 1.0) as f32;
            }
        }
    }
    Ok(img)
}
