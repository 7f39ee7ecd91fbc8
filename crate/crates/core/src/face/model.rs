//! Procedural head model: a latitude/longitude ellipsoid with a nose bump,
//! smooth orthonormal shape and expression bases, a jaw hinge and a
//! detail (wrinkle) field.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geom::{self, smoothstep, Vec3};
use crate::error::{invalid_arg, Result};

/// Head ellipsoid radii (x: ear to ear, y: vertical, z: depth).
pub const HEAD_RADII: Vec3 = [0.75, 1.0, 0.85];
const NOSE_AMPLITUDE: f64 = 0.16;
const NOSE_WIDTH: f64 = 0.32;
const NOSE_LATITUDE: f64 = 0.55 * PI;
/// Scale of detail displacement along vertex normals.
pub const DETAIL_WEIGHT: f64 = 0.04;
pub const DEFAULT_K_DELTA: usize = 4;

/// Everything needed to re-instantiate a [`ToyFaceModel`] bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub seed: u64,
    pub n_lat: usize,
    pub n_lon: usize,
    pub k_beta: usize,
    pub k_psi: usize,
    pub k_delta: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_lat: 24,
            n_lon: 24,
            k_beta: 4,
            k_psi: 4,
            k_delta: DEFAULT_K_DELTA,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyFaceModel {
    pub spec: ModelSpec,
    pub template: Vec<Vec3>,
    pub faces: Arc<[[u32; 3]]>,
    /// `k_beta` columns, each a flattened `3N` vector (vertex-major, xyz).
    pub shape_basis: Vec<f64>,
    /// `k_psi` columns with the same layout as `shape_basis`.
    pub expr_basis: Vec<f64>,
    pub jaw_weights: Vec<f64>,
    pub jaw_pivot: Vec3,
    /// `k_delta` rows of per-vertex wrinkle amplitudes.
    pub detail_fields: Vec<f64>,
    /// Compactly supported per-vertex detail region in `[0, 1]`.
    pub detail_region: Vec<f64>,
    /// Expression activation coefficients gating the detail field (`k_psi`).
    pub detail_gate: Vec<f64>,
    /// Identity-independent luminance multiplier in `(0, 1]` (eyes, brows,
    /// mouth, hair); shared by ground-truth texture and the fitting proxy.
    pub landmark_albedo: Vec<f64>,
    pub centroid: Vec3,
}

/// Latitude/longitude grid on an ellipsoid.
///
/// Rings sit at latitudes `pi * (i + 0.5) / n_lat`, so no vertex lands on a
/// pole; each polar hole is closed by a triangle fan over its ring. The
/// vertex count is exactly `n_lat * n_lon` and every face winds outward.
pub fn lat_lon_grid(n_lat: usize, n_lon: usize, radii: Vec3) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let mut vertices = Vec::with_capacity(n_lat * n_lon);
    for i in 0..n_lat {
        let phi = PI * (i as f64 + 0.5) / n_lat as f64;
        for j in 0..n_lon {
            let lambda = 2.0 * PI * j as f64 / n_lon as f64;
            vertices.push([
                radii[0] * phi.sin() * lambda.sin(),
                radii[1] * phi.cos(),
                radii[2] * phi.sin() * lambda.cos(),
            ]);
        }
    }
    let idx = |i: usize, j: usize| (i * n_lon + (j % n_lon)) as u32;
    let mut faces = Vec::with_capacity(2 * (n_lat - 1) * n_lon + 2 * (n_lon - 2));
    for i in 0..n_lat - 1 {
        for j in 0..n_lon {
            let a = idx(i, j);
            let b = idx(i + 1, j);
            let c = idx(i + 1, j + 1);
            let d = idx(i, j + 1);
            // diagonal flips across the x = 0 plane so the mesh is mirror symmetric
            if 2 * j < n_lon {
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            } else {
                faces.push([a, b, d]);
                faces.push([b, c, d]);
            }
        }
    }
    let bottom = n_lat - 1;
    for j in 1..n_lon - 1 {
        faces.push([idx(0, 0), idx(0, j), idx(0, j + 1)]);
        faces.push([idx(bottom, 0), idx(bottom, j + 1), idx(bottom, j)]);
    }
    (vertices, faces)
}

fn vertex_angles(n_lat: usize, n_lon: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n_lat * n_lon);
    for i in 0..n_lat {
        let phi = PI * (i as f64 + 0.5) / n_lat as f64;
        for j in 0..n_lon {
            let mut lambda = 2.0 * PI * j as f64 / n_lon as f64;
            if lambda > PI {
                lambda -= 2.0 * PI;
            }
            out.push((phi, lambda));
        }
    }
    out
}

fn ellipsoid_normal(p: Vec3) -> Vec3 {
    let g = [
        p[0] / (HEAD_RADII[0] * HEAD_RADII[0]),
        p[1] / (HEAD_RADII[1] * HEAD_RADII[1]),
        p[2] / (HEAD_RADII[2] * HEAD_RADII[2]),
    ];
    geom::normalize(g).unwrap_or([0.0, 0.0, 1.0])
}

/// Modified Gram-Schmidt (two passes) over flattened columns.
fn orthonormalize(columns: &mut [Vec<f64>]) -> Result<()> {
    for k in 0..columns.len() {
        for _pass in 0..2 {
            for prev in 0..k {
                let d: f64 = columns[k].iter().zip(&columns[prev]).map(|(a, b)| a * b).sum();
                let (head, tail) = columns.split_at_mut(k);
                for (x, p) in tail[0].iter_mut().zip(&head[prev]) {
                    *x -= d * p;
                }
            }
        }
        let n: f64 = columns[k].iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-9 {
            return Err(invalid_arg!("basis column {k} is degenerate"));
        }
        columns[k].iter_mut().for_each(|x| *x /= n);
    }
    Ok(())
}

/// Random low-frequency trigonometric field `sum cos(m*phi + a) * cos(n*lambda + b)`.
struct TrigField {
    terms: Vec<(f64, f64, f64, f64, f64)>,
}

impl TrigField {
    fn sample(rng: &mut ChaCha8Rng, index: usize, max_lat_freq: usize, max_lon_freq: usize) -> Self {
        let terms = (0..2)
            .map(|t| {
                let m = 1 + (index + t) % max_lat_freq;
                let n = (index / max_lat_freq + t) % (max_lon_freq + 1);
                (
                    m as f64,
                    n as f64,
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        Self { terms }
    }

    fn eval(&self, phi: f64, lambda: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(m, n, a, b, amp)| amp * (m * phi + a).cos() * (n * lambda + b).cos())
            .sum()
    }
}

fn blob(phi: f64, lambda: f64, phi0: f64, lambda0: f64, s_phi: f64, s_lambda: f64) -> f64 {
    (-0.5 * (((phi - phi0) / s_phi).powi(2) + ((lambda - lambda0) / s_lambda).powi(2))).exp()
}

/// Dark eyes, brows and mouth on the face, darker hair over the top and back.
fn landmark_luminance(phi: f64, lambda: f64, p: &Vec3) -> f64 {
    let eyes = blob(phi, lambda, 0.44 * PI, 0.38, 0.12, 0.16) + blob(phi, lambda, 0.44 * PI, -0.38, 0.12, 0.16);
    let brows = blob(phi, lambda, 0.35 * PI, 0.4, 0.06, 0.25) + blob(phi, lambda, 0.35 * PI, -0.4, 0.06, 0.25);
    let mouth = blob(phi, lambda, 0.7 * PI, 0.0, 0.08, 0.3);
    let hair = smoothstep(0.35, 0.75, p[1] / HEAD_RADII[1]).max(smoothstep(-0.25, -0.65, p[2] / HEAD_RADII[2]));
    let dark = (0.6 * eyes + 0.45 * brows + 0.5 * mouth).min(0.7);
    (1.0 - dark) * (1.0 - 0.35 * hair)
}

impl ToyFaceModel {
    /// Builds the model; identical specs give bit-identical models.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        if spec.n_lat < 8 || spec.n_lon < 8 {
            return Err(invalid_arg!(
                "grid must be at least 8x8, got {}x{}",
                spec.n_lat,
                spec.n_lon
            ));
        }
        if spec.k_beta == 0 || spec.k_psi == 0 || spec.k_delta == 0 {
            return Err(invalid_arg!("basis sizes must be positive"));
        }
        let n = spec.n_lat * spec.n_lon;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let angles = vertex_angles(spec.n_lat, spec.n_lon);
        let (mut template, faces) = lat_lon_grid(spec.n_lat, spec.n_lon, HEAD_RADII);

        // nose bump, symmetric in longitude
        for (v, &(phi, lambda)) in template.iter_mut().zip(&angles) {
            let d2 = (phi - NOSE_LATITUDE).powi(2) + lambda.powi(2);
            let bump = NOSE_AMPLITUDE * (-d2 / (2.0 * NOSE_WIDTH * NOSE_WIDTH)).exp();
            *v = geom::add(*v, geom::scale(ellipsoid_normal(*v), bump));
        }
        let normals: Vec<Vec3> = template.iter().map(|&p| ellipsoid_normal(p)).collect();

        let mut shape_cols: Vec<Vec<f64>> = (0..spec.k_beta)
            .map(|k| {
                let field = TrigField::sample(&mut rng, k, 3, 2);
                let mut col = Vec::with_capacity(3 * n);
                for (nrm, &(phi, lambda)) in normals.iter().zip(&angles) {
                    let f = field.eval(phi, lambda);
                    col.extend_from_slice(&geom::scale(*nrm, f));
                }
                col
            })
            .collect();
        orthonormalize(&mut shape_cols)?;

        let expr_gate: Vec<f64> = template
            .iter()
            .map(|p| {
                smoothstep(0.35, -0.55, p[1] / HEAD_RADII[1])
                    * smoothstep(-0.1, 0.6, p[2] / HEAD_RADII[2])
            })
            .collect();
        let mut expr_cols: Vec<Vec<f64>> = (0..spec.k_psi)
            .map(|k| {
                let field = TrigField::sample(&mut rng, k + 1, 3, 3);
                let mix = rng.random_range(0.3..0.9);
                let mut col = Vec::with_capacity(3 * n);
                for ((nrm, &(phi, lambda)), g) in normals.iter().zip(&angles).zip(&expr_gate) {
                    let f = field.eval(phi, lambda) * g;
                    let dir = geom::add(geom::scale(*nrm, mix), [0.0, 1.0 - mix, 0.0]);
                    col.extend_from_slice(&geom::scale(dir, f));
                }
                col
            })
            .collect();
        orthonormalize(&mut expr_cols)?;

        let jaw_weights: Vec<f64> = template
            .iter()
            .map(|p| {
                smoothstep(0.0, 0.6, -p[1] / HEAD_RADII[1])
                    * smoothstep(-0.3, 0.3, p[2] / HEAD_RADII[2])
            })
            .collect();
        let jaw_pivot = [0.0, -0.05, -0.25];

        let detail_region: Vec<f64> = template
            .iter()
            .map(|p| {
                let t = ((p[2] / HEAD_RADII[2] - 0.35) / 0.35).clamp(0.0, 1.0);
                t * t
            })
            .collect();
        let mut detail_fields = Vec::with_capacity(spec.k_delta * n);
        for _ in 0..spec.k_delta {
            let fphi = rng.random_range(4.0..7.0);
            let flam = rng.random_range(3.0..6.0);
            let (a, b) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
            for &(phi, lambda) in &angles {
                detail_fields.push((fphi * phi + a).sin() * (flam * lambda + b).cos());
            }
        }
        let detail_gate = (0..spec.k_psi).map(|_| rng.random_range(-0.6..0.6)).collect();

        let landmark_albedo = angles
            .iter()
            .zip(&template)
            .map(|(&(phi, lambda), p)| landmark_luminance(phi, lambda, p))
            .collect();

        let centroid = {
            let s = template.iter().fold([0.0; 3], |acc, v| geom::add(acc, *v));
            geom::scale(s, 1.0 / n as f64)
        };

        Ok(Self {
            spec,
            template,
            faces: faces.into(),
            shape_basis: shape_cols.concat(),
            expr_basis: expr_cols.concat(),
            jaw_weights,
            jaw_pivot,
            detail_fields,
            detail_region,
            detail_gate,
            landmark_albedo,
            centroid,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn shape_column(&self, k: usize) -> &[f64] {
        let len = 3 * self.num_vertices();
        &self.shape_basis[k * len..(k + 1) * len]
    }

    pub fn expr_column(&self, k: usize) -> &[f64] {
        let len = 3 * self.num_vertices();
        &self.expr_basis[k * len..(k + 1) * len]
    }

    /// Mean distance of template vertices from the centroid.
    pub fn template_radius(&self) -> f64 {
        self.template
            .iter()
            .map(|v| geom::norm(geom::sub(*v, self.centroid)))
            .sum::<f64>()
            / self.num_vertices() as f64
    }
}

/// Convenience constructor with the default detail dimensionality.
pub fn build_toy_model(
    seed: u64,
    n_lat: usize,
    n_lon: usize,
    k_beta: usize,
    k_psi: usize,
) -> Result<ToyFaceModel> {
    ToyFaceModel::build(ModelSpec {
        seed,
        n_lat,
        n_lon,
        k_beta,
        k_psi,
        k_delta: DEFAULT_K_DELTA,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ToyFaceModel {
        build_toy_model(7, 16, 16, 4, 4).unwrap()
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        assert_eq!(model(), model());
        let other = build_toy_model(8, 16, 16, 4, 4).unwrap();
        assert_ne!(model().shape_basis, other.shape_basis);
    }

    #[test]
    fn vertex_count_is_grid_size() {
        let m = model();
        assert_eq!(m.num_vertices(), 16 * 16);
        assert_eq!(m.faces.len(), 2 * 15 * 16 + 2 * 14);
        assert!(m.faces.iter().flatten().all(|&i| (i as usize) < 256));
    }

    #[test]
    fn bases_are_orthonormal() {
        let m = model();
        for (cols, k) in [(&m.shape_basis, 4), (&m.expr_basis, 4)] {
            let len = cols.len() / k;
            for i in 0..k {
                for j in 0..k {
                    let d: f64 = cols[i * len..(i + 1) * len]
                        .iter()
                        .zip(&cols[j * len..(j + 1) * len])
                        .map(|(a, b)| a * b)
                        .sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-6, "({i},{j}) -> {d}");
                }
            }
        }
    }

    #[test]
    fn jaw_weights_vanish_on_upper_half() {
        let m = model();
        for (v, w) in m.template.iter().zip(&m.jaw_weights) {
            assert!((0.0..=1.0).contains(w));
            if v[1] >= 0.0 {
                assert_eq!(*w, 0.0);
            }
        }
        assert!(m.jaw_weights.iter().any(|&w| w > 0.9));
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(build_toy_model(1, 4, 16, 4, 4).is_err());
        assert!(build_toy_model(1, 16, 16, 0, 4).is_err());
    }

    #[test]
    fn template_is_mirror_symmetric() {
        let m = model();
        let n_lon = m.spec.n_lon;
        for i in 0..m.spec.n_lat {
            for j in 0..n_lon {
                let a = m.template[i * n_lon + j];
                let b = m.template[i * n_lon + (n_lon - j) % n_lon];
                assert!((a[0] + b[0]).abs() < 1e-12);
                assert!((a[1] - b[1]).abs() < 1e-12 && (a[2] - b[2]).abs() < 1e-12);
            }
        }
    }
}
