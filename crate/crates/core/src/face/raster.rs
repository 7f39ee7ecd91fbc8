//! Orthographic z-buffer rasterizer.
//!
//! Projection: `x_ndc = s * x + tx`, `y_ndc = s * y + ty`, then
//! `px = (x_ndc + 1) / 2 * W` and `py = (1 - y_ndc) / 2 * H`, so +y points up
//! in world space and down in pixel space. Pixel `(row, col)` is sampled at
//! its center `(col + 0.5, row + 0.5)`. Depth is `-z` (the camera looks down
//! -z from +z) and the smallest depth wins; equal depths keep the earlier
//! triangle. Shared edges follow the top-left rule.

use super::geom::Vec3;
use super::mesh::Mesh;
use crate::error::{invalid_arg, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RasterOutput {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `H x W x C`, zero off coverage.
    pub attrs: Vec<f64>,
    pub coverage: Vec<bool>,
    /// `+inf` off coverage.
    pub depth: Vec<f64>,
}

/// Projects a vertex to continuous pixel coordinates plus depth.
#[inline]
pub fn project(v: Vec3, camera: &[f64; 3], height: usize, width: usize) -> [f64; 3] {
    let xn = camera[0] * v[0] + camera[1];
    let yn = camera[0] * v[1] + camera[2];
    [(xn + 1.0) * 0.5 * width as f64, (1.0 - yn) * 0.5 * height as f64, -v[2]]
}

/// Edge function `(b - a) x (p - a)`.
#[inline]
pub fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Evaluates the edge from its lexicographically smaller endpoint, so an edge
/// shared by two triangles yields exact negatives in both and no pixel center
/// falls through the seam.
#[inline]
fn seam_edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    if a <= b {
        edge(a, b, p)
    } else {
        -edge(b, a, p)
    }
}

/// For a positively oriented triangle (y down), an edge owns its boundary
/// pixels if it is a top edge (horizontal, interior below) or a left edge.
#[inline]
pub fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    (a[1] == b[1] && b[0] > a[0]) || b[1] < a[1]
}

pub fn rasterize(
    mesh: &Mesh,
    camera: &[f64; 3],
    attrs: &[f64],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<RasterOutput> {
    if !(camera[0] > 0.0) {
        return Err(invalid_arg!("camera scale must be positive"));
    }
    if attrs.len() != mesh.vertices.len() * channels {
        return Err(invalid_arg!(
            "attribute buffer has {} values, expected {}",
            attrs.len(),
            mesh.vertices.len() * channels
        ));
    }
    let npix = height * width;
    let mut out = RasterOutput {
        height,
        width,
        channels,
        attrs: vec![0.0; npix * channels],
        coverage: vec![false; npix],
        depth: vec![f64::INFINITY; npix],
    };
    let projected: Vec<[f64; 3]> = mesh
        .vertices
        .iter()
        .map(|&v| project(v, camera, height, width))
        .collect();

    for face in mesh.faces.iter() {
        let mut idx = face.map(|i| i as usize);
        let p = |i: usize| [projected[i][0], projected[i][1]];
        let mut area = edge(p(idx[0]), p(idx[1]), p(idx[2]));
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            idx.swap(1, 2);
            area = -area;
        }
        let (a, b, c) = (p(idx[0]), p(idx[1]), p(idx[2]));
        let min_x = a[0].min(b[0]).min(c[0]);
        let max_x = a[0].max(b[0]).max(c[0]);
        let min_y = a[1].min(b[1]).min(c[1]);
        let max_y = a[1].max(b[1]).max(c[1]);
        let col0 = ((min_x - 0.5).floor().max(0.0)) as usize;
        let row0 = ((min_y - 0.5).floor().max(0.0)) as usize;
        let col1 = (max_x - 0.5).ceil().min(width as f64 - 1.0);
        let row1 = (max_y - 0.5).ceil().min(height as f64 - 1.0);
        if col1 < 0.0 || row1 < 0.0 {
            continue;
        }
        let (col1, row1) = (col1 as usize, row1 as usize);
        let tl = [is_top_left(b, c), is_top_left(c, a), is_top_left(a, b)];
        for row in row0..=row1 {
            for col in col0..=col1 {
                let q = [col as f64 + 0.5, row as f64 + 0.5];
                let w = [seam_edge(b, c, q), seam_edge(c, a, q), seam_edge(a, b, q)];
                let inside = w
                    .iter()
                    .zip(&tl)
                    .all(|(&wi, &owns)| wi > 0.0 || (wi == 0.0 && owns));
                if !inside {
                    continue;
                }
                let pix = row * width + col;
                out.coverage[pix] = true;
                let bary = [w[0] / area, w[1] / area, w[2] / area];
                let z = bary[0] * projected[idx[0]][2]
                    + bary[1] * projected[idx[1]][2]
                    + bary[2] * projected[idx[2]][2];
                if z < out.depth[pix] {
                    out.depth[pix] = z;
                    let dst = &mut out.attrs[pix * channels..(pix + 1) * channels];
                    for (ch, d) in dst.iter_mut().enumerate() {
                        *d = (0..3).map(|k| bary[k] * attrs[idx[k] * channels + ch]).sum();
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri_mesh(verts: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Mesh {
        Mesh::new(verts, faces)
    }

    #[test]
    fn nearer_triangle_wins() {
        // two overlapping triangles, the second closer to the camera (+z)
        let verts = vec![
            [-1.0, -1.0, 0.0],
            [1.0, -1.0, 0.0],
            [0.0, 1.0, 0.0],
            [-1.0, -1.0, 0.5],
            [1.0, -1.0, 0.5],
            [0.0, 1.0, 0.5],
        ];
        let mesh = tri_mesh(verts, vec![[0, 1, 2], [3, 4, 5]]);
        let attrs = vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0];
        let out = rasterize(&mesh, &[0.9, 0.0, 0.0], &attrs, 1, 8, 8).unwrap();
        let covered: Vec<_> = (0..64).filter(|&i| out.coverage[i]).collect();
        assert!(!covered.is_empty());
        for i in covered {
            assert!((out.attrs[i] - 2.0).abs() < 1e-12);
            assert!((out.depth[i] + 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_attributes_stay_constant() {
        let verts = vec![[-0.8, -0.7, 0.0], [0.9, -0.2, 0.3], [0.1, 0.8, -0.2]];
        let mesh = tri_mesh(verts, vec![[0, 2, 1]]);
        let attrs = vec![0.25, -3.0, 0.25, -3.0, 0.25, -3.0];
        let out = rasterize(&mesh, &[1.0, 0.0, 0.0], &attrs, 2, 16, 16).unwrap();
        for i in 0..256 {
            if out.coverage[i] {
                assert!((out.attrs[2 * i] - 0.25).abs() < 1e-12);
                assert!((out.attrs[2 * i + 1] + 3.0).abs() < 1e-12);
            } else {
                assert_eq!(out.attrs[2 * i], 0.0);
            }
        }
    }

    #[test]
    fn offscreen_mesh_has_empty_coverage() {
        let verts = vec![[5.0, 5.0, 0.0], [6.0, 5.0, 0.0], [5.0, 6.0, 0.0]];
        let mesh = tri_mesh(verts, vec![[0, 1, 2]]);
        let out = rasterize(&mesh, &[1.0, 0.0, 0.0], &[0.0; 3], 1, 8, 8).unwrap();
        assert!(out.coverage.iter().all(|c| !c));
    }

    #[test]
    fn shared_edge_pixels_are_not_double_counted() {
        // a square split along its diagonal, diagonal passing through pixel centers
        let verts = vec![[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]];
        let mesh = tri_mesh(verts, vec![[0, 1, 2], [0, 2, 3]]);
        let attrs = vec![1.0; 4];
        // count coverage hits per pixel by rasterizing each half separately
        let a = rasterize(&tri_mesh(mesh.vertices.clone(), vec![[0, 1, 2]]), &[1.0, 0.0, 0.0], &attrs, 1, 8, 8).unwrap();
        let b = rasterize(&tri_mesh(mesh.vertices.clone(), vec![[0, 2, 3]]), &[1.0, 0.0, 0.0], &attrs, 1, 8, 8).unwrap();
        for i in 0..64 {
            assert!(a.coverage[i] ^ b.coverage[i], "pixel {i} covered by both or neither");
        }
    }
}
