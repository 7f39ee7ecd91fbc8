//! Oracles shared by the integration tests.
#![allow(dead_code)]

use facectl_core::face::raster::project;
use facectl_core::face::Mesh;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force coverage: for each pixel, test every triangle with exact
/// orientation predicates; a center on an edge counts only if the edge's
/// outward normal points left, or straight up.
pub fn coverage_oracle(mesh: &Mesh, camera: &[f64; 3], h: usize, w: usize) -> Vec<bool> {
    let pts: Vec<[f64; 2]> = mesh
        .vertices
        .iter()
        .map(|&v| {
            let p = project(v, camera, h, w);
            [p[0], p[1]]
        })
        .collect();
    let mut cov = vec![false; h * w];
    for row in 0..h {
        for col in 0..w {
            let q = [col as f64 + 0.5, row as f64 + 0.5];
            cov[row * w + col] = mesh.faces.iter().any(|f| covers(pts[f[0] as usize], pts[f[1] as usize], pts[f[2] as usize], q));
        }
    }
    cov
}

fn orient(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    robust::orient2d(
        robust::Coord { x: a[0], y: a[1] },
        robust::Coord { x: b[0], y: b[1] },
        robust::Coord { x: p[0], y: p[1] },
    )
}

/// Exact-arithmetic half-space test.
fn covers(a: [f64; 2], b: [f64; 2], c: [f64; 2], q: [f64; 2]) -> bool {
    let twice_area = orient(a, b, c);
    if twice_area == 0.0 || !twice_area.is_finite() {
        return false;
    }
    let sign = twice_area.signum();
    for (p0, p1) in [(a, b), (b, c), (c, a)] {
        // interior side has sign * s > 0
        let s = sign * orient(p0, p1, q);
        if s < 0.0 {
            return false;
        }
        if s == 0.0 {
            // outward normal of the edge for the interior side above
            let (dx, dy) = (sign * (p1[0] - p0[0]), sign * (p1[1] - p0[1]));
            let normal = [dy, -dx];
            let owned = normal[0] < 0.0 || (normal[0] == 0.0 && normal[1] < 0.0);
            if !owned {
                return false;
            }
        }
    }
    true
}

/// Random meshes of at most 200 triangles. Even seeds snap vertices to a
/// quarter-pixel lattice so that pixel centers land exactly on edges.
pub fn random_mesh(seed: u64, size: usize) -> Mesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snap = seed % 2 == 0;
    let n_tri = rng.random_range(1..=200usize);
    let q = 0.25 * 2.0 / size as f64;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    if seed % 3 == 0 {
        // shared-edge grid
        let n = rng.random_range(2..=8usize);
        let x0 = rng.random_range(-1.1..0.0f64);
        let step = rng.random_range(0.05..0.3f64);
        for i in 0..=n {
            for j in 0..=n {
                let v = [x0 + j as f64 * step, x0 + i as f64 * step, rng.random_range(-1.0..1.0)];
                vertices.push(if snap { snap_to(v, q) } else { v });
            }
        }
        for i in 0..n {
            for j in 0..n {
                let a = (i * (n + 1) + j) as u32;
                let b = a + 1;
                let c = a + (n + 1) as u32;
                faces.push([a, b, c + 1]);
                faces.push([a, c + 1, c]);
            }
        }
        faces.truncate(200);
    } else {
        for _ in 0..n_tri {
            let cx = rng.random_range(-1.0..1.0f64);
            let cy = rng.random_range(-1.0..1.0f64);
            let r = rng.random_range(0.02..0.5f64);
            let base = vertices.len() as u32;
            for _ in 0..3 {
                let v = [
                    cx + rng.random_range(-r..r),
                    cy + rng.random_range(-r..r),
                    rng.random_range(-1.0..1.0),
                ];
                vertices.push(if snap { snap_to(v, q) } else { v });
            }
            faces.push([base, base + 1, base + 2]);
        }
    }
    Mesh::new(vertices, faces)
}

fn snap_to(v: [f64; 3], q: f64) -> [f64; 3] {
    [(v[0] / q).round() * q, (v[1] / q).round() * q, v[2]]
}

/// Identity camera: world `[-1, 1]` maps onto the full image.
pub const UNIT_CAMERA: [f64; 3] = [1.0, 0.0, 0.0];

/// Writes a line straight to the process stderr so it shows even when the
/// test harness captures output.
pub fn report(line: &str) {
    use std::io::Write;
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
}
