use std::sync::Arc;

use super::geom::{self, Vec3};
use super::model::{ToyFaceModel, DETAIL_WEIGHT};
use super::params::FaceParams;
use crate::error::{invalid_arg, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Arc<[[u32; 3]]>,
    /// Unit per-vertex normals, filled by [`vertex_normals`].
    pub normals: Option<Vec<Vec3>>,
    /// Vertices whose incident faces are all degenerate (normal left at zero).
    pub degenerate: Vec<bool>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: impl Into<Arc<[[u32; 3]]>>) -> Self {
        let n = vertices.len();
        Self {
            vertices,
            faces: faces.into(),
            normals: None,
            degenerate: vec![false; n],
        }
    }

    pub fn centroid(&self) -> Vec3 {
        let s = self.vertices.iter().fold([0.0; 3], |acc, v| geom::add(acc, *v));
        geom::scale(s, 1.0 / self.vertices.len().max(1) as f64)
    }
}

/// Area-weighted vertex normals. Zero-area faces contribute nothing; a vertex
/// with only degenerate incident faces gets a zero normal and is flagged.
pub fn vertex_normals(mut mesh: Mesh) -> Result<Mesh> {
    if mesh.faces.is_empty() {
        return Err(invalid_arg!("mesh has no faces"));
    }
    let n = mesh.vertices.len();
    let mut acc = vec![[0.0; 3]; n];
    for f in mesh.faces.iter() {
        let [a, b, c] = f.map(|i| i as usize);
        if a >= n || b >= n || c >= n {
            return Err(invalid_arg!("face index out of range"));
        }
        let fnrm = geom::cross(
            geom::sub(mesh.vertices[b], mesh.vertices[a]),
            geom::sub(mesh.vertices[c], mesh.vertices[a]),
        );
        for i in [a, b, c] {
            acc[i] = geom::add(acc[i], fnrm);
        }
    }
    let mut degenerate = vec![false; n];
    let normals = acc
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            geom::normalize(v).unwrap_or_else(|| {
                degenerate[i] = true;
                [0.0; 3]
            })
        })
        .collect();
    mesh.normals = Some(normals);
    mesh.degenerate = degenerate;
    Ok(mesh)
}

/// Per-vertex expression gate of the detail field, in `[0, 1]` times the region.
pub fn detail_gate(model: &ToyFaceModel, psi: &[f64], theta_jaw: f64) -> f64 {
    let e: f64 = psi.iter().zip(&model.detail_gate).map(|(p, g)| p * g).sum::<f64>() + 2.0 * theta_jaw;
    0.5 + 0.5 * e.tanh()
}

/// Per-vertex detail displacement magnitudes `w * a(delta) * g(psi, jaw)`.
pub fn detail_displacement(model: &ToyFaceModel, params: &FaceParams) -> Vec<f64> {
    let n = model.num_vertices();
    let gate = detail_gate(model, &params.psi, params.theta_jaw);
    (0..n)
        .map(|v| {
            let amp: f64 = params
                .delta
                .iter()
                .enumerate()
                .map(|(k, d)| d * model.detail_fields[k * n + v])
                .sum();
            DETAIL_WEIGHT * amp * gate * model.detail_region[v]
        })
        .collect()
}

/// Builds the posed mesh.
///
/// Order: linear shape and expression offsets, jaw hinge blended by
/// `jaw_weights`, detail displacement along the normals of the result, then
/// the global rotation about the template centroid. Normals are not filled.
pub fn assemble_mesh(model: &ToyFaceModel, params: &FaceParams) -> Result<Mesh> {
    params.validate(model)?;
    let n = model.num_vertices();
    let mut verts = model.template.clone();

    for (k, &b) in params.beta.iter().enumerate() {
        if b != 0.0 {
            let col = model.shape_column(k);
            for (i, v) in verts.iter_mut().enumerate() {
                for d in 0..3 {
                    v[d] += b * col[3 * i + d];
                }
            }
        }
    }
    for (k, &p) in params.psi.iter().enumerate() {
        if p != 0.0 {
            let col = model.expr_column(k);
            for (i, v) in verts.iter_mut().enumerate() {
                for d in 0..3 {
                    v[d] += p * col[3 * i + d];
                }
            }
        }
    }

    if params.theta_jaw != 0.0 {
        let rot = geom::rot_x(params.theta_jaw);
        let pivot = model.jaw_pivot;
        for (v, &w) in verts.iter_mut().zip(&model.jaw_weights) {
            if w > 0.0 {
                let rotated = geom::add(geom::mat_vec(&rot, geom::sub(*v, pivot)), pivot);
                *v = geom::add(*v, geom::scale(geom::sub(rotated, *v), w));
            }
        }
    }

    if params.delta.iter().any(|&d| d != 0.0) {
        let disp = detail_displacement(model, params);
        let base = vertex_normals(Mesh::new(verts.clone(), model.faces.clone()))?;
        let normals = base.normals.expect("normals filled");
        for i in 0..n {
            if disp[i] != 0.0 {
                verts[i] = geom::add(verts[i], geom::scale(normals[i], disp[i]));
            }
        }
    }

    if params.theta_global.iter().any(|&a| a != 0.0) {
        let rot = geom::euler_to_matrix(params.theta_global);
        let c = model.centroid;
        for v in verts.iter_mut() {
            *v = geom::add(geom::mat_vec(&rot, geom::sub(*v, c)), c);
        }
    }

    Ok(Mesh::new(verts, model.faces.clone()))
}

/// Root-mean-square distance between corresponding vertices.
pub fn vertex_rmse(a: &[Vec3], b: &[Vec3]) -> f64 {
    assert_eq!(a.len(), b.len());
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = geom::sub(*x, *y);
            geom::dot(d, d)
        })
        .sum();
    (s / a.len().max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face::model::{build_toy_model, lat_lon_grid};

    fn model() -> ToyFaceModel {
        build_toy_model(7, 16, 16, 4, 4).unwrap()
    }

    #[test]
    fn neutral_params_reproduce_template_exactly() {
        let m = model();
        let mesh = assemble_mesh(&m, &FaceParams::neutral(&m)).unwrap();
        assert_eq!(mesh.vertices, m.template);
    }

    #[test]
    fn roll_by_pi_negates_x_and_y_about_centroid() {
        let m = model();
        let mut p = FaceParams::neutral(&m);
        p.theta_global = [0.0, 0.0, std::f64::consts::PI];
        let mesh = assemble_mesh(&m, &p).unwrap();
        let c = m.centroid;
        for (v, t) in mesh.vertices.iter().zip(&m.template) {
            let want = [2.0 * c[0] - t[0], 2.0 * c[1] - t[1], t[2]];
            for d in 0..3 {
                assert!((v[d] - want[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_shape_coefficient_adds_its_column() {
        let m = model();
        let mut p = FaceParams::neutral(&m);
        p.beta[0] = 0.1;
        let mesh = assemble_mesh(&m, &p).unwrap();
        let col = m.shape_column(0);
        for (i, (v, t)) in mesh.vertices.iter().zip(&m.template).enumerate() {
            for d in 0..3 {
                assert!((v[d] - (t[d] + 0.1 * col[3 * i + d])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = model();
        let mut p = FaceParams::neutral(&m);
        p.psi.push(0.0);
        assert!(assemble_mesh(&m, &p).is_err());
    }

    #[test]
    fn planar_triangle_normals_point_up() {
        let mesh = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0u32, 1, 2]],
        );
        let mesh = vertex_normals(mesh).unwrap();
        for n in mesh.normals.unwrap() {
            assert_eq!(n, [0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        let (verts, faces) = lat_lon_grid(16, 16, [1.0, 1.0, 1.0]);
        let mesh = vertex_normals(Mesh::new(verts, faces)).unwrap();
        let c = mesh.centroid();
        for (v, n) in mesh.vertices.iter().zip(mesh.normals.as_ref().unwrap()) {
            let radial = geom::normalize(geom::sub(*v, c)).unwrap();
            assert!(1.0 - geom::dot(radial, *n) < 0.05);
        }
    }

    #[test]
    fn template_normals_face_outward() {
        let m = model();
        let mesh = vertex_normals(assemble_mesh(&m, &FaceParams::neutral(&m)).unwrap()).unwrap();
        let c = mesh.centroid();
        for (v, n) in mesh.vertices.iter().zip(mesh.normals.as_ref().unwrap()) {
            assert!(geom::dot(geom::sub(*v, c), *n) >= 0.0);
        }
    }

    #[test]
    fn degenerate_vertex_is_flagged() {
        let mesh = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0u32, 1, 2], [0, 1, 3]],
        );
        let mesh = vertex_normals(mesh).unwrap();
        assert_eq!(mesh.degenerate, vec![false, false, true, false]);
        assert_eq!(mesh.normals.unwrap()[2], [0.0; 3]);
    }

    #[test]
    fn rigid_rotation_rotates_normals() {
        let m = model();
        let mut p = FaceParams::neutral(&m);
        p.beta = vec![0.5, -0.3, 0.2, 0.1];
        let base = vertex_normals(assemble_mesh(&m, &p).unwrap()).unwrap();
        p.theta_global = [0.4, -0.2, 0.3];
        let rotated = vertex_normals(assemble_mesh(&m, &p).unwrap()).unwrap();
        let r = geom::euler_to_matrix(p.theta_global);
        for (a, b) in base.normals.unwrap().iter().zip(rotated.normals.unwrap()) {
            let ra = geom::mat_vec(&r, *a);
            for d in 0..3 {
                assert!((ra[d] - b[d]).abs() < 1e-5);
            }
        }
    }
}
