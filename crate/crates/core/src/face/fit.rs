//! Analysis-by-synthesis parameter estimation.
//!
//! The proxy render is the shading snapshot (times the model's fixed
//! landmark albedo) on covered pixels and a fitted luminance plane on the
//! background, compared against image luminance.
//! Geometry and camera are searched with a (1+1) Gaussian-perturbation
//! strategy (decaying step, success-based step adaptation, accept only on
//! strict decrease). For every geometry candidate the photometric term
//! `alpha * light` is also re-solved by ridge least squares and kept when it
//! lowers the loss; `alpha` itself is held at its initial value because only
//! the product is observable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::model::ToyFaceModel;
use super::params::FaceParams;
use super::raster::rasterize;
use super::render::posed_mesh;
use super::sh::sh_basis;
use crate::error::{invalid_arg, Result};
use crate::imageio::Image;

/// Improvements smaller than this are treated as no improvement.
const ACCEPT_MARGIN: f64 = 1e-12;
const LIGHT_RIDGE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: FaceParams,
    pub loss: f64,
    pub init_loss: f64,
    pub evaluations: usize,
    pub accepted: usize,
}

struct Objective<'a> {
    model: &'a ToyFaceModel,
    height: usize,
    width: usize,
    target: Vec<f64>,
    weights: Vec<f64>,
    total_weight: f64,
}

struct Evaluation {
    loss: f64,
    light: [f64; 9],
}

fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() < 1e-14 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    Some(x)
}

impl<'a> Objective<'a> {
    fn evaluate(&self, params: &FaceParams) -> Evaluation {
        let fail = Evaluation {
            loss: f64::INFINITY,
            light: params.light,
        };
        let Ok(mesh) = posed_mesh(self.model, params) else {
            return fail;
        };
        let normals = mesh.normals.as_ref().expect("normals filled");
        let mut attrs = Vec::with_capacity(4 * normals.len());
        for (n, l) in normals.iter().zip(&self.model.landmark_albedo) {
            attrs.extend_from_slice(n);
            attrs.push(*l);
        }
        let Ok(raster) = rasterize(&mesh, &params.camera, &attrs, 4, self.height, self.width) else {
            return fail;
        };
        let (h, w) = (self.height, self.width);

        // background luminance plane
        let mut bm = [0.0; 9];
        let mut bb = [0.0; 3];
        let mut bg_weight = 0.0;
        let mut bg_sum = 0.0;
        for row in 0..h {
            for col in 0..w {
                let pix = row * w + col;
                let wt = self.weights[pix];
                if raster.coverage[pix] || wt == 0.0 {
                    continue;
                }
                let f = plane_features(row, col, h, w);
                for i in 0..3 {
                    for j in 0..3 {
                        bm[i * 3 + j] += wt * f[i] * f[j];
                    }
                    bb[i] += wt * f[i] * self.target[pix];
                }
                bg_weight += wt;
                bg_sum += wt * self.target[pix];
            }
        }
        let plane = solve_dense(bm.to_vec(), bb.to_vec(), 3)
            .unwrap_or_else(|| vec![if bg_weight > 0.0 { bg_sum / bg_weight } else { 0.0 }, 0.0, 0.0]);

        // photometric least squares for alpha * light
        let own: Vec<f64> = params.light.iter().map(|l| l * params.alpha).collect();
        let mut m = vec![0.0; 81];
        let mut rhs = vec![0.0; 9];
        let mut face_pixels = Vec::new();
        for pix in 0..h * w {
            if !raster.coverage[pix] {
                continue;
            }
            let a = &raster.attrs[4 * pix..4 * pix + 4];
            let n = super::geom::normalize([a[0], a[1], a[2]]).unwrap_or([0.0, 0.0, 1.0]);
            let basis = sh_basis(n).map(|b| b * a[3]);
            let wt = self.weights[pix];
            if wt > 0.0 {
                for i in 0..9 {
                    for j in 0..9 {
                        m[i * 9 + j] += wt * basis[i] * basis[j];
                    }
                    rhs[i] += wt * basis[i] * self.target[pix];
                }
            }
            face_pixels.push((pix, basis));
        }
        let ridge = LIGHT_RIDGE * (1.0 + self.total_weight / (h * w) as f64);
        for i in 0..9 {
            m[i * 9 + i] += ridge;
            rhs[i] += ridge * own[i];
        }
        let solved = solve_dense(m, rhs, 9);

        let loss_for = |g: &[f64]| -> f64 {
            let mut s = 0.0;
            let mut covered = vec![false; h * w];
            for (pix, basis) in &face_pixels {
                covered[*pix] = true;
                let wt = self.weights[*pix];
                if wt > 0.0 {
                    let v: f64 = basis.iter().zip(g).map(|(a, b)| a * b).sum();
                    let r = v.clamp(0.0, 1.0) - self.target[*pix];
                    s += wt * r * r;
                }
            }
            for row in 0..h {
                for col in 0..w {
                    let pix = row * w + col;
                    let wt = self.weights[pix];
                    if covered[pix] || wt == 0.0 {
                        continue;
                    }
                    let f = plane_features(row, col, h, w);
                    let v = plane[0] * f[0] + plane[1] * f[1] + plane[2] * f[2];
                    let r = v.clamp(0.0, 1.0) - self.target[pix];
                    s += wt * r * r;
                }
            }
            s / self.total_weight
        };

        let own_loss = loss_for(&own);
        let mut best = Evaluation {
            loss: own_loss,
            light: params.light,
        };
        if let (Some(g), true) = (solved, params.alpha > 0.0) {
            let ls_loss = loss_for(&g);
            if ls_loss < own_loss - ACCEPT_MARGIN {
                let mut light = [0.0; 9];
                for (l, gi) in light.iter_mut().zip(&g) {
                    *l = gi / params.alpha;
                }
                best = Evaluation { loss: ls_loss, light };
            }
        }
        best
    }
}

fn plane_features(row: usize, col: usize, h: usize, w: usize) -> [f64; 3] {
    [
        1.0,
        (col as f64 + 0.5) / w as f64 * 2.0 - 1.0,
        1.0 - (row as f64 + 0.5) / h as f64 * 2.0,
    ]
}

/// Per-coordinate scale of the searched vector: shape, rotation (yaw, pitch,
/// roll), jaw, expression, camera (scale, tx, ty), detail.
fn coordinate_scales(p: &FaceParams) -> Vec<f64> {
    let mut s = Vec::new();
    s.extend(std::iter::repeat_n(0.4, p.beta.len()));
    s.extend([0.06; 3]);
    s.push(0.04);
    s.extend(std::iter::repeat_n(0.4, p.psi.len()));
    s.extend([0.01; 3]);
    s.extend(std::iter::repeat_n(0.3, p.delta.len()));
    s
}

fn pack(p: &FaceParams) -> Vec<f64> {
    let mut v = Vec::new();
    v.extend_from_slice(&p.beta);
    v.extend_from_slice(&p.theta_global);
    v.push(p.theta_jaw);
    v.extend_from_slice(&p.psi);
    v.extend_from_slice(&p.camera);
    v.extend_from_slice(&p.delta);
    v
}

fn unpack(template: &FaceParams, v: &[f64]) -> FaceParams {
    let mut p = template.clone();
    let mut it = v.iter().copied();
    p.beta.iter_mut().for_each(|x| *x = it.next().expect("packed length"));
    p.theta_global.iter_mut().for_each(|x| *x = it.next().expect("packed length").clamp(-3.1, 3.1));
    p.theta_jaw = it.next().expect("packed length").clamp(-0.2, 0.8);
    p.psi.iter_mut().for_each(|x| *x = it.next().expect("packed length"));
    p.camera.iter_mut().for_each(|x| *x = it.next().expect("packed length"));
    p.camera[0] = p.camera[0].max(0.05);
    p.delta.iter_mut().for_each(|x| *x = it.next().expect("packed length"));
    p
}

/// Yaw and pitch values tried before the local search when the budget allows.
const POSE_GRID: [f64; 7] = [-0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75];
const STARTS: usize = 8;

/// Fits explicit parameters to `image`, starting from `init`.
///
/// `budget` counts loss evaluations including the initial one. When the
/// budget exceeds ten times the pose grid, a coarse yaw/pitch grid around
/// `init` is scanned first, short searches run from the best cells, and the
/// winner gets the remaining budget. A
/// `region_weight` of zero removes a pixel from the loss (inpainting).
pub fn fit_params(
    image: &Image,
    model: &ToyFaceModel,
    init: &FaceParams,
    budget: usize,
    rng_seed: u64,
    region_weight: Option<&[f64]>,
) -> Result<FitResult> {
    if budget == 0 {
        return Err(invalid_arg!("fit budget must be at least 1"));
    }
    init.validate(model)?;
    let hw = image.height * image.width;
    let weights = match region_weight {
        Some(w) if w.len() != hw => {
            return Err(invalid_arg!("region weight has {} entries, expected {hw}", w.len()))
        }
        Some(w) => w.iter().map(|v| v.max(0.0)).collect(),
        None => vec![1.0; hw],
    };
    let total_weight: f64 = weights.iter().sum();
    if total_weight <= 0.0 {
        return Err(invalid_arg!("region weight removes every pixel"));
    }
    let objective = Objective {
        model,
        height: image.height,
        width: image.width,
        target: image.luminance01(),
        weights,
        total_weight,
    };

    let first = objective.evaluate(init);
    let init_loss = first.loss;
    let mut start = init.clone();
    start.light = first.light;
    let mut used = 1;
    let mut accepted = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let grid_evals = POSE_GRID.len() * POSE_GRID.len() - 1;
    let mut best = Candidate {
        params: start.clone(),
        loss: init_loss,
    };
    if budget > 10 * (grid_evals + 1) {
        // coarse yaw/pitch scan, then short searches from the best few cells
        let mut cells = vec![best.clone()];
        for &dy in &POSE_GRID {
            for &dp in &POSE_GRID {
                if dy == 0.0 && dp == 0.0 {
                    continue;
                }
                let mut cand = start.clone();
                cand.theta_global[0] += dy;
                cand.theta_global[1] += dp;
                let eval = objective.evaluate(&cand);
                cand.light = eval.light;
                cells.push(Candidate {
                    params: cand,
                    loss: eval.loss,
                });
            }
        }
        used += grid_evals;
        cells.sort_by(|a, b| a.loss.total_cmp(&b.loss));
        let short = (budget - used) / 16;
        for cell in cells.into_iter().take(STARTS) {
            let (c, acc) = local_search(&objective, cell, short, &mut rng);
            used += short;
            accepted += acc;
            if c.loss < best.loss - ACCEPT_MARGIN {
                best = c;
            }
        }
    }
    let (best, acc) = local_search(&objective, best, budget - used, &mut rng);
    accepted += acc;

    Ok(FitResult {
        params: best.params,
        loss: best.loss,
        init_loss,
        evaluations: budget,
        accepted,
    })
}

#[derive(Clone)]
struct Candidate {
    params: FaceParams,
    loss: f64,
}

/// (1+1) evolution strategy with success-rule step adaptation and a
/// rank-one adapted Cholesky factor of the perturbation covariance. Every
/// proposal is a Gaussian perturbation of the incumbent; a proposal replaces
/// it only on a strict loss decrease. Returns the best point and the number
/// of accepted moves.
fn local_search(objective: &Objective, start: Candidate, evals: usize, rng: &mut ChaCha8Rng) -> (Candidate, usize) {
    let scales = coordinate_scales(&start.params);
    let n = scales.len();
    let nf = n as f64;
    let origin = pack(&start.params);
    let template = start.params.clone();
    let to_params = |u: &[f64]| {
        let v: Vec<f64> = origin.iter().zip(u).zip(&scales).map(|((o, x), s)| o + x * s).collect();
        unpack(&template, &v)
    };
    let damping = 1.0 + nf / 2.0;
    let p_target = 2.0 / 11.0;
    let c_p = 1.0 / 12.0;
    let c_c = 2.0 / (nf + 2.0);
    let c_cov = 2.0 / (nf * nf + 6.0);
    let p_thresh = 0.44;

    let mut u = vec![0.0; n];
    let mut best = start;
    let mut sigma = 1.0f64;
    let mut p_succ = p_target;
    let mut path = vec![0.0; n];
    let mut chol = identity(n);
    let mut chol_inv = identity(n);
    let mut accepted = 0;
    for _ in 0..evals {
        let z: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let az = mat_vec(&chol, &z, n);
        let cand_u: Vec<f64> = u.iter().zip(&az).map(|(x, d)| x + sigma * d).collect();
        let mut cand = to_params(&cand_u);
        let eval = objective.evaluate(&cand);
        let success = eval.loss < best.loss - ACCEPT_MARGIN;
        p_succ = (1.0 - c_p) * p_succ + c_p * if success { 1.0 } else { 0.0 };
        sigma *= ((p_succ - p_target) / (damping * (1.0 - p_target))).exp();
        sigma = sigma.clamp(1e-4, 4.0);
        if !success {
            continue;
        }
        accepted += 1;
        cand.light = eval.light;
        best = Candidate {
            params: cand,
            loss: eval.loss,
        };
        u = cand_u;
        let alpha = if p_succ < p_thresh {
            let k = (c_c * (2.0 - c_c)).sqrt();
            path.iter_mut().zip(&az).for_each(|(p, a)| *p = (1.0 - c_c) * *p + k * a);
            1.0 - c_cov
        } else {
            path.iter_mut().for_each(|p| *p *= 1.0 - c_c);
            1.0 - c_cov + c_cov * c_c * (2.0 - c_c)
        };
        let w = mat_vec(&chol_inv, &path, n);
        let w2: f64 = w.iter().map(|x| x * x).sum();
        if w2 < 1e-300 {
            continue;
        }
        let root = (1.0 + c_cov * w2 / alpha).sqrt();
        let sa = alpha.sqrt();
        let a_coef = sa / w2 * (root - 1.0);
        let winv = vec_mat(&w, &chol_inv, n);
        let i_coef = 1.0 / (sa * w2) * (1.0 - 1.0 / root);
        for r in 0..n {
            for c in 0..n {
                chol[r * n + c] = sa * chol[r * n + c] + a_coef * path[r] * w[c];
                chol_inv[r * n + c] = chol_inv[r * n + c] / sa - i_coef * w[r] * winv[c];
            }
        }
    }
    (best, accepted)
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    (0..n).for_each(|i| m[i * n + i] = 1.0);
    m
}

fn mat_vec(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|r| (0..n).map(|c| m[r * n + c] * v[c]).sum()).collect()
}

fn vec_mat(v: &[f64], m: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|c| (0..n).map(|r| v[r] * m[r * n + c]).sum()).collect()
}
