//! Central finite-difference check of the full encoder, denoiser and control
//! backward pass, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::models::{ControlNet, Denoiser, NetConfig, SemanticEncoder};
use super::param::{join, Module, Param};
use super::tensor::Tensor;

struct Nets {
    enc: SemanticEncoder<f64>,
    den: Denoiser<f64>,
    ctl: ControlNet<f64>,
}

impl Module<f64> for Nets {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
        self.enc.visit(&join(prefix, "encoder"), f);
        self.den.visit(&join(prefix, "denoiser"), f);
        self.ctl.visit(&join(prefix, "control"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
        self.enc.visit_mut(&join(prefix, "encoder"), f);
        self.den.visit_mut(&join(prefix, "denoiser"), f);
        self.ctl.visit_mut(&join(prefix, "control"), f);
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_tensor(c: usize, s: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor {
        c,
        h: s,
        w: s,
        data: (0..c * s * s).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Checks `n_params` randomly chosen parameters (spread over all three
/// networks) of the scalar `sum(w * eps_hat)`.
pub fn check_gradients(cfg: &NetConfig, n_params: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = SemanticEncoder::new(cfg, &mut rng);
    let den = Denoiser::new(cfg, &mut rng);
    let mut ctl = ControlNet::init_from_denoiser(cfg, &den, seed ^ 0x5eed);
    // zero-initialised layers would block every upstream gradient
    ctl.visit_mut("", &mut |name, p| {
        if name.starts_with("proj") || name.starts_with("mid_proj") || name.starts_with("in_conv") {
            p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    });
    let mut nets = Nets { enc, den, ctl };
    let s = cfg.image_size;
    let x0 = random_tensor(3, s, &mut rng);
    let x_t = random_tensor(3, s, &mut rng);
    let snap = random_tensor(6, s, &mut rng);
    let w = random_tensor(3, s, &mut rng);
    let t = 137;

    let loss = |n: &Nets| -> f64 {
        let z = n.enc.encode(&x0);
        let (h0, _) = n.den.embed_input(&x_t);
        let (f, _) = n.ctl.forward(&snap, &h0, t);
        let (eps, _) = n.den.forward_from(&h0, t, &z, Some(&f));
        eps.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    };

    nets.zero_grad();
    let (z, ec) = nets.enc.forward(&x0);
    let (h0, ic) = nets.den.embed_input(&x_t);
    let (f, cc) = nets.ctl.forward(&snap, &h0, t);
    let (_, dc) = nets.den.forward_from(&h0, t, &z, Some(&f));
    let g = nets.den.backward_from(dc, &w, true);
    let mut dh0 = nets.ctl.backward(cc, &g.dfeatures, true);
    dh0.add_assign(&g.dh0);
    nets.den.backward_input(ic, &dh0, true);
    nets.enc.backward(ec, &g.dz, true);

    let mut names = Vec::new();
    nets.visit("", &mut |name, p| {
        for i in 0..p.len() {
            names.push((name.to_string(), i));
        }
    });
    let analytic = nets.flat_grads();
    let total = analytic.len();
    let h = 1e-5;
    let mut entries = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let k = rng.random_range(0..total);
        let mut flat = nets.flat_values();
        let orig = flat[k];
        flat[k] = orig + h;
        nets.load_flat(&flat);
        let lp = loss(&nets);
        flat[k] = orig - h;
        nets.load_flat(&flat);
        let lm = loss(&nets);
        flat[k] = orig;
        nets.load_flat(&flat);
        let numeric = (lp - lm) / (2.0 * h);
        let (name, i) = &names[k];
        entries.push(GradCheckEntry {
            name: format!("{name}[{i}]"),
            analytic: analytic[k],
            numeric,
            rel_err: relative_error(analytic[k], numeric),
        });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    GradCheckReport { entries, max_rel_err }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_backward_matches_finite_differences() {
        let r = check_gradients(&NetConfig::tiny(), 60, 11);
        for e in r.entries.iter().filter(|e| e.rel_err > 1e-4) {
            eprintln!("{e:?}");
        }
        assert!(r.max_rel_err < 1e-3, "max rel err {}", r.max_rel_err);
        let live = r.entries.iter().filter(|e| e.analytic.abs() > 1e-6).count();
        assert!(live * 2 > r.entries.len(), "only {live} non-vanishing gradients");
        for prefix in ["encoder", "denoiser", "control"] {
            assert!(r.entries.iter().any(|e| e.name.starts_with(prefix)), "{prefix} not sampled");
        }
    }
}
