//! Inference-time editing: target parameters, the per-step semantic mask
//! schedule, the deterministic denoising loop, inpainting and linear edits
//! of the semantic code.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{ddim_step, make_timestep_plan, NoiseSchedule, DEFAULT_T_INF};
use crate::error::{invalid_arg, Error, Result};
use crate::face::{fit_params, FaceParams, ToyFaceModel};
use crate::imageio::Image;
use crate::nn::{ModelBundle, Stage, Tensor};
use crate::train::{patch_mask_planar, snapshot_tensor, DESK_PATCH, MASK_FILL};

/// Per-step semantic mask ratio policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskStrategy {
    Constant { rho: f64 },
    /// `rho_early` while `t > T/2`, `rho_late` afterwards.
    TwoPhase { rho_early: f64, rho_late: f64 },
    Linear,
}

impl Default for MaskStrategy {
    fn default() -> Self {
        MaskStrategy::Linear
    }
}

impl MaskStrategy {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| (0.0..=1.0).contains(&r);
        let valid = match *self {
            MaskStrategy::Constant { rho } => ok(rho),
            MaskStrategy::TwoPhase { rho_early, rho_late } => ok(rho_early) && ok(rho_late),
            MaskStrategy::Linear => true,
        };
        if valid {
            Ok(())
        } else {
            Err(invalid_arg!("mask ratios must lie in [0, 1]: {self:?}"))
        }
    }
}

/// The six inference strategies compared in the ablation, labelled A to F.
pub fn ablation_strategies() -> Vec<(char, MaskStrategy)> {
    vec![
        ('A', MaskStrategy::Constant { rho: 0.0 }),
        ('B', MaskStrategy::Constant { rho: 0.75 }),
        ('C', MaskStrategy::Constant { rho: 0.25 }),
        (
            'D',
            MaskStrategy::TwoPhase {
                rho_early: 0.25,
                rho_late: 0.75,
            },
        ),
        (
            'E',
            MaskStrategy::TwoPhase {
                rho_early: 0.75,
                rho_late: 0.25,
            },
        ),
        ('F', MaskStrategy::Linear),
    ]
}

/// Mask ratio at step `t` of `t_total`; linear is `0.75 - 0.5 (T - t) / T`.
pub fn mask_schedule(strategy: &MaskStrategy, t_total: usize, t: usize) -> Result<f64> {
    if t == 0 || t > t_total {
        return Err(invalid_arg!("step {t} outside [1, {t_total}]"));
    }
    strategy.validate()?;
    Ok(match *strategy {
        MaskStrategy::Constant { rho } => rho,
        MaskStrategy::TwoPhase { rho_early, rho_late } => {
            if 2 * t > t_total {
                rho_early
            } else {
                rho_late
            }
        }
        MaskStrategy::Linear => 0.75 - 0.5 * (t_total - t) as f64 / t_total as f64,
    })
}

/// Replacement values for the editable explicit parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamOverrides {
    pub theta_global: Option<[f64; 3]>,
    pub theta_jaw: Option<f64>,
    pub psi: Option<Vec<f64>>,
    pub light: Option<[f64; 9]>,
}

impl ParamOverrides {
    pub fn is_empty(&self) -> bool {
        self.theta_global.is_none() && self.theta_jaw.is_none() && self.psi.is_none() && self.light.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    #[serde(default)]
    pub source_image_ref: Option<String>,
    pub source_params: FaceParams,
    #[serde(default)]
    pub overrides: ParamOverrides,
    /// Pose, expression and light are taken from here when set.
    #[serde(default)]
    pub drive_params: Option<FaceParams>,
    #[serde(default)]
    pub strategy: MaskStrategy,
    #[serde(default = "default_t_inf")]
    pub t_inf: usize,
    #[serde(default)]
    pub noise_seed: u64,
    /// Added to the semantic code at every step.
    #[serde(default)]
    pub semantic_shift: Option<Vec<f32>>,
}

fn default_t_inf() -> usize {
    DEFAULT_T_INF
}

impl EditRequest {
    pub fn new(source_params: FaceParams) -> Self {
        Self {
            source_image_ref: None,
            source_params,
            overrides: ParamOverrides::default(),
            drive_params: None,
            strategy: MaskStrategy::Linear,
            t_inf: DEFAULT_T_INF,
            noise_seed: 0,
            semantic_shift: None,
        }
    }
}

/// Source parameters with pose, expression and light replaced; shape,
/// detail, albedo and camera always come from the source.
pub fn build_target_params(source: &FaceParams, request: &EditRequest) -> Result<FaceParams> {
    let o = &request.overrides;
    let mut out = source.clone();
    if let Some(drive) = &request.drive_params {
        let clash: Vec<&str> = [
            ("theta_global", o.theta_global.is_some()),
            ("theta_jaw", o.theta_jaw.is_some()),
            ("psi", o.psi.is_some()),
            ("light", o.light.is_some()),
        ]
        .iter()
        .filter(|(_, set)| *set)
        .map(|(n, _)| *n)
        .collect();
        if !clash.is_empty() {
            return Err(invalid_arg!("overrides {clash:?} conflict with drive_params"));
        }
        if drive.psi.len() != source.psi.len() {
            return Err(invalid_arg!("drive_params psi length {} != {}", drive.psi.len(), source.psi.len()));
        }
        out.theta_global = drive.theta_global;
        out.theta_jaw = drive.theta_jaw;
        out.psi = drive.psi.clone();
        out.light = drive.light;
        return Ok(out);
    }
    if let Some(v) = o.theta_global {
        out.theta_global = v;
    }
    if let Some(v) = o.theta_jaw {
        out.theta_jaw = v;
    }
    if let Some(v) = &o.psi {
        if v.len() != source.psi.len() {
            return Err(invalid_arg!("psi override has {} entries, expected {}", v.len(), source.psi.len()));
        }
        out.psi = v.clone();
    }
    if let Some(v) = o.light {
        out.light = v;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub t: usize,
    pub t_prev: usize,
    pub rho: f64,
    pub mask_digest: String,
    pub x_norm: f64,
    pub eps_norm: f64,
    pub feature_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTrace {
    pub target_params: FaceParams,
    pub strategy: MaskStrategy,
    pub t_inf: usize,
    pub noise_seed: u64,
    pub steps: Vec<TraceStep>,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
}

fn require_control(bundle: &ModelBundle) -> Result<()> {
    match (&bundle.control, bundle.stage) {
        (Some(_), Stage::ControlTrained | Stage::FineTuned) => Ok(()),
        _ => Err(Error::InvalidState(
            "editing needs a bundle with a trained control network".into(),
        )),
    }
}

fn check_image(bundle: &ModelBundle, image: &Image) -> Result<()> {
    let s = bundle.config.image_size;
    if image.height != s || image.width != s {
        return Err(invalid_arg!("image is {}x{}, model expects {s}x{s}", image.height, image.width));
    }
    Ok(())
}

fn noise_image(size: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3 * size * size).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Generator for per-step masks: same seed as the noise, separate stream.
fn mask_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Core sampling loop shared by edits and inpainting. `source` is the image
/// the semantic masks are applied to.
fn guided_sample(
    bundle: &ModelBundle,
    sched: &NoiseSchedule,
    source: &Tensor<f32>,
    snapshots: &Tensor<f32>,
    strategy: &MaskStrategy,
    t_inf: usize,
    noise_seed: u64,
    shift: Option<&[f32]>,
) -> Result<(Tensor<f32>, Vec<TraceStep>)> {
    strategy.validate()?;
    let ctl = bundle.control.as_ref().expect("checked by caller");
    let plan = make_timestep_plan(sched.t_train(), t_inf)?;
    let size = bundle.config.image_size;
    if let Some(d) = shift {
        if d.len() != bundle.config.z_dim {
            return Err(invalid_arg!("semantic shift has {} entries, expected {}", d.len(), bundle.config.z_dim));
        }
    }
    let mut x = Tensor {
        c: 3,
        h: size,
        w: size,
        data: noise_image(size, noise_seed),
    };
    let mut mrng = mask_rng(noise_seed);
    let mut trace = Vec::with_capacity(plan.len());
    for (step, (t, t_prev)) in plan.pairs().enumerate() {
        // the schedule is indexed by the inference step position, T_inf..1
        let rho = mask_schedule(strategy, t_inf, t_inf - step)?;
        let (masked, spec) = patch_mask_planar(&source.data, 3, size, size, rho, DESK_PATCH.min(size), &mut mrng)?;
        let mut z = bundle.encoder.encode(&Tensor {
            data: masked,
            ..source.clone()
        });
        if let Some(d) = shift {
            z.iter_mut().zip(d).for_each(|(a, b)| *a += *b);
        }
        let (h0, _) = bundle.denoiser.embed_input(&x);
        let (f, _) = ctl.forward(snapshots, &h0, t);
        let (eps, _) = bundle.denoiser.forward_from(&h0, t, &z, Some(&f));
        x.data = ddim_step(&x.data, &eps.data, t, t_prev, sched, true)?;
        trace.push(TraceStep {
            step,
            t,
            t_prev,
            rho,
            mask_digest: spec.digest(),
            x_norm: norm(&x.data),
            eps_norm: norm(&eps.data),
            feature_norm: f.sq_norm().sqrt(),
        });
    }
    x.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok((x, trace))
}

/// Renders the target snapshots once, then denoises from seeded Gaussian
/// noise with freshly masked semantic codes of the source at every step.
pub fn edit(
    bundle: &ModelBundle,
    model: &ToyFaceModel,
    image: &Image,
    request: &EditRequest,
) -> Result<(Image, EditTrace)> {
    require_control(bundle)?;
    check_image(bundle, image)?;
    let target = build_target_params(&request.source_params, request)?;
    target.validate(model)?;
    let sched = bundle.schedule.build()?;
    let size = bundle.config.image_size;
    let snapshots = snapshot_tensor(model, &target, size)?;
    let (x, steps) = guided_sample(
        bundle,
        &sched,
        &Tensor::from(image),
        &snapshots,
        &request.strategy,
        request.t_inf,
        request.noise_seed,
        request.semantic_shift.as_deref(),
    )?;
    Ok((
        x.to_image(),
        EditTrace {
            target_params: target,
            strategy: request.strategy,
            t_inf: request.t_inf,
            noise_seed: request.noise_seed,
            steps,
        },
    ))
}

/// Plain conditional decoding of a semantic code without control, as the
/// pretrained backbone alone would do it.
pub fn decode_semantic(bundle: &ModelBundle, z: &[f32], noise_seed: u64, t_inf: usize) -> Result<Image> {
    if z.len() != bundle.config.z_dim {
        return Err(invalid_arg!("semantic code has {} entries, expected {}", z.len(), bundle.config.z_dim));
    }
    let sched = bundle.schedule.build()?;
    let plan = make_timestep_plan(sched.t_train(), t_inf)?;
    let size = bundle.config.image_size;
    let mut x = Tensor {
        c: 3,
        h: size,
        w: size,
        data: noise_image(size, noise_seed),
    };
    for (t, t_prev) in plan.pairs() {
        let eps = bundle.denoiser.predict(&x, t, z, None);
        x.data = ddim_step(&x.data, &eps.data, t, t_prev, &sched, true)?;
    }
    x.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(x.to_image())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintOptions {
    pub strategy: MaskStrategy,
    pub t_inf: usize,
    pub noise_seed: u64,
    pub fit_budget: usize,
    pub fit_seed: u64,
    /// Skip fitting and use these parameters.
    pub params: Option<FaceParams>,
}

impl Default for InpaintOptions {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::Linear,
            t_inf: DEFAULT_T_INF,
            noise_seed: 0,
            fit_budget: 2000,
            fit_seed: 0,
            params: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintResult {
    pub image: Image,
    pub params: FaceParams,
    pub trace: EditTrace,
}

/// `region_mask[p]` is true for missing pixels. Those pixels are filled,
/// parameters are fitted on the visible ones, and an identity edit is run
/// whose per-step semantic masks are applied on top of the region mask.
pub fn inpaint(
    bundle: &ModelBundle,
    model: &ToyFaceModel,
    image: &Image,
    region_mask: &[bool],
    opts: &InpaintOptions,
) -> Result<InpaintResult> {
    require_control(bundle)?;
    check_image(bundle, image)?;
    let hw = image.height * image.width;
    if region_mask.len() != hw {
        return Err(invalid_arg!("region mask has {} entries, expected {hw}", region_mask.len()));
    }
    if region_mask.iter().all(|m| *m) {
        return Err(invalid_arg!("region mask covers the whole image"));
    }
    let mut filled = image.clone();
    for c in 0..3 {
        for (p, _) in region_mask.iter().enumerate().filter(|(_, m)| **m) {
            filled.data[c * hw + p] = MASK_FILL;
        }
    }
    let params = match &opts.params {
        Some(p) => p.clone(),
        None => {
            let weights: Vec<f64> = region_mask.iter().map(|m| if *m { 0.0 } else { 1.0 }).collect();
            fit_params(&filled, model, &FaceParams::neutral(model), opts.fit_budget, opts.fit_seed, Some(&weights))?.params
        }
    };
    let request = EditRequest {
        strategy: opts.strategy,
        t_inf: opts.t_inf,
        noise_seed: opts.noise_seed,
        ..EditRequest::new(params.clone())
    };
    let (out, trace) = edit(bundle, model, &filled, &request)?;
    Ok(InpaintResult {
        image: out,
        params,
        trace,
    })
}

/// Centered square covering `area_fraction` of the image.
pub fn center_region(size: usize, area_fraction: f64) -> Vec<bool> {
    let side = ((area_fraction.clamp(0.0, 1.0)).sqrt() * size as f64).round() as usize;
    let lo = (size - side) / 2;
    let mut m = vec![false; size * size];
    for r in lo..lo + side {
        for c in lo..lo + side {
            m[r * size + c] = true;
        }
    }
    m
}

/// Unit normal of an L2-regularised logistic-regression boundary separating
/// the labelled codes, pointing toward the positive class.
pub fn learn_attribute_direction(codes: &[Vec<f32>], labels: &[bool]) -> Result<Vec<f32>> {
    if codes.len() != labels.len() || codes.is_empty() {
        return Err(invalid_arg!("need one label per code"));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos < 2 || neg < 2 {
        return Err(invalid_arg!("need at least two examples of each class, got {pos} and {neg}"));
    }
    let dim = codes[0].len();
    if dim == 0 || codes.iter().any(|c| c.len() != dim) {
        return Err(invalid_arg!("codes must share a positive dimension"));
    }
    let n = codes.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| codes.iter().map(|c| c[j] as f64).sum::<f64>() / n).collect();
    let xs: Vec<Vec<f64>> = codes
        .iter()
        .map(|c| (0..dim).map(|j| c[j] as f64 - mean[j]).collect())
        .collect();
    let ys: Vec<f64> = labels.iter().map(|l| if *l { 1.0 } else { -1.0 }).collect();
    let lambda = 1e-2;
    // inverse of a bound on the loss gradient's Lipschitz constant
    let sq = xs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n;
    let lr = 1.0 / (0.25 * (sq + 1.0) + lambda);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..2000 {
        let mut gw: Vec<f64> = w.iter().map(|v| lambda * v).collect();
        let mut gb = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let m = y * (b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>());
            // d/dm log(1 + e^-m) = -1 / (1 + e^m)
            let s = -y / (1.0 + m.exp());
            gw.iter_mut().zip(x).for_each(|(g, a)| *g += s * a / n);
            gb += s / n;
        }
        w.iter_mut().zip(&gw).for_each(|(v, g)| *v -= lr * g);
        b -= lr * gb;
    }
    let d = w;
    let len = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(len > 0.0 && len.is_finite()) {
        return Err(Error::UndefinedScore("classifier weights vanished".into()));
    }
    Ok(d.iter().map(|v| (v / len) as f32).collect())
}

/// `z + scale * d`.
pub fn manipulate_semantic(z: &[f32], d: &[f32], scale: f32) -> Result<Vec<f32>> {
    if z.len() != d.len() {
        return Err(invalid_arg!("code has {} entries, direction {}", z.len(), d.len()));
    }
    Ok(z.iter().zip(d).map(|(a, b)| a + scale * b).collect())
}

/// Short digest of an image's bytes, for logs and traces.
pub fn image_digest(image: &Image) -> String {
    let mut h = Sha256::new();
    for v in &image.data {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}
