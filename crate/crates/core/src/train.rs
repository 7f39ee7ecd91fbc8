//! Patch masking, backbone pretraining, control-network training with
//! random semantic masking, EMA tracking and one-shot fine-tuning.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{diffusion_loss, q_sample, NoiseSchedule};
use crate::error::{invalid_arg, Error, Result};
use crate::face::{render_snapshots, Dataset, FaceParams, ToyFaceModel};
use crate::imageio::Image;
use crate::nn::{Adam, BackboneMut, Module, ModelBundle, Stage, Tensor};

/// Which patches of an image were replaced by `fill_value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub patch_size: usize,
    pub ratio: f64,
    /// Sorted, row-major patch indices.
    pub masked_patch_indices: Vec<usize>,
    pub fill_value: f32,
}

impl MaskSpec {
    /// Short digest of the masked index set.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.patch_size as u64).to_le_bytes());
        for i in &self.masked_patch_indices {
            h.update((*i as u64).to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

pub const MASK_FILL: f32 = 0.0;
pub const DESK_PATCH: usize = 8;

/// Number of patches masked at `ratio` out of `total`.
pub fn masked_count(ratio: f64, total: usize) -> usize {
    ((ratio * total as f64).floor() as usize).min(total)
}

/// Masks `floor(ratio * P)` distinct patches, drawn uniformly, in a
/// channel-major buffer.
pub fn patch_mask_planar(
    data: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    ratio: f64,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, MaskSpec)> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(invalid_arg!("{height}x{width} image is not divisible into {patch}-pixel patches"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(invalid_arg!("mask ratio {ratio} outside [0, 1]"));
    }
    let (ph, pw) = (height / patch, width / patch);
    let total = ph * pw;
    let mut idx = rand::seq::index::sample(rng, total, masked_count(ratio, total)).into_vec();
    idx.sort_unstable();
    let mut out = data.to_vec();
    for &k in &idx {
        let (pr, pc) = (k / pw, k % pw);
        for c in 0..channels {
            for r in pr * patch..(pr + 1) * patch {
                let row = (c * height + r) * width;
                out[row + pc * patch..row + (pc + 1) * patch].fill(MASK_FILL);
            }
        }
    }
    Ok((
        out,
        MaskSpec {
            patch_size: patch,
            ratio,
            masked_patch_indices: idx,
            fill_value: MASK_FILL,
        },
    ))
}

pub fn patch_mask(image: &Image, ratio: f64, patch: usize, rng: &mut ChaCha8Rng) -> Result<(Image, MaskSpec)> {
    let (data, spec) = patch_mask_planar(&image.data, 3, image.height, image.width, ratio, patch, rng)?;
    Ok((Image::new(image.height, image.width, data)?, spec))
}

fn mask_tensor(x: &Tensor<f32>, ratio: f64, patch: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, MaskSpec)> {
    let (data, spec) = patch_mask_planar(&x.data, x.c, x.h, x.w, ratio, patch, rng)?;
    Ok((Tensor { data, ..x.clone() }, spec))
}

pub fn sample_mask_ratio(rng: &mut ChaCha8Rng, low: f64, high: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low > high {
        return Err(invalid_arg!("mask ratio interval [{low}, {high}] is not inside [0, 1]"));
    }
    if low == high {
        return Ok(low);
    }
    Ok(rng.random_range(low..=high))
}

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn ema_update(shadow: &mut [f32], params: &[f32], decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(invalid_arg!("EMA shadow has {} entries, parameters {}", shadow.len(), params.len()));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(invalid_arg!("EMA decay {decay} outside [0, 1]"));
    }
    let (d, e) = (decay as f32, (1.0 - decay) as f32);
    for (s, p) in shadow.iter_mut().zip(params) {
        *s = d * *s + e * *p;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// `None` disables EMA tracking; an absent key means `None`.
    #[serde(default)]
    pub ema_decay: Option<f64>,
    pub mask_ratio_low: f64,
    pub mask_ratio_high: f64,
    pub patch_size: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::generic()
    }
}

impl TrainConfig {
    /// Full-scale control-network training hyperparameters.
    pub fn generic() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            iterations: 437_500,
            ema_decay: Some(0.9999),
            mask_ratio_low: 0.25,
            mask_ratio_high: 0.75,
            patch_size: 16,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }

    /// Full-scale one-shot fine-tuning hyperparameters.
    pub fn one_shot() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 4,
            iterations: 1500,
            ema_decay: None,
            ..Self::generic()
        }
    }

    pub fn desk_pretrain() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 8,
            iterations: 10_000,
            ema_decay: Some(0.999),
            mask_ratio_low: 0.0,
            mask_ratio_high: 0.0,
            patch_size: DESK_PATCH,
            ..Self::generic()
        }
    }

    pub fn desk_control() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 8,
            iterations: 10_000,
            ema_decay: Some(0.999),
            patch_size: DESK_PATCH,
            ..Self::generic()
        }
    }

    pub fn desk_finetune() -> Self {
        Self {
            patch_size: DESK_PATCH,
            ..Self::one_shot()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid_arg!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return Err(invalid_arg!("batch_size must be positive"));
        }
        if !(0.0 <= self.mask_ratio_low && self.mask_ratio_low <= self.mask_ratio_high && self.mask_ratio_high <= 1.0) {
            return Err(invalid_arg!(
                "mask ratio interval [{}, {}] must satisfy 0 <= low <= high <= 1",
                self.mask_ratio_low,
                self.mask_ratio_high
            ));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..=1.0).contains(&d) {
                return Err(invalid_arg!("ema_decay {d} outside [0, 1]"));
            }
        }
        if self.patch_size == 0 {
            return Err(invalid_arg!("patch_size must be positive"));
        }
        Ok(())
    }
}

/// One image with its stacked snapshot pair (`6 x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Tensor<f32>,
    pub snapshots: Tensor<f32>,
}

/// Snapshot stack rendered from explicit parameters.
pub fn snapshot_tensor(model: &ToyFaceModel, params: &FaceParams, size: usize) -> Result<Tensor<f32>> {
    let snap = render_snapshots(model, params, size, size)?;
    Tensor::from_vec(6, size, size, snap.to_planar6())
}

/// Pairs every image of `indices` with snapshots of its stored parameters.
pub fn prepare_samples(dataset: &Dataset, model: &ToyFaceModel, indices: &[usize]) -> Result<Vec<TrainSample>> {
    indices
        .iter()
        .map(|&i| {
            let img = &dataset.images[i];
            if img.height != img.width {
                return Err(invalid_arg!("training images must be square"));
            }
            Ok(TrainSample {
                image: Tensor::from(img),
                snapshots: snapshot_tensor(model, &dataset.manifest.records[i].params, img.height)?,
            })
        })
        .collect()
}

/// One append-only training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: u64,
    pub rng_digest: String,
}

impl TrainLogLine {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log lines serialize")
    }
}

/// Digest of a generator's full state (seed, stream and position).
pub fn rng_digest(rng: &ChaCha8Rng) -> String {
    let mut h = Sha256::new();
    h.update(rng.get_seed());
    h.update(rng.get_stream().to_le_bytes());
    h.update(rng.get_word_pos().to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Receives log lines and periodic checkpoints from a training loop.
pub trait TrainObserver {
    fn on_log(&mut self, _line: &TrainLogLine) {}
    fn on_checkpoint(&mut self, _iteration: usize, _bundle: &ModelBundle) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;
impl TrainObserver for NoObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    /// The bundle with the trained component replaced by its EMA weights.
    pub ema: Option<ModelBundle>,
    pub losses: Vec<f64>,
    pub log: Vec<TrainLogLine>,
}

struct Draw {
    t: usize,
    eps: Vec<f32>,
    x_t: Tensor<f32>,
}

fn draw_noisy(x0: &Tensor<f32>, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<Draw> {
    let t = rng.random_range(1..=sched.t_train());
    let eps: Vec<f32> = (0..x0.data.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let data = q_sample(&x0.data, t, &eps, sched)?;
    Ok(Draw {
        t,
        eps,
        x_t: Tensor { data, ..x0.clone() },
    })
}

fn loss_grad(eps_hat: &Tensor<f32>, eps: &[f32], batch: usize) -> Tensor<f32> {
    let scale = 2.0 / (eps.len() * batch) as f32;
    Tensor {
        data: eps_hat.data.iter().zip(eps).map(|(a, b)| scale * (a - b)).collect(),
        ..eps_hat.clone()
    }
}

/// Unmasked backbone step: `z` from the clean image, no control features,
/// gradients into encoder and denoiser.
pub fn pretrain_step(
    bundle: &mut ModelBundle,
    batch: &[&TrainSample],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    opt: &mut Adam,
) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let d = draw_noisy(&s.image, sched, rng)?;
        let (z, ec) = bundle.encoder.forward(&s.image);
        let (eps_hat, ic, dc) = bundle.denoiser.forward(&d.x_t, d.t, &z, None);
        total += diffusion_loss(&d.eps, &eps_hat.data)?;
        let g = bundle.denoiser.backward_from(dc, &loss_grad(&eps_hat, &d.eps, batch.len()), true);
        bundle.denoiser.backward_input(ic, &g.dh0, true);
        bundle.encoder.backward(ec, &g.dz, true);
    }
    opt.step(&mut BackboneMut {
        encoder: &mut bundle.encoder,
        denoiser: &mut bundle.denoiser,
    });
    Ok(total / batch.len() as f64)
}

/// Control-network step with a masked semantic input; encoder and denoiser
/// are read but never updated.
pub fn rsm_train_step(
    bundle: &mut ModelBundle,
    batch: &[&TrainSample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    opt: &mut Adam,
) -> Result<f64> {
    let ctl = bundle
        .control
        .as_mut()
        .ok_or_else(|| Error::InvalidState("bundle has no control network to train".into()))?;
    let mut total = 0.0;
    for s in batch {
        let d = draw_noisy(&s.image, sched, rng)?;
        let rho = sample_mask_ratio(rng, cfg.mask_ratio_low, cfg.mask_ratio_high)?;
        let (masked, _) = mask_tensor(&s.image, rho, cfg.patch_size, rng)?;
        let z = bundle.encoder.encode(&masked);
        let (h0, _) = bundle.denoiser.embed_input(&d.x_t);
        let (f, cc) = ctl.forward(&s.snapshots, &h0, d.t);
        let (eps_hat, dc) = bundle.denoiser.forward_from(&h0, d.t, &z, Some(&f));
        total += diffusion_loss(&d.eps, &eps_hat.data)?;
        let g = bundle.denoiser.backward_from(dc, &loss_grad(&eps_hat, &d.eps, batch.len()), false);
        ctl.backward(cc, &g.dfeatures, true);
    }
    opt.step(ctl);
    Ok(total / batch.len() as f64)
}

/// Backbone step on replicas of one sample with the control network frozen.
pub fn finetune_step(
    bundle: &mut ModelBundle,
    sample: &TrainSample,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    opt: &mut Adam,
) -> Result<f64> {
    let mut ctl = bundle
        .control
        .take()
        .ok_or_else(|| Error::InvalidState("fine-tuning needs a trained control network".into()))?;
    let result = (|| {
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let d = draw_noisy(&sample.image, sched, rng)?;
            let rho = sample_mask_ratio(rng, cfg.mask_ratio_low, cfg.mask_ratio_high)?;
            let (masked, _) = mask_tensor(&sample.image, rho, cfg.patch_size, rng)?;
            let (z, ec) = bundle.encoder.forward(&masked);
            let (h0, ic) = bundle.denoiser.embed_input(&d.x_t);
            let (f, cc) = ctl.forward(&sample.snapshots, &h0, d.t);
            let (eps_hat, dc) = bundle.denoiser.forward_from(&h0, d.t, &z, Some(&f));
            total += diffusion_loss(&d.eps, &eps_hat.data)?;
            let g = bundle
                .denoiser
                .backward_from(dc, &loss_grad(&eps_hat, &d.eps, cfg.batch_size), true);
            let mut dh0 = ctl.backward(cc, &g.dfeatures, false);
            dh0.add_assign(&g.dh0);
            bundle.denoiser.backward_input(ic, &dh0, true);
            bundle.encoder.backward(ec, &g.dz, true);
        }
        opt.step(&mut BackboneMut {
            encoder: &mut bundle.encoder,
            denoiser: &mut bundle.denoiser,
        });
        Ok(total / cfg.batch_size as f64)
    })();
    bundle.control = Some(ctl);
    result
}

/// Which component a loop trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Backbone,
    Control,
}

fn trainable_values(bundle: &mut ModelBundle, target: Target) -> Vec<f32> {
    match target {
        Target::Backbone => BackboneMut {
            encoder: &mut bundle.encoder,
            denoiser: &mut bundle.denoiser,
        }
        .flat_values(),
        Target::Control => bundle.control.as_ref().map(|c| c.flat_values()).unwrap_or_default(),
    }
}

fn load_trainable(bundle: &mut ModelBundle, target: Target, flat: &[f32]) {
    match target {
        Target::Backbone => BackboneMut {
            encoder: &mut bundle.encoder,
            denoiser: &mut bundle.denoiser,
        }
        .load_flat(flat),
        Target::Control => {
            if let Some(c) = bundle.control.as_mut() {
                c.load_flat(flat)
            }
        }
    }
}

fn run_loop(
    mut bundle: ModelBundle,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    target: Target,
    stage: Stage,
    observer: &mut dyn TrainObserver,
    mut step: impl FnMut(&mut ModelBundle, &[&TrainSample], &mut ChaCha8Rng, &mut Adam) -> Result<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(invalid_arg!("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut shadow = cfg.ema_decay.map(|_| trainable_values(&mut bundle, target));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut log = Vec::new();
    let start = Instant::now();
    for it in 1..=cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let loss = step(&mut bundle, &batch, &mut rng, &mut opt)?;
        if !loss.is_finite() {
            return Err(Error::InvalidState(format!("training diverged at iteration {it}")));
        }
        losses.push(loss);
        if let (Some(sh), Some(decay)) = (shadow.as_mut(), cfg.ema_decay) {
            ema_update(sh, &trainable_values(&mut bundle, target), decay)?;
        }
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it == cfg.iterations) {
            let line = TrainLogLine {
                iteration: it,
                loss,
                wall_ms: start.elapsed().as_millis() as u64,
                rng_digest: rng_digest(&rng),
            };
            observer.on_log(&line);
            log.push(line);
        }
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it < cfg.iterations {
            let mut snapshot = bundle.clone();
            snapshot.stage = stage;
            observer.on_checkpoint(it, &snapshot)?;
        }
    }
    bundle.stage = stage;
    let ema = shadow.map(|sh| {
        let mut b = bundle.clone();
        load_trainable(&mut b, target, &sh);
        b
    });
    Ok(TrainOutcome {
        bundle,
        ema,
        losses,
        log,
    })
}

/// Trains encoder and denoiser from scratch without masking or control.
pub fn pretrain_diffae(
    samples: &[TrainSample],
    bundle: ModelBundle,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    run_loop(bundle, samples, cfg, Target::Backbone, Stage::Pretrained, observer, |b, batch, rng, opt| {
        pretrain_step(b, batch, sched, rng, opt)
    })
}

/// Trains the control network against the frozen backbone.
pub fn train_expfacenet(
    samples: &[TrainSample],
    bundle: ModelBundle,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if bundle.control.is_none() {
        return Err(Error::InvalidState("bundle has no control network to train".into()));
    }
    run_loop(bundle, samples, cfg, Target::Control, Stage::ControlTrained, observer, |b, batch, rng, opt| {
        rsm_train_step(b, batch, sched, cfg, rng, opt)
    })
}

/// Adapts a copy of the backbone to one image; the input bundle is left as is.
pub fn finetune_one_shot(
    sample: &TrainSample,
    bundle: &ModelBundle,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if bundle.control.is_none() {
        return Err(Error::InvalidState("fine-tuning needs a trained control network".into()));
    }
    let one = std::slice::from_ref(sample);
    run_loop(bundle.clone(), one, cfg, Target::Backbone, Stage::FineTuned, observer, |b, _, rng, opt| {
        finetune_step(b, sample, sched, cfg, rng, opt)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleParams;
    use crate::nn::NetConfig;

    fn tiny_samples(n: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| TrainSample {
                image: Tensor {
                    c: 3,
                    h: 8,
                    w: 8,
                    data: (0..192).map(|_| rng.random_range(-1.0..1.0)).collect(),
                },
                snapshots: Tensor {
                    c: 6,
                    h: 8,
                    w: 8,
                    data: (0..384).map(|_| rng.random_range(-1.0..1.0)).collect(),
                },
            })
            .collect()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            iterations: 5,
            ema_decay: Some(0.9),
            patch_size: 4,
            log_every: 1,
            ..TrainConfig::generic()
        }
    }

    #[test]
    fn mask_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Image::new(16, 16, (0..768).map(|i| (i as f32 / 768.0) - 0.4).collect()).unwrap();
        let (same, spec) = patch_mask(&img, 0.0, 8, &mut rng).unwrap();
        assert_eq!(same, img);
        assert!(spec.masked_patch_indices.is_empty());
        let (all, spec) = patch_mask(&img, 1.0, 8, &mut rng).unwrap();
        assert!(all.data.iter().all(|v| *v == MASK_FILL));
        assert_eq!(spec.masked_patch_indices, vec![0, 1, 2, 3]);
        assert!(matches!(patch_mask(&img, 0.5, 5, &mut rng), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ema_arithmetic() {
        let mut s = vec![2.0f32, -1.0];
        ema_update(&mut s, &[4.0, 7.0], 0.0).unwrap();
        assert_eq!(s, vec![4.0, 7.0]);
        ema_update(&mut s, &[1.0, 1.0], 1.0).unwrap();
        assert_eq!(s, vec![4.0, 7.0]);
        let mut s = vec![2.0f32];
        ema_update(&mut s, &[4.0], 0.5).unwrap();
        assert_eq!(s, vec![3.0]);
        assert!(ema_update(&mut s, &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn degenerate_ratio_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask_ratio(&mut rng, 0.5, 0.5).unwrap(), 0.5);
        assert!(sample_mask_ratio(&mut rng, 0.6, 0.5).is_err());
    }

    #[test]
    fn rsm_training_only_moves_the_control_network() {
        let sched = ScheduleParams::default().build().unwrap();
        let mut b = ModelBundle::new(NetConfig::tiny(), ScheduleParams::default(), 1).unwrap();
        b.attach_control(2);
        let before = (b.backbone_checksum(), b.control_checksum());
        let out = train_expfacenet(&tiny_samples(4, 3), b, &tiny_cfg(), &sched, &mut NoObserver).unwrap();
        assert_eq!(out.bundle.backbone_checksum(), before.0);
        assert_ne!(out.bundle.control_checksum(), before.1);
        assert_eq!(out.bundle.stage, Stage::ControlTrained);
        assert_eq!(out.log.len(), 5);
        let ema = out.ema.unwrap();
        assert_eq!(ema.backbone_checksum(), before.0);
        assert_ne!(ema.control_checksum(), out.bundle.control_checksum());
    }

    #[test]
    fn first_rsm_loss_equals_backbone_loss_with_the_same_draws() {
        let sched = ScheduleParams::default().build().unwrap();
        let mut b = ModelBundle::new(NetConfig::tiny(), ScheduleParams::default(), 1).unwrap();
        b.attach_control(2);
        let samples = tiny_samples(2, 4);
        let batch: Vec<&TrainSample> = samples.iter().collect();
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let loss = rsm_train_step(&mut b.clone(), &batch, &sched, &cfg, &mut rng, &mut Adam::new(1e-3)).unwrap();
        // replay the identical draws without the control branch
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut reference = 0.0;
        for s in &batch {
            let d = draw_noisy(&s.image, &sched, &mut rng).unwrap();
            let rho = sample_mask_ratio(&mut rng, cfg.mask_ratio_low, cfg.mask_ratio_high).unwrap();
            let (masked, _) = mask_tensor(&s.image, rho, cfg.patch_size, &mut rng).unwrap();
            let z = b.encoder.encode(&masked);
            let eps_hat = b.denoiser.predict(&d.x_t, d.t, &z, None);
            reference += diffusion_loss(&d.eps, &eps_hat.data).unwrap();
        }
        reference /= batch.len() as f64;
        assert!((loss - reference).abs() <= 1e-6, "{loss} vs {reference}");
    }

    #[test]
    fn finetune_moves_backbone_only_and_leaves_input_untouched() {
        let sched = ScheduleParams::default().build().unwrap();
        let mut b = ModelBundle::new(NetConfig::tiny(), ScheduleParams::default(), 1).unwrap();
        b.attach_control(2);
        let original = b.checksum();
        let sample = &tiny_samples(1, 5)[0];
        let cfg = TrainConfig {
            iterations: 3,
            ..tiny_cfg()
        };
        let out = finetune_one_shot(sample, &b, &cfg, &sched, &mut NoObserver).unwrap();
        assert_eq!(b.checksum(), original);
        assert_eq!(out.bundle.control_checksum(), b.control_checksum());
        assert_ne!(out.bundle.backbone_checksum(), b.backbone_checksum());
        assert_eq!(out.bundle.stage, Stage::FineTuned);
        let mut plain = b.clone();
        plain.control = None;
        assert!(matches!(
            finetune_one_shot(sample, &plain, &cfg, &sched, &mut NoObserver),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let sched = ScheduleParams::default().build().unwrap();
        let run = || {
            let b = ModelBundle::new(NetConfig::tiny(), ScheduleParams::default(), 1).unwrap();
            pretrain_diffae(&tiny_samples(3, 6), b, &tiny_cfg(), &sched, &mut NoObserver).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.bundle.checksum(), b.bundle.checksum());
        assert_eq!(a.losses, b.losses);
        assert_eq!(
            a.log.iter().map(|l| &l.rng_digest).collect::<Vec<_>>(),
            b.log.iter().map(|l| &l.rng_digest).collect::<Vec<_>>()
        );
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let sched = ScheduleParams::default().build().unwrap();
        let b = ModelBundle::new(NetConfig::tiny(), ScheduleParams::default(), 1).unwrap();
        assert!(matches!(
            pretrain_diffae(&[], b, &tiny_cfg(), &sched, &mut NoObserver),
            Err(Error::InvalidArgument(_))
        ));
    }
}
