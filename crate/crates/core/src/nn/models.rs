//! The semantic encoder, the conditional denoiser and the parallel control
//! network, plus their shared configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{avg_pool2, avg_pool2_backward, silu_backward, silu_tensor, silu_vec, Conv2d, ConvCache, GroupNorm, Linear, NormCache};
use super::param::{join, Module, Param};
use super::tensor::Tensor;
use super::unet::{CoreCache, DecoderSlot, ResBlock, ResCache, TimeCache, TimeMlp, UNetCore};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_stage: usize,
    pub z_dim: usize,
    pub time_embed_dim: usize,
    /// Must be empty; attention is not implemented.
    pub attention_stages: Vec<usize>,
    /// Also emit a control feature added to the middle block output.
    pub control_middle_feature: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_stage: 1,
            z_dim: 64,
            time_embed_dim: 64,
            attention_stages: Vec::new(),
            control_middle_feature: false,
        }
    }
}

impl NetConfig {
    /// Small enough to train for tens of thousands of iterations on one core.
    pub fn desk() -> Self {
        Self {
            base_channels: 8,
            channel_multipliers: vec![1, 2, 2],
            z_dim: 32,
            time_embed_dim: 32,
            ..Self::default()
        }
    }

    /// Used by gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            blocks_per_stage: 1,
            z_dim: 4,
            time_embed_dim: 8,
            attention_stages: Vec::new(),
            control_middle_feature: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.attention_stages.is_empty() {
            return bad("attention_stages is not supported; leave it empty".into());
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be non-empty and positive".into());
        }
        if self.base_channels == 0 || self.blocks_per_stage == 0 || self.z_dim == 0 {
            return bad("base_channels, blocks_per_stage and z_dim must be positive".into());
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and at least 2".into());
        }
        let downs = self.channel_multipliers.len() - 1;
        if self.image_size < 4 || self.image_size % (1 << downs) != 0 || (self.image_size >> downs) < 2 {
            return bad(format!(
                "image_size {} incompatible with {} resolution stages",
                self.image_size,
                downs + 1
            ));
        }
        if !self.image_size.is_power_of_two() {
            return bad("image_size must be a power of two".into());
        }
        Ok(())
    }

    /// Number of decoder blocks, which is also the number of control features.
    pub fn decoder_blocks(&self) -> usize {
        self.channel_multipliers.len() * (self.blocks_per_stage + 1)
    }
}

/// One additive feature per denoiser decoder block, shaped like that block's
/// input `h`, and optionally one for the middle block output.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlFeatures<T> {
    pub maps: Vec<Tensor<T>>,
    pub middle: Option<Tensor<T>>,
}

impl<T: Real> ControlFeatures<T> {
    pub fn zeros_like(slots: &[DecoderSlot], mid: Option<(usize, usize)>) -> Self {
        Self {
            maps: slots.iter().map(|s| Tensor::zeros(s.channels, s.size, s.size)).collect(),
            middle: mid.map(|(c, s)| Tensor::zeros(c, s, s)),
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.maps.iter().all(Tensor::is_all_zero) && self.middle.as_ref().is_none_or(Tensor::is_all_zero)
    }

    pub fn sq_norm(&self) -> f64 {
        self.maps
            .iter()
            .chain(self.middle.iter())
            .flat_map(|t| t.data.iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum()
    }
}

fn check_image<T>(x: &Tensor<T>, channels: usize, size: usize) {
    assert!(
        x.c == channels && x.h == size && x.w == size,
        "expected {channels}x{size}x{size} input, got {:?}",
        (x.c, x.h, x.w)
    );
}

/// Image to semantic code `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEncoder<T> {
    pub in_conv: Conv2d<T>,
    pub blocks: Vec<Option<ResBlock<T>>>,
    pub out_norm: GroupNorm<T>,
    pub fc: Linear<T>,
    image_size: usize,
}

pub struct EncoderCache<T> {
    in_c: ConvCache<T>,
    blocks: Vec<Option<ResCache<T>>>,
    n: NormCache<T>,
    a: Tensor<T>,
    pooled: Vec<T>,
}

impl<T: Real> SemanticEncoder<T> {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let base = cfg.base_channels;
        let in_conv = Conv2d::new(3, base, 3, rng);
        let mut blocks = Vec::new();
        let mut ch = base;
        let mut size = cfg.image_size;
        let stages = cfg.channel_multipliers.len();
        for (s, &m) in cfg.channel_multipliers.iter().enumerate() {
            for _ in 0..cfg.blocks_per_stage {
                blocks.push(Some(ResBlock::new(ch, base * m, None, rng)));
                ch = base * m;
            }
            // halve once per stage boundary, then down to 4x4 after the last
            let downs = if s + 1 < stages { 1 } else { size.trailing_zeros().saturating_sub(2) };
            for _ in 0..downs {
                blocks.push(None);
                size /= 2;
            }
        }
        Self {
            in_conv,
            blocks,
            out_norm: GroupNorm::new(ch),
            fc: Linear::new(ch, cfg.z_dim, rng),
            image_size: cfg.image_size,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Vec<T>, EncoderCache<T>) {
        check_image(x, 3, self.image_size);
        let (mut h, in_c) = self.in_conv.forward(x);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            match b {
                Some(block) => {
                    let (o, c) = block.forward(&h, None);
                    h = o;
                    caches.push(Some(c));
                }
                None => {
                    h = avg_pool2(&h);
                    caches.push(None);
                }
            }
        }
        let (a, n) = self.out_norm.forward(&h);
        let s = silu_tensor(&a);
        let hw = T::from_f64(s.hw() as f64);
        let pooled: Vec<T> = s.data.chunks(s.hw()).map(|c| c.iter().copied().sum::<T>() / hw).collect();
        let z = self.fc.forward(&pooled);
        (
            z,
            EncoderCache {
                in_c,
                blocks: caches,
                n,
                a,
                pooled,
            },
        )
    }

    pub fn encode(&self, x: &Tensor<T>) -> Vec<T> {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: EncoderCache<T>, dz: &[T], param_grads: bool) {
        let dp = self.fc.backward(&cache.pooled, dz, param_grads);
        let hw = cache.a.hw();
        let inv = T::ONE / T::from_f64(hw as f64);
        let mut ds = Tensor::zeros(cache.a.c, cache.a.h, cache.a.w);
        for (c, chunk) in ds.data.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = dp[c] * inv);
        }
        let da = Tensor {
            data: silu_backward(&cache.a.data, &ds.data),
            ..ds
        };
        let mut g = self.out_norm.backward(cache.n, &da, param_grads);
        for (b, c) in self.blocks.iter_mut().zip(cache.blocks).rev() {
            g = match (b, c) {
                (Some(block), Some(c)) => block.backward(c, &g, param_grads).0,
                (None, None) => avg_pool2_backward(&g),
                _ => unreachable!("cache matches layer"),
            };
        }
        self.in_conv.backward(cache.in_c, &g, param_grads, false);
    }
}

impl<T: Real> Module<T> for SemanticEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.in_conv.visit(&join(prefix, "in_conv"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(b) = b {
                b.visit(&join(prefix, &format!("block{i}")), f);
            }
        }
        self.out_norm.visit(&join(prefix, "out_norm"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.in_conv.visit_mut(&join(prefix, "in_conv"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(b) = b {
                b.visit_mut(&join(prefix, &format!("block{i}")), f);
            }
        }
        self.out_norm.visit_mut(&join(prefix, "out_norm"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

/// Noise predictor conditioned on timestep and semantic code.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    pub time: TimeMlp<T>,
    pub in_conv: Conv2d<T>,
    pub core: UNetCore<T>,
    pub out_norm: GroupNorm<T>,
    pub out_conv: Conv2d<T>,
    pub image_size: usize,
    pub z_dim: usize,
}

/// Cache of the input convolution, kept apart so that gradients arriving
/// from the control branch can be added before it is back-propagated.
pub struct InputCache<T>(ConvCache<T>);

pub struct DenoiserCache<T> {
    time: TimeCache<T>,
    temb: Vec<T>,
    core: CoreCache<T>,
    on: NormCache<T>,
    a: Tensor<T>,
    out_c: ConvCache<T>,
}

pub struct DenoiserGrads<T> {
    /// Gradient at the input-convolution output.
    pub dh0: Tensor<T>,
    pub dz: Vec<T>,
    pub dfeatures: ControlFeatures<T>,
}

impl<T: Real> Denoiser<T> {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let base = cfg.base_channels;
        let cond = cfg.time_embed_dim + cfg.z_dim;
        let time = TimeMlp::new(cfg.time_embed_dim, rng);
        let in_conv = Conv2d::new(3, base, 3, rng);
        let core = UNetCore::new(base, &cfg.channel_multipliers, cfg.blocks_per_stage, cfg.image_size, Some(cond), rng);
        let c = core.out_channels();
        Self {
            time,
            in_conv,
            out_norm: GroupNorm::new(c),
            out_conv: Conv2d::new(c, 3, 3, rng),
            core,
            image_size: cfg.image_size,
            z_dim: cfg.z_dim,
        }
    }

    pub fn slots(&self) -> &[DecoderSlot] {
        &self.core.slots
    }

    pub fn embed_input(&self, x_t: &Tensor<T>) -> (Tensor<T>, InputCache<T>) {
        check_image(x_t, 3, self.image_size);
        let (h0, c) = self.in_conv.forward(x_t);
        (h0, InputCache(c))
    }

    /// Runs everything after the input convolution.
    pub fn forward_from(
        &self,
        h0: &Tensor<T>,
        t: usize,
        z: &[T],
        features: Option<&ControlFeatures<T>>,
    ) -> (Tensor<T>, DenoiserCache<T>) {
        assert_eq!(z.len(), self.z_dim, "semantic code length");
        let (temb, time) = self.time.forward(t);
        let mut cond = silu_vec(&temb);
        cond.extend_from_slice(z);
        let (out, core) = self.core.forward(
            h0,
            Some(&cond),
            features.map(|f| f.maps.as_slice()),
            features.and_then(|f| f.middle.as_ref()),
            false,
        );
        let (a, on) = self.out_norm.forward(&out.h.expect("full mode output"));
        let (eps, out_c) = self.out_conv.forward(&silu_tensor(&a));
        (
            eps,
            DenoiserCache {
                time,
                temb,
                core,
                on,
                a,
                out_c,
            },
        )
    }

    pub fn forward(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        z: &[T],
        features: Option<&ControlFeatures<T>>,
    ) -> (Tensor<T>, InputCache<T>, DenoiserCache<T>) {
        let (h0, ic) = self.embed_input(x_t);
        let (eps, c) = self.forward_from(&h0, t, z, features);
        (eps, ic, c)
    }

    pub fn predict(&self, x_t: &Tensor<T>, t: usize, z: &[T], features: Option<&ControlFeatures<T>>) -> Tensor<T> {
        self.forward(x_t, t, z, features).0
    }

    /// Back-propagates down to the input-convolution output.
    pub fn backward_from(&mut self, cache: DenoiserCache<T>, d_eps: &Tensor<T>, param_grads: bool) -> DenoiserGrads<T> {
        let ds = self.out_conv.backward(cache.out_c, d_eps, param_grads, true).expect("dx requested");
        let da = Tensor {
            data: silu_backward(&cache.a.data, &ds.data),
            ..ds
        };
        let dh = self.out_norm.backward(cache.on, &da, param_grads);
        let g = self.core.backward(cache.core, Some(&dh), None, None, param_grads);
        let dcond = g.dcond.expect("denoiser blocks are conditioned");
        let te = self.time.dim;
        let dtemb = silu_backward(&cache.temb, &dcond[..te]);
        self.time.backward(cache.time, &dtemb, param_grads);
        DenoiserGrads {
            dh0: g.dh0,
            dz: dcond[te..].to_vec(),
            dfeatures: ControlFeatures {
                maps: g.dslots,
                middle: Some(g.dmid),
            },
        }
    }

    pub fn backward_input(&mut self, cache: InputCache<T>, dh0: &Tensor<T>, param_grads: bool) {
        self.in_conv.backward(cache.0, dh0, param_grads, false);
    }
}

impl<T: Real> Module<T> for Denoiser<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.time.visit(&join(prefix, "time"), f);
        self.in_conv.visit(&join(prefix, "in_conv"), f);
        self.core.visit(&join(prefix, "core"), f);
        self.out_norm.visit(&join(prefix, "out_norm"), f);
        self.out_conv.visit(&join(prefix, "out_conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.time.visit_mut(&join(prefix, "time"), f);
        self.in_conv.visit_mut(&join(prefix, "in_conv"), f);
        self.core.visit_mut(&join(prefix, "core"), f);
        self.out_norm.visit_mut(&join(prefix, "out_norm"), f);
        self.out_conv.visit_mut(&join(prefix, "out_conv"), f);
    }
}

/// Trainable copy of the denoiser trunk reading the stacked snapshot pair
/// (6 channels) fused with the denoiser's embedded input, emitting one
/// feature per decoder block through zero-initialised 1x1 projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlNet<T> {
    pub time: TimeMlp<T>,
    pub in_conv: Conv2d<T>,
    pub core: UNetCore<T>,
    pub proj: Vec<Conv2d<T>>,
    pub mid_proj: Option<Conv2d<T>>,
    pub image_size: usize,
}

pub struct ControlCache<T> {
    time: TimeCache<T>,
    temb: Vec<T>,
    in_c: ConvCache<T>,
    core: CoreCache<T>,
    proj: Vec<ConvCache<T>>,
    mid_proj: Option<ConvCache<T>>,
}

impl<T: Real> ControlNet<T> {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let base = cfg.base_channels;
        let time = TimeMlp::new(cfg.time_embed_dim, rng);
        let core = UNetCore::new(
            base,
            &cfg.channel_multipliers,
            cfg.blocks_per_stage,
            cfg.image_size,
            Some(cfg.time_embed_dim),
            rng,
        );
        let proj = core.slots.iter().map(|s| Conv2d::zeros(s.channels, s.channels, 1)).collect();
        let mid_proj = cfg
            .control_middle_feature
            .then(|| Conv2d::zeros(core.mid_channels, core.mid_channels, 1));
        Self {
            time,
            in_conv: Conv2d::zeros(6, base, 3),
            core,
            proj,
            mid_proj,
            image_size: cfg.image_size,
        }
    }

    /// Starts the trunk from the denoiser's trunk weights; the semantic-code
    /// columns of the modulation maps are dropped.
    pub fn init_from_denoiser(cfg: &NetConfig, den: &Denoiser<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctl = Self::new(cfg, &mut rng);
        ctl.time = den.time.clone();
        let te = cfg.time_embed_dim;
        let mut src = Vec::new();
        den.core.visit("", &mut |name, p| src.push((name.to_string(), p.value.clone(), p.shape.clone())));
        let mut i = 0;
        ctl.core.visit_mut("", &mut |name, p| {
            let (sname, sval, sshape) = &src[i];
            i += 1;
            assert_eq!(name, sname, "trunk layouts diverge");
            if p.shape == *sshape {
                p.value.copy_from_slice(sval);
            } else {
                // modulation weight [out, te + z] -> [out, te]
                let (rows, din) = (sshape[0], sshape[1]);
                for r in 0..rows {
                    p.value[r * te..(r + 1) * te].copy_from_slice(&sval[r * din..r * din + te]);
                }
            }
        });
        ctl
    }

    /// The control features are shaped to the denoiser's decoder slots.
    pub fn forward(&self, snapshots: &Tensor<T>, h0_denoiser: &Tensor<T>, t: usize) -> (ControlFeatures<T>, ControlCache<T>) {
        check_image(snapshots, 6, self.image_size);
        let (temb, time) = self.time.forward(t);
        let cond = silu_vec(&temb);
        let (mut h0, in_c) = self.in_conv.forward(snapshots);
        h0.add_assign(h0_denoiser);
        let (out, core) = self.core.forward(&h0, Some(&cond), None, None, true);
        let mut maps = Vec::with_capacity(self.proj.len());
        let mut proj_c = Vec::with_capacity(self.proj.len());
        for (p, d) in self.proj.iter().zip(&out.taps) {
            let (m, c) = p.forward(d);
            maps.push(m);
            proj_c.push(c);
        }
        let (middle, mid_c) = match &self.mid_proj {
            Some(p) => {
                let (m, c) = p.forward(out.mid_in.as_ref().expect("tap mode"));
                (Some(m), Some(c))
            }
            None => (None, None),
        };
        (
            ControlFeatures { maps, middle },
            ControlCache {
                time,
                temb,
                in_c,
                core,
                proj: proj_c,
                mid_proj: mid_c,
            },
        )
    }

    /// Returns the gradient with respect to the denoiser's embedded input.
    pub fn backward(&mut self, cache: ControlCache<T>, dfeatures: &ControlFeatures<T>, param_grads: bool) -> Tensor<T> {
        let ddec: Vec<Tensor<T>> = self
            .proj
            .iter_mut()
            .zip(cache.proj)
            .zip(&dfeatures.maps)
            .map(|((p, c), d)| p.backward(c, d, param_grads, true).expect("dx requested"))
            .collect();
        let mut dmid_out = None;
        if let (Some(p), Some(c), Some(d)) = (&mut self.mid_proj, cache.mid_proj, &dfeatures.middle) {
            dmid_out = Some(p.backward(c, d, param_grads, true).expect("dx requested"));
        }
        let g = self
            .core
            .backward(cache.core, None, Some(&ddec), dmid_out.as_ref(), param_grads);
        if let Some(dcond) = g.dcond {
            let dtemb = silu_backward(&cache.temb, &dcond);
            self.time.backward(cache.time, &dtemb, param_grads);
        }
        self.in_conv.backward(cache.in_c, &g.dh0, param_grads, false);
        g.dh0
    }
}

impl<T: Real> Module<T> for ControlNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.time.visit(&join(prefix, "time"), f);
        self.in_conv.visit(&join(prefix, "in_conv"), f);
        self.core.visit(&join(prefix, "core"), f);
        for (i, p) in self.proj.iter().enumerate() {
            p.visit(&join(prefix, &format!("proj{i}")), f);
        }
        if let Some(p) = &self.mid_proj {
            p.visit(&join(prefix, "mid_proj"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.time.visit_mut(&join(prefix, "time"), f);
        self.in_conv.visit_mut(&join(prefix, "in_conv"), f);
        self.core.visit_mut(&join(prefix, "core"), f);
        for (i, p) in self.proj.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("proj{i}")), f);
        }
        if let Some(p) = &mut self.mid_proj {
            p.visit_mut(&join(prefix, "mid_proj"), f);
        }
    }
}

fn shape_err(what: &str, got: (usize, usize, usize), want: (usize, usize, usize)) -> Error {
    Error::InvalidArgument(format!("{what}: expected {want:?} (c, h, w), got {got:?}"))
}

fn expect_shape<T: Real>(what: &str, x: &Tensor<T>, want: (usize, usize, usize)) -> Result<()> {
    if x.shape() == want {
        Ok(())
    } else {
        Err(shape_err(what, x.shape(), want))
    }
}

impl<T: Real> Denoiser<T> {
    pub fn check_features(&self, f: &ControlFeatures<T>) -> Result<()> {
        if f.maps.len() != self.core.slots.len() {
            return Err(Error::InvalidArgument(format!(
                "control features: expected {} maps, got {}",
                self.core.slots.len(),
                f.maps.len()
            )));
        }
        for (j, (m, s)) in f.maps.iter().zip(&self.core.slots).enumerate() {
            expect_shape(&format!("control feature {j}"), m, (s.channels, s.size, s.size))?;
        }
        if let Some(m) = &f.middle {
            let (c, s) = (self.core.mid_channels, self.core.mid_size);
            expect_shape("middle control feature", m, (c, s, s))?;
        }
        Ok(())
    }
}

/// Semantic code of an image, with shape and finiteness checks.
pub fn encode_semantic<T: Real>(enc: &SemanticEncoder<T>, image: &Tensor<T>) -> Result<Vec<T>> {
    let s = enc.image_size;
    expect_shape("encoder input", image, (3, s, s))?;
    let z = enc.encode(image);
    if z.iter().all(|v| v.is_finite()) {
        Ok(z)
    } else {
        Err(Error::InvalidState("semantic code is not finite".into()))
    }
}

/// Predicted noise for `x_t` at step `t`.
pub fn denoise<T: Real>(
    den: &Denoiser<T>,
    x_t: &Tensor<T>,
    t: usize,
    z: &[T],
    features: Option<&ControlFeatures<T>>,
) -> Result<Tensor<T>> {
    let s = den.image_size;
    expect_shape("denoiser input", x_t, (3, s, s))?;
    if z.len() != den.z_dim {
        return Err(Error::InvalidArgument(format!(
            "semantic code has {} entries, expected {}",
            z.len(),
            den.z_dim
        )));
    }
    if let Some(f) = features {
        den.check_features(f)?;
    }
    Ok(den.predict(x_t, t, z, features))
}

/// Control features from the stacked snapshots and the denoiser's own
/// input-layer output on the current `x_t`.
pub fn exp_face_features<T: Real>(
    ctl: &ControlNet<T>,
    snapshots: &Tensor<T>,
    denoiser_input_feats: &Tensor<T>,
    t: usize,
) -> Result<ControlFeatures<T>> {
    let s = ctl.image_size;
    expect_shape("snapshot stack", snapshots, (6, s, s))?;
    expect_shape("denoiser input features", denoiser_input_feats, (ctl.in_conv.cout, s, s))?;
    Ok(ctl.forward(snapshots, denoiser_input_feats, t).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(c: usize, s: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor {
            c,
            h: s,
            w: s,
            data: (0..c * s * s).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn setup() -> (NetConfig, SemanticEncoder<f32>, Denoiser<f32>, ChaCha8Rng) {
        let cfg = NetConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = SemanticEncoder::new(&cfg, &mut rng);
        let den = Denoiser::new(&cfg, &mut rng);
        (cfg, enc, den, rng)
    }

    #[test]
    fn zero_features_equal_absent_features() {
        let (cfg, enc, den, mut rng) = setup();
        let x = rand_tensor(3, cfg.image_size, &mut rng);
        let z = enc.encode(&x);
        let zero = ControlFeatures::zeros_like(den.slots(), Some((den.core.mid_channels, den.core.mid_size)));
        let a = denoise(&den, &x, 10, &z, None).unwrap();
        let b = denoise(&den, &x, 10, &z, Some(&zero)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), x.shape());
    }

    #[test]
    fn fresh_control_emits_zero_features_matching_the_stage_table() {
        let (cfg, _, den, mut rng) = setup();
        let ctl = ControlNet::init_from_denoiser(&cfg, &den, 9);
        let snap = rand_tensor(6, cfg.image_size, &mut rng);
        let (h0, _) = den.embed_input(&rand_tensor(3, cfg.image_size, &mut rng));
        let f = exp_face_features(&ctl, &snap, &h0, 500).unwrap();
        assert!(f.is_all_zero());
        assert_eq!(f.maps.len(), cfg.decoder_blocks());
        den.check_features(&f).unwrap();
        assert_eq!(ctl, ControlNet::init_from_denoiser(&cfg, &den, 9));
    }

    #[test]
    fn mismatched_features_are_rejected() {
        let (cfg, enc, den, mut rng) = setup();
        let x = rand_tensor(3, cfg.image_size, &mut rng);
        let z = enc.encode(&x);
        let mut f = ControlFeatures::zeros_like(den.slots(), None);
        f.maps.pop();
        assert!(matches!(denoise(&den, &x, 1, &z, Some(&f)), Err(Error::InvalidArgument(_))));
        let bad = rand_tensor(3, cfg.image_size * 2, &mut rng);
        assert!(matches!(encode_semantic(&enc, &bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn encoder_is_deterministic_and_separates_images() {
        let (cfg, enc, _, mut rng) = setup();
        for _ in 0..10 {
            let a = rand_tensor(3, cfg.image_size, &mut rng);
            let b = rand_tensor(3, cfg.image_size, &mut rng);
            let za = encode_semantic(&enc, &a).unwrap();
            assert_eq!(za, encode_semantic(&enc, &a).unwrap());
            assert_eq!(za.len(), cfg.z_dim);
            let zb = enc.encode(&b);
            let d: f32 = za.iter().zip(&zb).map(|(x, y)| (x - y) * (x - y)).sum();
            assert!(d.sqrt() > 1e-6);
        }
    }

    #[test]
    fn desk_stage_table() {
        let cfg = NetConfig::desk();
        cfg.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let den: Denoiser<f32> = Denoiser::new(&cfg, &mut rng);
        let sizes: Vec<(usize, usize)> = den.slots().iter().map(|s| (s.channels, s.size)).collect();
        assert_eq!(sizes, vec![(16, 8), (16, 8), (16, 16), (16, 16), (16, 32), (8, 32)]);
        let enc: SemanticEncoder<f32> = SemanticEncoder::new(&cfg, &mut rng);
        let x = Tensor::zeros(3, 32, 32);
        assert_eq!(enc.encode(&x).len(), cfg.z_dim);
    }

    #[test]
    fn attention_stages_are_rejected() {
        let cfg = NetConfig {
            attention_stages: vec![1],
            ..NetConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(NetConfig::default().validate().is_ok());
    }
}
