//! Residual blocks, the time-embedding MLP and the shared U-shaped trunk.

use rand_chacha::ChaCha8Rng;

use super::layers::{
    avg_pool2, avg_pool2_backward, silu_backward, silu_tensor, silu_vec, timestep_features, upsample2,
    upsample2_backward, Conv2d, ConvCache, GroupNorm, Linear, NormCache,
};
use super::param::{join, Module, Param};
use super::tensor::Tensor;
use crate::real::Real;

/// Norm, SiLU, conv, then a second norm whose output is modulated by
/// `(1 + scale) * h + shift` from a linear map of the conditioning vector,
/// SiLU, conv, plus a (projected) residual path.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub norm1: GroupNorm<T>,
    pub conv1: Conv2d<T>,
    pub emb: Option<Linear<T>>,
    pub norm2: GroupNorm<T>,
    pub conv2: Conv2d<T>,
    pub skip: Option<Conv2d<T>>,
    pub cin: usize,
    pub cout: usize,
}

pub struct ResCache<T> {
    n1: NormCache<T>,
    a1: Tensor<T>,
    c1: ConvCache<T>,
    n2: NormCache<T>,
    h2n: Tensor<T>,
    m: Tensor<T>,
    c2: ConvCache<T>,
    skip: Option<ConvCache<T>>,
    cond: Option<Vec<T>>,
    scale: Vec<T>,
}

impl<T: Real> ResBlock<T> {
    pub fn new(cin: usize, cout: usize, cond_dim: Option<usize>, rng: &mut ChaCha8Rng) -> Self {
        let norm1 = GroupNorm::new(cin);
        let conv1 = Conv2d::new(cin, cout, 3, rng);
        let emb = cond_dim.map(|d| Linear::new(d, 2 * cout, rng));
        let norm2 = GroupNorm::new(cout);
        let conv2 = Conv2d::new(cout, cout, 3, rng);
        let skip = (cin != cout).then(|| Conv2d::new(cin, cout, 1, rng));
        Self {
            norm1,
            conv1,
            emb,
            norm2,
            conv2,
            skip,
            cin,
            cout,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, cond: Option<&[T]>) -> (Tensor<T>, ResCache<T>) {
        let (a1, n1) = self.norm1.forward(x);
        let (h1, c1) = self.conv1.forward(&silu_tensor(&a1));
        let (h2n, n2) = self.norm2.forward(&h1);
        let hw = h2n.hw();
        let mut m = h2n.clone();
        let mut scale = vec![T::ZERO; self.cout];
        let cond_owned = match (&self.emb, cond) {
            (Some(emb), Some(cond)) => {
                let e = emb.forward(cond);
                for c in 0..self.cout {
                    scale[c] = e[c];
                    let (s, b) = (T::ONE + e[c], e[self.cout + c]);
                    m.data[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = *v * s + b);
                }
                Some(cond.to_vec())
            }
            (Some(_), None) => panic!("conditioned block called without conditioning"),
            _ => None,
        };
        let (h3, c2) = self.conv2.forward(&silu_tensor(&m));
        let (mut out, skip) = match &self.skip {
            Some(conv) => {
                let (s, cache) = conv.forward(x);
                (s, Some(cache))
            }
            None => (x.clone(), None),
        };
        out.add_assign(&h3);
        (
            out,
            ResCache {
                n1,
                a1,
                c1,
                n2,
                h2n,
                m,
                c2,
                skip,
                cond: cond_owned,
                scale,
            },
        )
    }

    /// Returns the input gradient and, for conditioned blocks, the gradient
    /// of the conditioning vector.
    pub fn backward(&mut self, cache: ResCache<T>, dy: &Tensor<T>, param_grads: bool) -> (Tensor<T>, Option<Vec<T>>) {
        let mut dx = match (&mut self.skip, cache.skip) {
            (Some(conv), Some(sc)) => conv.backward(sc, dy, param_grads, true).expect("dx requested"),
            _ => dy.clone(),
        };
        let ds2 = self.conv2.backward(cache.c2, dy, param_grads, true).expect("dx requested");
        let dm = silu_backward(&cache.m.data, &ds2.data);
        let hw = dy.hw();
        let mut dh2n = Tensor {
            c: dy.c,
            h: dy.h,
            w: dy.w,
            data: dm,
        };
        let mut dcond = None;
        if let (Some(emb), Some(cond)) = (&mut self.emb, &cache.cond) {
            let mut de = vec![T::ZERO; 2 * self.cout];
            for c in 0..self.cout {
                let (mut dsc, mut dsh) = (T::ZERO, T::ZERO);
                let s = T::ONE + cache.scale[c];
                for i in c * hw..(c + 1) * hw {
                    let g = dh2n.data[i];
                    dsc += g * cache.h2n.data[i];
                    dsh += g;
                    dh2n.data[i] = g * s;
                }
                de[c] = dsc;
                de[self.cout + c] = dsh;
            }
            dcond = Some(emb.backward(cond, &de, param_grads));
        }
        let dh1 = self.norm2.backward(cache.n2, &dh2n, param_grads);
        let ds1 = self.conv1.backward(cache.c1, &dh1, param_grads, true).expect("dx requested");
        let da1 = Tensor {
            c: ds1.c,
            h: ds1.h,
            w: ds1.w,
            data: silu_backward(&cache.a1.data, &ds1.data),
        };
        let dmain = self.norm1.backward(cache.n1, &da1, param_grads);
        dx.add_assign(&dmain);
        (dx, dcond)
    }
}

impl<T: Real> Module<T> for ResBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        if let Some(e) = &self.emb {
            e.visit(&join(prefix, "emb"), f);
        }
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&join(prefix, "skip"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        if let Some(e) = &mut self.emb {
            e.visit_mut(&join(prefix, "emb"), f);
        }
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(prefix, "skip"), f);
        }
    }
}

/// Sinusoidal features, Linear, SiLU, Linear.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMlp<T> {
    pub lin1: Linear<T>,
    pub lin2: Linear<T>,
    pub dim: usize,
}

pub struct TimeCache<T> {
    feats: Vec<T>,
    h1: Vec<T>,
}

impl<T: Real> TimeMlp<T> {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            lin1: Linear::new(dim, dim, rng),
            lin2: Linear::new(dim, dim, rng),
            dim,
        }
    }

    pub fn forward(&self, t: usize) -> (Vec<T>, TimeCache<T>) {
        let feats = timestep_features(t as f64, self.dim);
        let h1 = self.lin1.forward(&feats);
        let out = self.lin2.forward(&silu_vec(&h1));
        (out, TimeCache { feats, h1 })
    }

    pub fn backward(&mut self, cache: TimeCache<T>, dy: &[T], param_grads: bool) {
        if !param_grads {
            return;
        }
        let dh = self.lin2.backward(&silu_vec(&cache.h1), dy, true);
        let dh1 = silu_backward(&cache.h1, &dh);
        self.lin1.backward(&cache.feats, &dh1, true);
    }
}

impl<T: Real> Module<T> for TimeMlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.lin1.visit(&join(prefix, "lin1"), f);
        self.lin2.visit(&join(prefix, "lin2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.lin1.visit_mut(&join(prefix, "lin1"), f);
        self.lin2.visit_mut(&join(prefix, "lin2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncLayer<T> {
    Res(ResBlock<T>),
    Down,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecLayer<T> {
    pub res: ResBlock<T>,
    /// Nearest upsampling followed by this 3x3 conv, applied after `res`.
    pub up: Option<Conv2d<T>>,
}

/// Shape of `h` entering one decoder block (before the skip concatenation),
/// which is where a control feature is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct DecoderSlot {
    pub channels: usize,
    pub size: usize,
    pub out_channels: usize,
}

/// Encoder stages with skip pushes after the input layer, every residual
/// block and every downsample; a middle block; decoder blocks consuming the
/// skips in reverse through channel concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetCore<T> {
    pub enc: Vec<EncLayer<T>>,
    pub mid: ResBlock<T>,
    pub dec: Vec<DecLayer<T>>,
    pub slots: Vec<DecoderSlot>,
    pub mid_channels: usize,
    pub mid_size: usize,
}

enum EncCache<T> {
    Res(ResCache<T>),
    Down,
}

pub struct CoreCache<T> {
    enc: Vec<EncCache<T>>,
    n_skips: usize,
    mid: ResCache<T>,
    dec: Vec<(ResCache<T>, Option<ConvCache<T>>)>,
}

/// What one trunk pass produced.
pub struct CoreOutput<T> {
    /// Final output; absent in tap mode.
    pub h: Option<Tensor<T>>,
    /// In tap mode, `h` entering each decoder block.
    pub taps: Vec<Tensor<T>>,
    /// In tap mode, `h` entering the middle block.
    pub mid_in: Option<Tensor<T>>,
}

pub struct CoreGrads<T> {
    pub dh0: Tensor<T>,
    pub dcond: Option<Vec<T>>,
    /// Gradient at each decoder block input; equals the gradient of an
    /// additive feature there.
    pub dslots: Vec<Tensor<T>>,
    /// Gradient at the middle block input.
    pub dmid: Tensor<T>,
}

fn add_opt<T: Real>(acc: &mut Option<Vec<T>>, d: Option<Vec<T>>) {
    if let Some(d) = d {
        match acc {
            Some(a) => a.iter_mut().zip(&d).for_each(|(x, y)| *x += *y),
            None => *acc = Some(d),
        }
    }
}

impl<T: Real> UNetCore<T> {
    pub fn new(
        base: usize,
        mults: &[usize],
        blocks: usize,
        size: usize,
        cond_dim: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut enc = Vec::new();
        let mut skips = vec![base];
        let mut ch = base;
        let mut sz = size;
        for (s, &m) in mults.iter().enumerate() {
            for _ in 0..blocks {
                enc.push(EncLayer::Res(ResBlock::new(ch, base * m, cond_dim, rng)));
                ch = base * m;
                skips.push(ch);
            }
            if s + 1 < mults.len() {
                enc.push(EncLayer::Down);
                sz /= 2;
                skips.push(ch);
            }
        }
        let mid = ResBlock::new(ch, ch, cond_dim, rng);
        let (mid_channels, mid_size) = (ch, sz);
        let mut dec = Vec::new();
        let mut slots = Vec::new();
        for (s, &m) in mults.iter().enumerate().rev() {
            for b in 0..=blocks {
                let skip_ch = skips.pop().expect("skip available");
                let out = base * m;
                slots.push(DecoderSlot {
                    channels: ch,
                    size: sz,
                    out_channels: out,
                });
                let res = ResBlock::new(ch + skip_ch, out, cond_dim, rng);
                ch = out;
                let up = (b == blocks && s > 0).then(|| Conv2d::new(ch, ch, 3, rng));
                if up.is_some() {
                    sz *= 2;
                }
                dec.push(DecLayer { res, up });
            }
        }
        debug_assert!(skips.is_empty());
        Self {
            enc,
            mid,
            dec,
            slots,
            mid_channels,
            mid_size,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.slots.last().map_or(self.mid_channels, |s| s.out_channels)
    }

    /// `slot_feats[j]` is added to `h` entering decoder block `j`, `mid_feat`
    /// to `h` entering the middle block. In tap mode the inputs of every
    /// decoder block are recorded and the last block, whose output nothing
    /// would read, is skipped.
    pub fn forward(
        &self,
        h0: &Tensor<T>,
        cond: Option<&[T]>,
        slot_feats: Option<&[Tensor<T>]>,
        mid_feat: Option<&Tensor<T>>,
        taps: bool,
    ) -> (CoreOutput<T>, CoreCache<T>) {
        let mut skips = vec![h0.clone()];
        let mut h = h0.clone();
        let mut enc_cache = Vec::with_capacity(self.enc.len());
        for layer in &self.enc {
            match layer {
                EncLayer::Res(block) => {
                    let (o, c) = block.forward(&h, cond);
                    h = o;
                    enc_cache.push(EncCache::Res(c));
                }
                EncLayer::Down => {
                    h = avg_pool2(&h);
                    enc_cache.push(EncCache::Down);
                }
            }
            skips.push(h.clone());
        }
        let n_skips = skips.len();
        if let Some(f) = mid_feat {
            h.add_assign(f);
        }
        let mid_in = taps.then(|| h.clone());
        let (mut h, mid_cache) = self.mid.forward(&h, cond);
        let mut dec_cache = Vec::with_capacity(self.dec.len());
        let mut tap_out = Vec::new();
        let n = self.dec.len();
        for (j, layer) in self.dec.iter().enumerate() {
            if let Some(feats) = slot_feats {
                h.add_assign(&feats[j]);
            }
            if taps {
                tap_out.push(h.clone());
                if j + 1 == n {
                    break;
                }
            }
            let skip = skips.pop().expect("skip available");
            let (o, rc) = layer.res.forward(&Tensor::concat(&h, &skip), cond);
            h = o;
            let uc = match &layer.up {
                Some(conv) => {
                    let (o, c) = conv.forward(&upsample2(&h));
                    h = o;
                    Some(c)
                }
                None => None,
            };
            dec_cache.push((rc, uc));
        }
        (
            CoreOutput {
                h: (!taps).then_some(h),
                taps: tap_out,
                mid_in,
            },
            CoreCache {
                enc: enc_cache,
                n_skips,
                mid: mid_cache,
                dec: dec_cache,
            },
        )
    }

    /// `dh` is the gradient of the final output (full mode), `dtaps` of the
    /// recorded decoder inputs and `dmid_in` of the middle input (tap mode).
    pub fn backward(
        &mut self,
        cache: CoreCache<T>,
        dh: Option<&Tensor<T>>,
        dtaps: Option<&[Tensor<T>]>,
        dmid_in: Option<&Tensor<T>>,
        param_grads: bool,
    ) -> CoreGrads<T> {
        let n = self.dec.len();
        let n_run = cache.dec.len();
        let mut dcond: Option<Vec<T>> = None;
        let mut dskips: Vec<Option<Tensor<T>>> = (0..cache.n_skips).map(|_| None).collect();
        let mut dslots: Vec<Tensor<T>> = Vec::with_capacity(n);
        let mut run = cache.dec;
        let mut g = match dh {
            Some(d) => d.clone(),
            None => {
                let s = self.slots[n - 1];
                Tensor::zeros(s.channels, s.size, s.size)
            }
        };
        for j in (0..n).rev() {
            if j < n_run {
                let (rc, uc) = run.pop().expect("cache per run block");
                let layer = &mut self.dec[j];
                if let (Some(conv), Some(uc)) = (&mut layer.up, uc) {
                    let du = conv.backward(uc, &g, param_grads, true).expect("dx requested");
                    g = upsample2_backward(&du);
                }
                let (dcat, dc) = layer.res.backward(rc, &g, param_grads);
                add_opt(&mut dcond, dc);
                let (dh_in, dskip) = dcat.split(self.slots[j].channels);
                // decoder block j consumed skip index n_skips - 1 - j
                dskips[cache.n_skips - 1 - j] = Some(dskip);
                g = dh_in;
            }
            if let Some(dt) = dtaps {
                g.add_assign(&dt[j]);
            }
            dslots.push(g.clone());
        }
        dslots.reverse();
        let (dm, dc) = self.mid.backward(cache.mid, &g, param_grads);
        add_opt(&mut dcond, dc);
        g = dm;
        if let Some(d) = dmid_in {
            g.add_assign(d);
        }
        let dmid = g.clone();
        for (i, (layer, ec)) in self.enc.iter_mut().zip(cache.enc).enumerate().rev() {
            // layer i produced skip index i + 1
            if let Some(ds) = dskips[i + 1].take() {
                g.add_assign(&ds);
            }
            g = match (layer, ec) {
                (EncLayer::Res(block), EncCache::Res(rc)) => {
                    let (dx, dc) = block.backward(rc, &g, param_grads);
                    add_opt(&mut dcond, dc);
                    dx
                }
                (EncLayer::Down, EncCache::Down) => avg_pool2_backward(&g),
                _ => unreachable!("cache matches layer"),
            };
        }
        if let Some(ds) = dskips[0].take() {
            g.add_assign(&ds);
        }
        CoreGrads {
            dh0: g,
            dcond,
            dslots,
            dmid,
        }
    }
}

impl<T: Real> Module<T> for UNetCore<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, l) in self.enc.iter().enumerate() {
            if let EncLayer::Res(b) = l {
                b.visit(&join(prefix, &format!("enc{i}")), f);
            }
        }
        self.mid.visit(&join(prefix, "mid"), f);
        for (i, l) in self.dec.iter().enumerate() {
            l.res.visit(&join(prefix, &format!("dec{i}")), f);
            if let Some(u) = &l.up {
                u.visit(&join(prefix, &format!("dec{i}.up")), f);
            }
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.enc.iter_mut().enumerate() {
            if let EncLayer::Res(b) = l {
                b.visit_mut(&join(prefix, &format!("enc{i}")), f);
            }
        }
        self.mid.visit_mut(&join(prefix, "mid"), f);
        for (i, l) in self.dec.iter_mut().enumerate() {
            l.res.visit_mut(&join(prefix, &format!("dec{i}")), f);
            if let Some(u) = &mut l.up {
                u.visit_mut(&join(prefix, &format!("dec{i}.up")), f);
            }
        }
    }
}
