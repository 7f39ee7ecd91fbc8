//! Layers with hand-written backward passes. Forward calls return the output
//! and a cache; backward consumes the cache, accumulates parameter gradients
//! when asked, and returns the input gradient.

use rand_chacha::ChaCha8Rng;

use super::param::{join, Module, Param};
use super::tensor::Tensor;
use crate::real::Real;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::ONE + x * (T::ONE - s))
}

pub fn silu_vec<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| silu(v)).collect()
}

pub fn silu_tensor<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        c: x.c,
        h: x.h,
        w: x.w,
        data: silu_vec(&x.data),
    }
}

/// `dy * silu'(x)` elementwise.
pub fn silu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter().zip(dy).map(|(&x, &g)| g * silu_grad(x)).collect()
}

/// 3x3 (padding 1) or 1x1 convolution, stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

pub struct ConvCache<T> {
    /// im2col matrix (`cin*k*k x H*W`); for 1x1 this is the input itself.
    cols: Vec<T>,
    h: usize,
    w: usize,
}

impl<T: Real> Conv2d<T> {
    /// Uniform init in `+-1/sqrt(fan_in)`.
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels");
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Self {
            weight: Param::uniform(&[cout, cin, k, k], bound, rng),
            bias: Param::uniform(&[cout], bound, rng),
            cin,
            cout,
            k,
        }
    }

    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            weight: Param::zeros(&[cout, cin, k, k]),
            bias: Param::zeros(&[cout]),
            cin,
            cout,
            k,
        }
    }

    fn im2col(&self, x: &Tensor<T>) -> Vec<T> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let mut cols = vec![T::ZERO; self.cin * 9 * hw];
        for ci in 0..self.cin {
            let src = x.channel(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                row[y * w + xx] = src[sy * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize) -> Tensor<T> {
        let hw = h * w;
        let mut out = Tensor::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let dst = &mut out.data[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                dst[sy * w + sx as usize] += row[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.hw();
        let kk = self.cin * self.k * self.k;
        let cols = if self.k == 3 { self.im2col(x) } else { x.data.clone() };
        let mut out = Tensor::zeros(self.cout, x.h, x.w);
        for (co, chunk) in out.data.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias.value[co]);
        }
        T::gemm(self.cout, kk, hw, &self.weight.value, kk as isize, 1, &cols, hw as isize, 1, T::ONE, &mut out.data);
        (out, ConvCache { cols, h: x.h, w: x.w })
    }

    /// Returns `None` for the input gradient when `need_dx` is false.
    pub fn backward(&mut self, cache: ConvCache<T>, dy: &Tensor<T>, param_grads: bool, need_dx: bool) -> Option<Tensor<T>> {
        let hw = cache.h * cache.w;
        let kk = self.cin * self.k * self.k;
        if param_grads {
            for (co, chunk) in dy.data.chunks(hw).enumerate() {
                self.bias.grad[co] += chunk.iter().copied().sum::<T>();
            }
            T::gemm(self.cout, hw, kk, &dy.data, hw as isize, 1, &cache.cols, 1, hw as isize, T::ONE, &mut self.weight.grad);
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::ZERO; kk * hw];
        T::gemm(kk, self.cout, hw, &self.weight.value, 1, kk as isize, &dy.data, hw as isize, 1, T::ZERO, &mut dcols);
        if self.k == 3 {
            Some(self.col2im(&dcols, cache.h, cache.w))
        } else {
            Some(Tensor {
                c: self.cin,
                h: cache.h,
                w: cache.w,
                data: dcols,
            })
        }
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Largest group count in {8, 4, 2, 1} dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub groups: usize,
    pub channels: usize,
}

pub struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], T::ONE),
            beta: Param::zeros(&[channels]),
            groups: group_count(channels),
            channels,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let hw = x.hw();
        let cg = self.channels / self.groups;
        let n = T::from_f64((cg * hw) as f64);
        let mut xhat = Tensor::zeros(x.c, x.h, x.w);
        let mut out = Tensor::zeros(x.c, x.h, x.w);
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let range = g * cg * hw..(g + 1) * cg * hw;
            let xs = &x.data[range.clone()];
            let mean = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::ONE / (var + T::from_f64(NORM_EPS)).sqrt();
            inv_std.push(inv);
            for (i, idx) in range.enumerate() {
                let c = g * cg + i / hw;
                let xh = (x.data[idx] - mean) * inv;
                xhat.data[idx] = xh;
                out.data[idx] = self.gamma.value[c] * xh + self.beta.value[c];
            }
        }
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: NormCache<T>, dy: &Tensor<T>, param_grads: bool) -> Tensor<T> {
        let hw = dy.hw();
        let cg = self.channels / self.groups;
        let n = T::from_f64((cg * hw) as f64);
        let xhat = &cache.xhat;
        if param_grads {
            for c in 0..self.channels {
                let (mut dg, mut db) = (T::ZERO, T::ZERO);
                for i in c * hw..(c + 1) * hw {
                    dg += dy.data[i] * xhat.data[i];
                    db += dy.data[i];
                }
                self.gamma.grad[c] += dg;
                self.beta.grad[c] += db;
            }
        }
        let mut dx = Tensor::zeros(dy.c, dy.h, dy.w);
        for g in 0..self.groups {
            let range = g * cg * hw..(g + 1) * cg * hw;
            let (mut s1, mut s2) = (T::ZERO, T::ZERO);
            for idx in range.clone() {
                let c = idx / hw;
                let dxh = dy.data[idx] * self.gamma.value[c];
                s1 += dxh;
                s2 += dxh * xhat.data[idx];
            }
            let inv = cache.inv_std[g];
            for idx in range {
                let c = idx / hw;
                let dxh = dy.data[idx] * self.gamma.value[c];
                dx.data[idx] = inv / n * (n * dxh - s1 - xhat.data[idx] * s2);
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for GroupNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Dense layer on a vector; weight is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub din: usize,
    pub dout: usize,
}

impl<T: Real> Linear<T> {
    pub fn new(din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            weight: Param::uniform(&[dout, din], bound, rng),
            bias: Param::uniform(&[dout], bound, rng),
            din,
            dout,
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.din, "linear input size");
        (0..self.dout)
            .map(|o| {
                let row = &self.weight.value[o * self.din..(o + 1) * self.din];
                self.bias.value[o] + row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>()
            })
            .collect()
    }

    /// `x` is the forward input.
    pub fn backward(&mut self, x: &[T], dy: &[T], param_grads: bool) -> Vec<T> {
        if param_grads {
            for o in 0..self.dout {
                self.bias.grad[o] += dy[o];
                let row = &mut self.weight.grad[o * self.din..(o + 1) * self.din];
                for (g, &v) in row.iter_mut().zip(x) {
                    *g += dy[o] * v;
                }
            }
        }
        let mut dx = vec![T::ZERO; self.din];
        for o in 0..self.dout {
            let row = &self.weight.value[o * self.din..(o + 1) * self.din];
            for (d, &w) in dx.iter_mut().zip(row) {
                *d += dy[o] * w;
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// 2x2 average pooling.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    let q = T::from_f64(0.25);
    for c in 0..x.c {
        let src = x.channel(c);
        for y in 0..h2 {
            for xx in 0..w2 {
                let s = src[2 * y * x.w + 2 * xx]
                    + src[2 * y * x.w + 2 * xx + 1]
                    + src[(2 * y + 1) * x.w + 2 * xx]
                    + src[(2 * y + 1) * x.w + 2 * xx + 1];
                out.data[c * h2 * w2 + y * w2 + xx] = s * q;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.c, h, w);
    let q = T::from_f64(0.25);
    for c in 0..dy.c {
        for y in 0..h {
            for xx in 0..w {
                dx.data[c * h * w + y * w + xx] = dy.data[c * dy.h * dy.w + (y / 2) * dy.w + xx / 2] * q;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[c * h * w + y * w + xx] = x.data[c * x.h * x.w + (y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, h2, w2);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dx.data[c * h2 * w2 + (y / 2) * w2 + xx / 2] += dy.data[c * dy.h * dy.w + y * dy.w + xx];
            }
        }
    }
    dx
}

/// Sinusoidal timestep features `[cos(t f_i), sin(t f_i)]`.
pub fn timestep_features<T: Real>(t: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::ZERO; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = T::from_f64((t * freq).cos());
        out[half + i] = T::from_f64((t * freq).sin());
    }
    out
}
