use crate::error::{invalid_arg, Result};
use crate::real::Real;

/// One sample, channel-major (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::ZERO; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(invalid_arg!("tensor {c}x{h}x{w} needs {} values, got {}", c * h * w, data.len()));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let hw = self.hw();
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Stacks `a` then `b` along channels.
    pub fn concat(a: &Self, b: &Self) -> Self {
        debug_assert!(a.h == b.h && a.w == b.w);
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Self {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: first `c_first` channels, then the rest.
    pub fn split(self, c_first: usize) -> (Self, Self) {
        let hw = self.hw();
        let mut data = self.data;
        let rest = data.split_off(c_first * hw);
        (
            Self {
                c: c_first,
                h: self.h,
                w: self.w,
                data,
            },
            Self {
                c: self.c - c_first,
                h: self.h,
                w: self.w,
                data: rest,
            },
        )
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == T::ZERO)
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| v.to_f64() as f32).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl From<&crate::imageio::Image> for Tensor<f32> {
    fn from(img: &crate::imageio::Image) -> Self {
        Self {
            c: 3,
            h: img.height,
            w: img.width,
            data: img.data.clone(),
        }
    }
}

impl Tensor<f32> {
    /// Three-channel tensors only; values are copied unchanged.
    pub fn to_image(&self) -> crate::imageio::Image {
        assert_eq!(self.c, 3, "image tensors have three channels");
        crate::imageio::Image {
            height: self.h,
            width: self.w,
            data: self.data.clone(),
        }
    }
}
