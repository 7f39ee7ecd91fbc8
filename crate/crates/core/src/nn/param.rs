use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::real::Real;

/// A learnable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            value: vec![T::ZERO; n],
            grad: vec![T::ZERO; n],
            shape: shape.to_vec(),
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = T::from_f64(rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named traversal over every parameter, in a fixed order.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g = T::ZERO));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    /// All parameter values concatenated in visiting order.
    fn flat_values(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, p| out.extend_from_slice(&p.value));
        out
    }

    fn flat_grads(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, p| out.extend_from_slice(&p.grad));
        out
    }

    /// Overwrites values from a flat vector in visiting order.
    fn load_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, p| {
            let n = p.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
