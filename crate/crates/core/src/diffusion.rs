//! Noise schedules, the forward process, deterministic DDIM steps and the
//! noise-prediction loss. Network-agnostic and generic over the scalar type.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::real::Real;

pub const DEFAULT_T_TRAIN: usize = 1000;
pub const DEFAULT_BETA_1: f64 = 1e-4;
pub const DEFAULT_BETA_T: f64 = 0.02;
pub const DEFAULT_T_INF: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Serializable description from which a [`NoiseSchedule`] is rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub t_train: usize,
    pub kind: ScheduleKind,
    pub beta_1: f64,
    pub beta_t: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            t_train: DEFAULT_T_TRAIN,
            kind: ScheduleKind::Linear,
            beta_1: DEFAULT_BETA_1,
            beta_t: DEFAULT_BETA_T,
        }
    }
}

/// `betas[i]` is beta at timestep `i + 1`; `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub params: ScheduleParams,
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_train(&self) -> usize {
        self.params.t_train
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_train() {
            return Err(invalid_arg!("timestep {t} outside [1, {}]", self.t_train()));
        }
        Ok(())
    }
}

pub fn make_schedule(t_train: usize, kind: ScheduleKind, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(invalid_arg!("T_train must be positive"));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(invalid_arg!("need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_t}"));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_train)
            .map(|i| {
                if t_train == 1 {
                    beta_1
                } else {
                    beta_1 + (beta_t - beta_1) * i as f64 / (t_train - 1) as f64
                }
            })
            .collect(),
    };
    let mut alpha_bar = Vec::with_capacity(t_train + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        params: ScheduleParams {
            t_train,
            kind,
            beta_1,
            beta_t,
        },
        betas,
        alpha_bar,
    })
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_train, self.kind, self.beta_1, self.beta_t)
    }
}

fn same_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(invalid_arg!("shape mismatch: {} vs {} elements", a.len(), b.len()));
    }
    Ok(())
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample<T: Real>(x0: &[T], t: usize, eps: &[T], sched: &NoiseSchedule) -> Result<Vec<T>> {
    sched.check_t(t)?;
    same_len(x0, eps)?;
    let ab = sched.alpha_bar[t];
    let a = T::from_f64(ab.sqrt());
    let s = T::from_f64((1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect())
}

pub fn predict_x0<T: Real>(x_t: &[T], eps_hat: &[T], t: usize, sched: &NoiseSchedule, clamp: bool) -> Result<Vec<T>> {
    sched.check_t(t)?;
    same_len(x_t, eps_hat)?;
    let ab = sched.alpha_bar[t];
    let s = T::from_f64((1.0 - ab).sqrt());
    let inv = T::from_f64(1.0 / ab.sqrt());
    let one = T::ONE;
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| {
            let v = (x - s * e) * inv;
            if clamp {
                v.max(-one).min(one)
            } else {
                v
            }
        })
        .collect())
}

/// Deterministic (eta = 0) update from `t` to `t_prev`. At `t_prev = 0` the
/// result is the predicted `x0` itself.
pub fn ddim_step<T: Real>(
    x_t: &[T],
    eps_hat: &[T],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    clamp: bool,
) -> Result<Vec<T>> {
    if t_prev >= t {
        return Err(invalid_arg!("ddim step requires t_prev < t, got {t_prev} >= {t}"));
    }
    let x0 = predict_x0(x_t, eps_hat, t, sched, clamp)?;
    if t_prev == 0 {
        return Ok(x0);
    }
    let ab = sched.alpha_bar[t_prev];
    let a = T::from_f64(ab.sqrt());
    let s = T::from_f64((1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps_hat).map(|(&x, &e)| a * x + s * e).collect())
}

/// Strictly descending inference timesteps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan {
    pub steps: Vec<usize>,
}

impl TimestepPlan {
    /// `(t, t_prev)` pairs in sampling order; the last pairs with 0.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.steps.get(i + 1).copied().unwrap_or(0)))
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Evenly spaced plan: step `i` is `floor((i + 1) * T_train / T_inf)`, so the
/// top step is always `T_train` and consecutive steps differ by at least one.
pub fn make_timestep_plan(t_train: usize, t_inf: usize) -> Result<TimestepPlan> {
    if t_inf == 0 || t_inf > t_train {
        return Err(invalid_arg!("need 1 <= T_inf <= T_train, got T_inf={t_inf}, T_train={t_train}"));
    }
    let steps = (0..t_inf).rev().map(|i| (i + 1) * t_train / t_inf).collect();
    Ok(TimestepPlan { steps })
}

/// Mean squared error over all elements.
pub fn diffusion_loss<T: Real>(eps: &[T], eps_hat: &[T]) -> Result<f64> {
    same_len(eps, eps_hat)?;
    if eps.is_empty() {
        return Err(invalid_arg!("empty loss input"));
    }
    let s: f64 = eps
        .iter()
        .zip(eps_hat)
        .map(|(&a, &b)| {
            let d = a.to_f64() - b.to_f64();
            d * d
        })
        .sum();
    Ok(s / eps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        make_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn first_alpha_bar() {
        assert_eq!(sched().alpha_bar[1], 1.0 - 1e-4);
    }

    #[test]
    fn final_alpha_bar_is_tiny() {
        // independent product over the linear betas
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        let s = sched();
        assert!((s.alpha_bar[1000] - prod).abs() < 1e-15);
        assert!(s.alpha_bar[1000] < 5e-5);
    }

    #[test]
    fn invalid_range_rejected() {
        assert!(make_schedule(1000, ScheduleKind::Linear, 0.02, 1e-4).is_err());
        assert!(make_schedule(1000, ScheduleKind::Linear, 0.0, 0.02).is_err());
        assert!(make_schedule(1000, ScheduleKind::Linear, 1e-4, 1.0).is_err());
    }

    #[test]
    fn timestep_plans() {
        let p = make_timestep_plan(1000, 20).unwrap();
        assert_eq!(p.len(), 20);
        assert!(p.steps.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(p.steps[0], 1000);
        assert_eq!(p.steps[19], 50);
        let full = make_timestep_plan(1000, 1000).unwrap();
        assert_eq!(full.steps, (1..=1000).rev().collect::<Vec<_>>());
        let one = make_timestep_plan(1000, 1).unwrap();
        assert_eq!(one.pairs().collect::<Vec<_>>(), vec![(1000, 0)]);
        assert!(make_timestep_plan(10, 11).is_err());
        assert!(make_timestep_plan(10, 0).is_err());
    }

    #[test]
    fn loss_cases() {
        let e = vec![0.5f64, -0.25, 1.0];
        assert_eq!(diffusion_loss(&e, &e).unwrap(), 0.0);
        assert_eq!(diffusion_loss(&[0.0f64; 7], &[1.0; 7]).unwrap(), 1.0);
        assert!(diffusion_loss(&[0.0f64; 2], &[1.0; 3]).is_err());
    }

    #[test]
    fn ddim_to_zero_returns_x0_hat() {
        let s = sched();
        let x = vec![0.3f64, -0.7];
        let e = vec![0.1f64, 0.2];
        let x0 = predict_x0(&x, &e, 37, &s, false).unwrap();
        assert_eq!(ddim_step(&x, &e, 37, 0, &s, false).unwrap(), x0);
        assert!(ddim_step(&x, &e, 37, 37, &s, false).is_err());
    }

    #[test]
    fn q_sample_range_checked() {
        let s = sched();
        assert!(q_sample(&[0.0f64], 0, &[0.0], &s).is_err());
        assert!(q_sample(&[0.0f64], 1001, &[0.0], &s).is_err());
    }
}
