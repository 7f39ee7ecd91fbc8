mod common;

use common::{coverage_oracle, random_mesh, UNIT_CAMERA};
use facectl_core::checkpoint::{decode_checkpoint, encode_checkpoint, SaveInfo};
use facectl_core::diffusion::{ddim_step, make_schedule, make_timestep_plan, predict_x0, q_sample, ScheduleKind, ScheduleParams};
use facectl_core::editor::{mask_schedule, MaskStrategy};
use facectl_core::face::{rasterize, sh_irradiance, FaceParams, ModelSpec, ToyFaceModel};
use facectl_core::nn::{ModelBundle, NetConfig};
use facectl_core::train::{ema_update, masked_count, patch_mask_planar, MASK_FILL};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule_strategy() -> impl Strategy<Value = (usize, f64, f64)> {
    (10usize..1500, 1e-5f64..1e-3, 1e-3f64..0.05)
}

fn mask_strategy() -> impl Strategy<Value = MaskStrategy> {
    prop_oneof![
        (0.0f64..=1.0).prop_map(|rho| MaskStrategy::Constant { rho }),
        (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b)| MaskStrategy::TwoPhase {
            rho_early: a,
            rho_late: b
        }),
        Just(MaskStrategy::Linear),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_decreases_strictly_inside_unit_interval((t, b1, bt) in schedule_strategy()) {
        let s = make_schedule(t, ScheduleKind::Linear, b1, bt).unwrap();
        prop_assert_eq!(s.alpha_bar.len(), t + 1);
        prop_assert_eq!(s.alpha_bar[0], 1.0);
        for w in s.alpha_bar.windows(2) {
            prop_assert!(w[1] < w[0] && w[1] > 0.0);
        }
    }

    #[test]
    fn x0_is_recovered_from_the_true_noise(
        (t_train, b1, bt) in schedule_strategy(),
        frac in 0.0f64..1.0,
        x0 in prop::collection::vec(-1.0f64..1.0, 1..48),
        seed in any::<u64>(),
    ) {
        let s = make_schedule(t_train, ScheduleKind::Linear, b1, bt).unwrap();
        let t = 1 + ((t_train - 1) as f64 * frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f64> = x0.iter().map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let back = predict_x0(&xt, &eps, t, &s, false).unwrap();
        let scale = 1.0 / s.alpha_bar[t].sqrt();
        for (a, b) in x0.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12 * scale.max(1.0) * 8.0, "{a} vs {b}");
        }
    }

    /// A deterministic step with the true noise moves along the forward
    /// process: the result equals `q_sample(x0, t_prev, eps)`.
    #[test]
    fn ddim_with_true_noise_stays_on_the_forward_trajectory(
        t in 2usize..1000,
        gap in 1usize..200,
        x0 in prop::collection::vec(-1.0f64..1.0, 1..32),
        seed in any::<u64>(),
    ) {
        let s = ScheduleParams::default().build().unwrap();
        let t_prev = t.saturating_sub(gap);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f64> = x0.iter().map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let stepped = ddim_step(&xt, &eps, t, t_prev, &s, false).unwrap();
        let expected: Vec<f64> = if t_prev == 0 {
            x0.clone()
        } else {
            q_sample(&x0, t_prev, &eps, &s).unwrap()
        };
        for (a, b) in stepped.iter().zip(&expected) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn timestep_plans_descend_from_the_top_step(t_train in 1usize..2000, k in 1usize..2000) {
        let t_inf = 1 + k % t_train;
        let plan = make_timestep_plan(t_train, t_inf).unwrap();
        prop_assert_eq!(plan.len(), t_inf);
        let pairs: Vec<_> = plan.pairs().collect();
        prop_assert_eq!(pairs[0].0, t_train);
        prop_assert_eq!(pairs.last().unwrap().1, 0);
        for (t, t_prev) in pairs {
            prop_assert!(t > t_prev);
        }
    }

    #[test]
    fn patch_masks_hide_exactly_the_requested_count(
        side in 1usize..6,
        patch in 1usize..5,
        channels in 1usize..4,
        ratio in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let (h, w) = (side * patch, (side + 1) * patch);
        let data: Vec<f32> = (0..channels * h * w).map(|i| 1.0 + i as f32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, spec) = patch_mask_planar(&data, channels, h, w, ratio, patch, &mut rng).unwrap();
        let total = side * (side + 1);
        prop_assert_eq!(spec.masked_patch_indices.len(), masked_count(ratio, total));
        let filled = out.iter().filter(|v| **v == MASK_FILL).count();
        prop_assert_eq!(filled, spec.masked_patch_indices.len() * patch * patch * channels);
        let mut sorted = spec.masked_patch_indices.clone();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), spec.masked_patch_indices.len());
    }

    #[test]
    fn mask_schedules_stay_in_range(strategy in mask_strategy(), t_total in 1usize..200, k in 0usize..200) {
        let t = 1 + k % t_total;
        let rho = mask_schedule(&strategy, t_total, t).unwrap();
        prop_assert!((0.0..=1.0).contains(&rho));
        if strategy == MaskStrategy::Linear && t > 1 {
            prop_assert!(rho >= mask_schedule(&strategy, t_total, t - 1).unwrap());
        }
        prop_assert!(mask_schedule(&strategy, t_total, 0).is_err());
        prop_assert!(mask_schedule(&strategy, t_total, t_total + 1).is_err());
    }

    #[test]
    fn ema_stays_between_shadow_and_parameters(
        pairs in prop::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 1..32),
        decay in 0.0f64..=1.0,
    ) {
        let (mut shadow, params): (Vec<f32>, Vec<f32>) = pairs.iter().copied().unzip();
        ema_update(&mut shadow, &params, decay).unwrap();
        for ((s, (a, b)), _) in shadow.iter().zip(&pairs).zip(&params) {
            let (lo, hi) = if a < b { (*a, *b) } else { (*b, *a) };
            prop_assert!(*s >= lo - 1e-5 && *s <= hi + 1e-5);
        }
    }

    #[test]
    fn irradiance_is_linear_in_the_light(
        l1 in prop::array::uniform9(-1.0f64..1.0),
        l2 in prop::array::uniform9(-1.0f64..1.0),
        a in -2.0f64..2.0,
        (u, v) in (-1.0f64..1.0, 0.0f64..std::f64::consts::TAU),
    ) {
        let r = (1.0 - u * u).sqrt();
        let n = [r * v.cos(), r * v.sin(), u];
        let mix: [f64; 9] = std::array::from_fn(|i| l1[i] + a * l2[i]);
        let lhs = sh_irradiance(&mix, n);
        let rhs = sh_irradiance(&l1, n) + a * sh_irradiance(&l2, n);
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rasterizer_agrees_with_the_exact_oracle(seed in any::<u64>(), size in prop::sample::select(vec![8usize, 16, 32])) {
        let mesh = random_mesh(seed, size);
        let attrs = vec![0.0; mesh.vertices.len()];
        let out = rasterize(&mesh, &UNIT_CAMERA, &attrs, 1, size, size).unwrap();
        prop_assert_eq!(out.coverage, coverage_oracle(&mesh, &UNIT_CAMERA, size, size));
    }

    #[test]
    fn checkpoints_round_trip_bitwise(seed in any::<u64>(), control in any::<bool>()) {
        let mut b = ModelBundle::new(NetConfig::tiny(), ScheduleParams::default(), seed).unwrap();
        if control {
            b.attach_control(seed ^ 1);
        }
        let (bytes, manifest) = encode_checkpoint(&b, &SaveInfo::default()).unwrap();
        let (back, m2) = decode_checkpoint(&bytes).unwrap();
        prop_assert!(back == b);
        prop_assert_eq!(m2, manifest);
        prop_assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn face_params_survive_json(seed in any::<u64>()) {
        let model = ToyFaceModel::build(ModelSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let priors = facectl_core::face::ParamPriors::default();
        let p = facectl_core::face::dataset::sample_params(&model, &priors, vec![0.1; model.spec.k_beta], &mut rng);
        let back: FaceParams = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        prop_assert_eq!(back, p);
    }
}
