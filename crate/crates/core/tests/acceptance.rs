//! Acceptance suite. Each test checks one criterion and prints a PASS/FAIL
//! line; the desk test trains (or reuses, see `pipeline`) the full desk run.

mod common;

use std::collections::BTreeSet;

use common::{coverage_oracle, random_mesh, report, UNIT_CAMERA};
use facectl_core::checkpoint::{decode_checkpoint, encode_checkpoint, SaveInfo};
use facectl_core::diffusion::{ddim_step, predict_x0, q_sample, ScheduleParams};
use facectl_core::editor::{edit, mask_schedule, EditRequest, MaskStrategy};
use facectl_core::face::{rasterize, render_snapshots, sh_irradiance, FaceParams, ModelSpec, ParamPriors, ToyFaceModel};
use facectl_core::imageio::Image;
use facectl_core::nn::gradcheck::check_gradients;
use facectl_core::nn::{Adam, ModelBundle, NetConfig, Tensor};
use facectl_core::pipeline::{default_work_dir, measure_desk, run_desk_pipeline, DeskConfig, PipelineLog, SilentLog};
use facectl_core::train::{ema_update, masked_count, patch_mask, rsm_train_step, TrainConfig, TrainSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(name: &str, ok: bool, detail: &str) {
    report(&format!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" }));
}

#[test]
fn c1_rasterizer_matches_point_in_triangle_oracle() {
    let t0 = std::time::Instant::now();
    let mut mismatched = 0usize;
    let mut covered = 0usize;
    for seed in 0..50u64 {
        let mesh = random_mesh(seed, 32);
        for size in [32usize, 64] {
            let attrs = vec![0.0; mesh.vertices.len()];
            let out = rasterize(&mesh, &UNIT_CAMERA, &attrs, 1, size, size).unwrap();
            let oracle = coverage_oracle(&mesh, &UNIT_CAMERA, size, size);
            mismatched += out.coverage.iter().zip(&oracle).filter(|(a, b)| a != b).count();
            covered += oracle.iter().filter(|&&c| c).count();
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = mismatched == 0 && covered > 0 && secs < 60.0;
    verdict(
        "rasterizer oracle",
        ok,
        &format!("50 meshes x {{32,64}}: {mismatched} mismatched pixels ({covered} covered), {secs:.2}s"),
    );
    assert!(ok);
}

#[test]
fn c2_spherical_harmonics() {
    let model = ToyFaceModel::build(ModelSpec::default()).unwrap();
    let mut p = FaceParams::neutral(&model);
    p.theta_global = [0.3, -0.2, 0.1];
    p.light = [0.0; 9];
    p.light[0] = 2.0 * std::f64::consts::PI.sqrt();
    let snap = render_snapshots(&model, &p, 32, 32).unwrap();
    let mut worst_const = 0.0f64;
    for (pix, &c) in snap.coverage.iter().enumerate() {
        if c {
            for ch in 0..3 {
                worst_const = worst_const.max((snap.shading_map[3 * pix + ch] as f64 - p.alpha).abs());
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_anti = 0.0f64;
    for _ in 0..1000 {
        let mut l = [0.0; 9];
        for v in &mut l[1..4] {
            *v = rng.random_range(-2.0..2.0);
        }
        let n: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        let n = n.map(|v| v / len);
        let m = n.map(|v| -v);
        worst_anti = worst_anti.max((sh_irradiance(&l, n) + sh_irradiance(&l, m)).abs());
    }
    let covered = snap.coverage.iter().any(|&c| c);
    let ok = covered && worst_const <= 1e-5 && worst_anti <= 1e-6;
    verdict(
        "SH correctness",
        ok,
        &format!("constant light max |shading - alpha| = {worst_const:.2e}; degree-1 antisymmetry max = {worst_anti:.2e}"),
    );
    assert!(ok);
}

#[test]
fn c3_diffusion_analytic_suite() {
    let sched = ScheduleParams::default().build().unwrap();
    let t_train = sched.t_train();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 48;
        let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t = rng.random_range(1..=t_train);
        let t_prev = rng.random_range(0..t);
        let xt = q_sample(&x0, t, &eps, &sched).unwrap();
        let back = predict_x0(&xt, &eps, t, &sched, false).unwrap();
        let stepped = ddim_step(&xt, &eps, t, t_prev, &sched, false).unwrap();
        let analytic = if t_prev == 0 {
            x0.clone()
        } else {
            q_sample(&x0, t_prev, &eps, &sched).unwrap()
        };
        for i in 0..n {
            worst = worst.max((back[i] - x0[i]).abs()).max((stepped[i] - analytic[i]).abs());
        }
    }
    let ok = worst <= 1e-5;
    verdict(
        "diffusion analytic suite",
        ok,
        &format!("100 cases, max deviation {worst:.2e}"),
    );
    assert!(ok);
}

#[test]
fn c4_linear_mask_schedule_is_exact() {
    let mut bad = Vec::new();
    for t in 1..=20usize {
        let got = mask_schedule(&MaskStrategy::Linear, 20, t).unwrap();
        let want = 0.75 - 0.5 * (20 - t) as f64 / 20.0;
        if got != want {
            bad.push(t);
        }
    }
    verdict("linear mask schedule", bad.is_empty(), &format!("t = 1..20, inexact at {bad:?}"));
    assert!(bad.is_empty());
}

fn tiny_samples(cfg: &NetConfig, n: usize, seed: u64) -> Vec<TrainSample> {
    let s = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TrainSample {
            image: Tensor {
                c: 3,
                h: s,
                w: s,
                data: (0..3 * s * s).map(|_| rng.random_range(-1.0..1.0)).collect(),
            },
            snapshots: Tensor {
                c: 6,
                h: s,
                w: s,
                data: (0..6 * s * s).map(|_| rng.random_range(-1.0..1.0)).collect(),
            },
        })
        .collect()
}

#[test]
fn c5_freeze_mask_count_and_ema_invariants() {
    let cfg = NetConfig::tiny();
    let sched = ScheduleParams::default().build().unwrap();
    let mut bundle = ModelBundle::new(cfg.clone(), ScheduleParams::default(), 5).unwrap();
    bundle.attach_control(6);
    let samples = tiny_samples(&cfg, 4, 7);
    let tc = TrainConfig {
        batch_size: 2,
        patch_size: 4,
        ..TrainConfig::desk_control()
    };
    let before = bundle.backbone_checksum();
    let control_before = bundle.control_checksum();
    let mut opt = Adam::new(tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let steps = 1000;
    let mut drift = 0;
    for k in 0..steps {
        let batch = [&samples[k % 4], &samples[(k + 1) % 4]];
        rsm_train_step(&mut bundle, &batch, &sched, &tc, &mut rng, &mut opt).unwrap();
        if k % 100 == 99 && bundle.backbone_checksum() != before {
            drift += 1;
        }
    }
    let frozen = drift == 0 && bundle.backbone_checksum() == before && bundle.control_checksum() != control_before;
    verdict(
        "backbone freeze",
        frozen,
        &format!("{steps} RSM steps, backbone checksum stable at every 100th step, control updated"),
    );

    let img = Image::filled(32, 32, 0.5);
    let mut count_errors = 0;
    for _ in 0..1000 {
        let ratio: f64 = rng.random_range(0.0..=1.0);
        let (masked, spec) = patch_mask(&img, ratio, 8, &mut rng).unwrap();
        let want = (ratio * 16.0).floor() as usize;
        let distinct: BTreeSet<_> = spec.masked_patch_indices.iter().collect();
        let zeros = masked.data.iter().filter(|&&v| v == 0.0).count();
        if spec.masked_patch_indices.len() != want || distinct.len() != want || zeros != want * 3 * 64 || masked_count(ratio, 16) != want
        {
            count_errors += 1;
        }
    }
    let counts_ok = count_errors == 0;
    verdict("mask counts", counts_ok, &format!("1000 draws, {count_errors} off floor(rho*P)"));

    let cases: [(f32, f32, f64, f32); 5] = [
        (2.0, 4.0, 0.5, 3.0),
        (1.0, 9.0, 0.75, 3.0),
        (-8.0, 8.0, 0.25, 4.0),
        (5.0, 7.0, 1.0, 5.0),
        (5.0, 7.0, 0.0, 7.0),
    ];
    let mut ema_bad = 0;
    for (s, p, d, want) in cases {
        let mut shadow = [s];
        ema_update(&mut shadow, &[p], d).unwrap();
        if shadow[0] != want {
            ema_bad += 1;
        }
    }
    let ema_ok = ema_bad == 0;
    verdict("EMA arithmetic", ema_ok, &format!("{} exact cases, {ema_bad} wrong", cases.len()));
    assert!(frozen && counts_ok && ema_ok);
}

#[test]
fn c6_gradient_check() {
    let t0 = std::time::Instant::now();
    let r = check_gradients(&NetConfig::tiny(), 60, 11);
    let secs = t0.elapsed().as_secs_f64();
    let ok = r.entries.len() >= 50 && r.max_rel_err < 1e-3 && secs < 300.0;
    verdict(
        "gradient soundness",
        ok,
        &format!("{} parameters, max relative error {:.2e}, {secs:.1}s", r.entries.len(), r.max_rel_err),
    );
    assert!(ok);
}

struct Stderr;
impl PipelineLog for Stderr {
    fn line(&mut self, stage: &str, text: &str) {
        if !text.starts_with('{') {
            report(&format!("  [{stage}] {text}"));
        }
    }
}

#[test]
fn c7_desk_pipeline() {
    let t0 = std::time::Instant::now();
    let cfg = DeskConfig::default();
    assert!(cfg.dataset_size >= 500 && cfg.priors.identities >= 25);
    assert!(cfg.pretrain.iterations >= 10_000 && cfg.control.iterations >= 10_000);
    let dir = default_work_dir();
    report(&format!("  desk run directory {}", dir.display()));
    let art = run_desk_pipeline(&cfg, &dir, &mut Stderr).unwrap();
    let r = measure_desk(&cfg, &art, &mut Stderr).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    for s in &art.stages {
        report(&format!(
            "  stage {} key {} digest {} {}",
            s.name,
            s.key,
            &s.checkpoint_digest[..16],
            if s.reused { "(reused)" } else { "(trained)" }
        ));
    }

    let a = r.identity_psnr_median >= 15.0;
    verdict(
        "desk (a) identity-edit PSNR",
        a,
        &format!("median {:.2} dB over {} samples (floor 15)", r.identity_psnr_median, r.identity_psnr.len()),
    );
    let b = r.pose_err_rsm < r.pose_err_no_rsm;
    verdict(
        "desk (b) RSM pose control",
        b,
        &format!("pose error {:.2} deg with RSM vs {:.2} deg without", r.pose_err_rsm, r.pose_err_no_rsm),
    );
    let c = r.id_score_finetune_on >= r.id_score_finetune_off;
    verdict(
        "desk (c) one-shot fine-tune identity",
        c,
        &format!("id score {:.4} on vs {:.4} off", r.id_score_finetune_on, r.id_score_finetune_off),
    );
    let table: Vec<String> = r.strategy_pose_err.iter().map(|(l, e)| format!("{l}={e:.2}")).collect();
    let d = r.worst_strategy() == Some("A");
    verdict(
        "desk (d) constant(0) worst strategy",
        d,
        &format!("pose error deg {}", table.join(" ")),
    );
    report(&format!(
        "  identity proxy: same {:.4} vs different {:.4} over {} triples; total {secs:.0}s",
        r.proxy.same_identity, r.proxy.different_identity, r.proxy.triples
    ));
    assert!(a && b && c && d);
}

#[test]
fn c8_determinism_and_checkpoint_round_trip() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let small = |iters| TrainConfig {
        iterations: iters,
        batch_size: 2,
        log_every: 0,
        patch_size: 4,
        ..TrainConfig::desk_control()
    };
    let cfg = DeskConfig {
        dataset_size: 24,
        image_size: 8,
        priors: ParamPriors {
            identities: 3,
            test_every: 4,
            ..ParamPriors::default()
        },
        net: NetConfig::tiny(),
        pretrain: TrainConfig {
            mask_ratio_low: 0.0,
            mask_ratio_high: 0.0,
            ..small(20)
        },
        control: small(20),
        finetune: TrainConfig {
            iterations: 5,
            ..TrainConfig::desk_finetune()
        },
        ..DeskConfig::default()
    };
    let runs: Vec<_> = dirs
        .iter()
        .map(|d| run_desk_pipeline(&cfg, d.path(), &mut SilentLog).unwrap())
        .collect();
    let digests = |i: usize| runs[i].stages.iter().map(|s| s.checkpoint_digest.clone()).collect::<Vec<_>>();
    let training_ok = digests(0) == digests(1) && runs[0].stages.iter().all(|s| !s.reused);

    let art = &runs[0];
    let i = art.finetune_index;
    let mut req = EditRequest::new(art.dataset.manifest.records[i].params.clone());
    req.overrides.theta_global = Some([0.3, 0.0, 0.0]);
    req.noise_seed = 9;
    let e1 = edit(&art.finetuned, &art.model, &art.dataset.images[i], &req).unwrap();
    let e2 = edit(&runs[1].finetuned, &runs[1].model, &runs[1].dataset.images[i], &req).unwrap();
    let editing_ok = e1 == e2;

    let mut round_trip_ok = true;
    for b in [&art.pretrained, &art.rsm, &art.finetuned] {
        let (bytes, manifest) = encode_checkpoint(b, &SaveInfo::default()).unwrap();
        let (back, m2) = decode_checkpoint(&bytes).unwrap();
        let again = encode_checkpoint(&back, &SaveInfo::default()).unwrap().0;
        round_trip_ok &= back == *b && m2 == manifest && again == bytes;
    }
    let ok = training_ok && editing_ok && round_trip_ok;
    verdict(
        "determinism",
        ok,
        &format!(
            "stage digests equal across runs: {training_ok}; edits identical: {editing_ok}; checkpoint round-trip bitwise: {round_trip_ok}"
        ),
    );
    assert!(ok);
}
