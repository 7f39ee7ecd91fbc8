//! Tiny configurations shared by the CLI and service tests.
#![allow(dead_code)]

use facectl_cli::Config;
use facectl_core::face::ParamPriors;
use facectl_core::nn::NetConfig;
use facectl_core::train::TrainConfig;

/// 8x8 images, a four-channel network and a few dozen iterations per stage.
pub fn tiny_config() -> Config {
    let small = |iters| TrainConfig {
        iterations: iters,
        batch_size: 2,
        log_every: 5,
        patch_size: 4,
        ..TrainConfig::desk_control()
    };
    let mut c = Config::default();
    c.data.size = 24;
    c.data.image_size = 8;
    c.data.priors = ParamPriors {
        identities: 3,
        test_every: 4,
        ..ParamPriors::default()
    };
    c.net = NetConfig::tiny();
    c.pretrain = TrainConfig {
        mask_ratio_low: 0.0,
        mask_ratio_high: 0.0,
        ..small(20)
    };
    c.control = small(20);
    c.finetune = TrainConfig {
        iterations: 5,
        ..TrainConfig::desk_finetune()
    };
    c.edit.t_inf = 5;
    c.edit.inpaint_fit_budget = 50;
    c.eval.t_inf = 5;
    c.eval.fit.budget = 50;
    c.serve.fit_budget = 50;
    c.desk.pose_samples = 2;
    c.desk.identity_samples = 2;
    c.desk.proxy_triples = 2;
    c
}
