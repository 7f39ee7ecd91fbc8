//! End-to-end desk run: dataset, backbone pretraining, control training with
//! and without semantic masking, one-shot fine-tuning and the directional
//! comparisons between them.
//!
//! Every stage is stored under the work directory as
//! `<stage>-<key>.ckpt`, where the key hashes the stage configuration and its
//! inputs. A stage whose file already exists is loaded instead of retrained.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, SaveInfo};
use crate::diffusion::ScheduleParams;
use crate::editor::{ablation_strategies, edit, EditRequest};
use crate::error::{invalid_arg, Error, Result};
use crate::eval::{identity_proxy_check, run_eval_suite, EvalOptions, EvalProtocol, FitOptions, ProxyCheck};
use crate::face::dataset::MANIFEST_FILE;
use crate::face::{generate_dataset, load_dataset, Dataset, ModelSpec, ParamPriors, ToyFaceModel};
use crate::imageio::psnr;
use crate::nn::{ModelBundle, NetConfig};
use crate::train::{
    finetune_one_shot, prepare_samples, pretrain_diffae, train_expfacenet, TrainConfig, TrainLogLine, TrainObserver,
    TrainOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskConfig {
    pub seed: u64,
    pub dataset_size: usize,
    pub image_size: usize,
    pub model: ModelSpec,
    pub priors: ParamPriors,
    pub net: NetConfig,
    pub schedule: ScheduleParams,
    pub pretrain: TrainConfig,
    /// The no-masking arm reuses this with a zero mask ratio.
    pub control: TrainConfig,
    pub finetune: TrainConfig,
    /// Position in the test split of the fine-tuned sample.
    pub finetune_sample: usize,
    pub finetune_edits: usize,
    pub identity_samples: usize,
    pub pose_samples: usize,
    pub proxy_triples: usize,
    pub eval: EvalOptions,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dataset_size: 500,
            image_size: 32,
            model: ModelSpec::default(),
            priors: ParamPriors::default(),
            net: NetConfig::desk(),
            schedule: ScheduleParams::default(),
            pretrain: TrainConfig {
                log_every: 500,
                ..TrainConfig::desk_pretrain()
            },
            control: TrainConfig {
                log_every: 500,
                ..TrainConfig::desk_control()
            },
            finetune: TrainConfig {
                log_every: 500,
                ..TrainConfig::desk_finetune()
            },
            finetune_sample: 0,
            finetune_edits: 8,
            identity_samples: 16,
            pose_samples: 20,
            proxy_triples: 20,
            eval: EvalOptions {
                fit: FitOptions::default(),
                ..EvalOptions::default()
            },
        }
    }
}

impl DeskConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.net.image_size != self.image_size {
            return Err(invalid_arg!(
                "net.image_size {} differs from image_size {}",
                self.net.image_size,
                self.image_size
            ));
        }
        for c in [&self.pretrain, &self.control, &self.finetune] {
            c.validate()?;
        }
        Ok(())
    }

    pub fn no_rsm_control(&self) -> TrainConfig {
        TrainConfig {
            mask_ratio_low: 0.0,
            mask_ratio_high: 0.0,
            ..self.control.clone()
        }
    }
}

/// Progress sink; receives one line per event.
pub trait PipelineLog {
    fn line(&mut self, stage: &str, text: &str);
}

pub struct SilentLog;
impl PipelineLog for SilentLog {
    fn line(&mut self, _stage: &str, _text: &str) {}
}

struct StageObserver<'a> {
    stage: &'a str,
    log: &'a mut dyn PipelineLog,
}

impl TrainObserver for StageObserver<'_> {
    fn on_log(&mut self, line: &TrainLogLine) {
        self.log.line(self.stage, &line.to_json_line());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub checkpoint_digest: String,
    pub reused: bool,
    pub seconds: f64,
}

pub struct DeskArtifacts {
    pub model: ToyFaceModel,
    pub dataset: Dataset,
    /// Backbone after pretraining (EMA weights).
    pub pretrained: ModelBundle,
    pub rsm: ModelBundle,
    pub no_rsm: ModelBundle,
    pub finetuned: ModelBundle,
    /// Dataset index of the fine-tuned sample.
    pub finetune_index: usize,
    pub stages: Vec<StageRecord>,
}

fn key_of<T: Serialize>(parts: &T) -> String {
    let bytes = serde_json::to_vec(parts).expect("stage key serializes");
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Loads `<dir>/<name>-<key>.ckpt` or trains and stores it.
fn stage(
    dir: &Path,
    name: &str,
    key: String,
    stages: &mut Vec<StageRecord>,
    log: &mut dyn PipelineLog,
    train: impl FnOnce(&mut dyn PipelineLog) -> Result<TrainOutcome>,
) -> Result<ModelBundle> {
    let path = dir.join(format!("{name}-{key}.ckpt"));
    let t0 = Instant::now();
    let (bundle, digest, reused) = if path.exists() {
        let (b, m) = load_checkpoint(&path)?;
        log.line(name, &format!("reusing {}", path.display()));
        (b, m.blob_sha256, true)
    } else {
        let out = train(log)?;
        let iteration = out.losses.len();
        let b = out.ema.unwrap_or(out.bundle);
        let m = save_checkpoint(
            &b,
            &path,
            &SaveInfo {
                iteration,
                ..SaveInfo::default()
            },
        )?;
        log.line(name, &format!("saved {}", path.display()));
        (b, m.blob_sha256, false)
    };
    stages.push(StageRecord {
        name: name.to_string(),
        key,
        checkpoint_digest: digest,
        reused,
        seconds: t0.elapsed().as_secs_f64(),
    });
    Ok(bundle)
}

pub fn default_work_dir() -> PathBuf {
    std::env::var_os("FACECTL_DESK_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../target/desk-run")))
}

/// Runs (or resumes) every training stage of the desk experiment.
pub fn run_desk_pipeline(cfg: &DeskConfig, dir: &Path, log: &mut dyn PipelineLog) -> Result<DeskArtifacts> {
    cfg.validate()?;
    let model = ToyFaceModel::build(cfg.model.clone())?;
    let data_key = key_of(&(&cfg.model, &cfg.priors, cfg.dataset_size, cfg.image_size, cfg.seed));
    let data_dir = dir.join(format!("data-{data_key}"));
    let dataset = if data_dir.join(MANIFEST_FILE).exists() {
        load_dataset(&data_dir)?
    } else {
        log.line("data", &format!("generating {} images", cfg.dataset_size));
        generate_dataset(
            &model,
            cfg.dataset_size,
            &cfg.priors,
            &data_dir,
            cfg.seed,
            (cfg.image_size, cfg.image_size),
        )?
    };
    let train_idx = dataset.indices_with_split("train");
    let test_idx = dataset.indices_with_split("test");
    let finetune_index = *test_idx
        .get(cfg.finetune_sample)
        .ok_or_else(|| invalid_arg!("finetune_sample {} outside the test split", cfg.finetune_sample))?;
    let samples = prepare_samples(&dataset, &model, &train_idx)?;
    let sched = cfg.schedule.build()?;
    let mut stages = Vec::new();

    let pre_key = key_of(&("pretrain", &data_key, &cfg.net, &cfg.schedule, &cfg.pretrain, cfg.seed));
    let pretrained = stage(dir, "pretrain", pre_key.clone(), &mut stages, log, |log| {
        let b = ModelBundle::new(cfg.net.clone(), cfg.schedule, cfg.seed)?;
        pretrain_diffae(
            &samples,
            b,
            &cfg.pretrain,
            &sched,
            &mut StageObserver { stage: "pretrain", log },
        )
    })?;

    let control_arm = |name: &str, tc: TrainConfig, stages: &mut Vec<StageRecord>, log: &mut dyn PipelineLog| {
        let key = key_of(&(name, &pre_key, &tc, cfg.seed));
        stage(dir, name, key, stages, log, |log| {
            let mut b = pretrained.clone();
            b.attach_control(cfg.seed.wrapping_add(1));
            train_expfacenet(&samples, b, &tc, &sched, &mut StageObserver { stage: name, log })
        })
    };
    let rsm = control_arm("control-rsm", cfg.control.clone(), &mut stages, log)?;
    let no_rsm = control_arm("control-no-rsm", cfg.no_rsm_control(), &mut stages, log)?;

    let ft_key = key_of(&("finetune", rsm.checksum(), &cfg.finetune, finetune_index));
    let one = prepare_samples(&dataset, &model, &[finetune_index])?;
    let finetuned = stage(dir, "finetune", ft_key, &mut stages, log, |log| {
        finetune_one_shot(
            &one[0],
            &rsm,
            &cfg.finetune,
            &sched,
            &mut StageObserver { stage: "finetune", log },
        )
    })?;

    Ok(DeskArtifacts {
        model,
        dataset,
        pretrained,
        rsm,
        no_rsm,
        finetuned,
        finetune_index,
        stages,
    })
}

/// Measurements behind the desk directional claims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskResults {
    pub identity_psnr: Vec<f64>,
    pub identity_psnr_median: f64,
    pub pose_err_rsm: f64,
    pub pose_err_no_rsm: f64,
    pub id_score_finetune_on: f64,
    pub id_score_finetune_off: f64,
    /// Mean pose error per strategy label, in A..F order.
    pub strategy_pose_err: Vec<(String, f64)>,
    pub proxy: ProxyCheck,
}

impl DeskResults {
    pub fn worst_strategy(&self) -> Option<&str> {
        self.strategy_pose_err
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(l, _)| l.as_str())
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    match s.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => s[n / 2],
        n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

/// Evaluates the trained arms on the test split.
pub fn measure_desk(cfg: &DeskConfig, art: &DeskArtifacts, log: &mut dyn PipelineLog) -> Result<DeskResults> {
    let test_idx = art.dataset.indices_with_split("test");
    if test_idx.len() < cfg.identity_samples.max(cfg.pose_samples) {
        return Err(Error::InvalidState(format!(
            "test split has {} images, fewer than requested",
            test_idx.len()
        )));
    }
    let reference = &art.pretrained.encoder;

    let mut identity_psnr = Vec::with_capacity(cfg.identity_samples);
    for (k, &i) in test_idx.iter().take(cfg.identity_samples).enumerate() {
        let mut req = EditRequest::new(art.dataset.manifest.records[i].params.clone());
        req.strategy = cfg.eval.strategy;
        req.t_inf = cfg.eval.t_inf;
        req.noise_seed = cfg.eval.noise_seed.wrapping_add(k as u64);
        let (out, _) = edit(&art.rsm, &art.model, &art.dataset.images[i], &req)?;
        identity_psnr.push(psnr(&art.dataset.images[i], &out));
    }
    let identity_psnr_median = median(&identity_psnr);
    log.line("measure", &format!("identity psnr median {identity_psnr_median:.2} dB"));

    let pose_idx = &test_idx[..cfg.pose_samples];
    let pose = |b: &ModelBundle, opts: &EvalOptions| {
        run_eval_suite(b, reference, &art.model, &art.dataset, pose_idx, EvalProtocol::Pose, opts)
    };
    let pose_err_rsm = pose(&art.rsm, &cfg.eval)?.pose_err_deg;
    let pose_err_no_rsm = pose(&art.no_rsm, &cfg.eval)?.pose_err_deg;
    log.line(
        "measure",
        &format!("pose error rsm {pose_err_rsm:.2} deg, no-rsm {pose_err_no_rsm:.2} deg"),
    );

    let ft_opts = EvalOptions {
        edits_per_sample: cfg.finetune_edits,
        ..cfg.eval.clone()
    };
    let ft = |b: &ModelBundle| {
        run_eval_suite(
            b,
            reference,
            &art.model,
            &art.dataset,
            &[art.finetune_index],
            EvalProtocol::Pose,
            &ft_opts,
        )
    };
    let id_score_finetune_on = ft(&art.finetuned)?.id_score;
    let id_score_finetune_off = ft(&art.rsm)?.id_score;
    log.line(
        "measure",
        &format!("id score fine-tune on {id_score_finetune_on:.4}, off {id_score_finetune_off:.4}"),
    );

    let mut strategy_pose_err = Vec::new();
    for (label, s) in ablation_strategies() {
        let opts = EvalOptions {
            strategy: s,
            ..cfg.eval.clone()
        };
        let e = pose(&art.rsm, &opts)?.pose_err_deg;
        log.line("measure", &format!("strategy {label} pose error {e:.2} deg"));
        strategy_pose_err.push((label.to_string(), e));
    }
    let proxy = identity_proxy_check(reference, &art.model, &art.dataset, cfg.proxy_triples)?;
    Ok(DeskResults {
        identity_psnr,
        identity_psnr_median,
        pose_err_rsm,
        pose_err_no_rsm,
        id_score_finetune_on,
        id_score_finetune_off,
        strategy_pose_err,
        proxy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn default_config_meets_desk_minimums() {
        let c = DeskConfig::default();
        c.validate().unwrap();
        assert!(c.dataset_size >= 500 && c.priors.identities >= 25);
        assert!(c.pretrain.iterations >= 10_000 && c.control.iterations >= 10_000);
        assert_eq!((c.finetune.iterations, c.finetune.lr, c.finetune.batch_size), (1500, 1e-5, 4));
        assert_eq!(c.no_rsm_control().mask_ratio_high, 0.0);
    }

    #[test]
    fn tiny_pipeline_runs_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let small = |iters| TrainConfig {
            iterations: iters,
            batch_size: 2,
            log_every: 0,
            patch_size: 4,
            ..TrainConfig::desk_control()
        };
        let cfg = DeskConfig {
            dataset_size: 20,
            image_size: 8,
            priors: ParamPriors {
                identities: 2,
                ..ParamPriors::default()
            },
            net: NetConfig::tiny(),
            pretrain: TrainConfig {
                mask_ratio_high: 0.0,
                mask_ratio_low: 0.0,
                ..small(3)
            },
            control: small(3),
            finetune: TrainConfig {
                iterations: 2,
                ..TrainConfig::desk_finetune()
            },
            ..DeskConfig::default()
        };
        let a = run_desk_pipeline(&cfg, dir.path(), &mut SilentLog).unwrap();
        assert!(a.stages.iter().all(|s| !s.reused));
        let b = run_desk_pipeline(&cfg, dir.path(), &mut SilentLog).unwrap();
        assert!(b.stages.iter().all(|s| s.reused));
        for (x, y) in a.stages.iter().zip(&b.stages) {
            assert_eq!(x.checkpoint_digest, y.checkpoint_digest);
        }
        assert_eq!(a.finetuned.checksum(), b.finetuned.checksum());
        assert_ne!(a.rsm.control_checksum(), a.no_rsm.control_checksum());
    }
}
