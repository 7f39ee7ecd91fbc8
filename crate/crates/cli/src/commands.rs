//! Subcommands of the `facectl` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use facectl_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, SaveInfo};
use facectl_core::editor::{center_region, edit, inpaint, EditRequest, InpaintOptions, MaskStrategy};
use facectl_core::eval::{run_ablations, run_eval_suite, AblationInputs, EvalProtocol};
use facectl_core::face::{fit_params, generate_dataset, load_dataset, Dataset, FaceParams, ToyFaceModel};
use facectl_core::imageio::Image;
use facectl_core::nn::ModelBundle;
use facectl_core::pipeline::{measure_desk, run_desk_pipeline, PipelineLog};
use facectl_core::train::{
    finetune_one_shot, prepare_samples, pretrain_diffae, train_expfacenet, TrainConfig, TrainLogLine, TrainObserver,
    TrainOutcome,
};
use serde_json::json;

use crate::config::Config;
use crate::parse_strategy;
use crate::server::{serve, AppState};
use crate::session::load_session;

#[derive(Debug, Parser)]
#[command(name = "facectl", version, about = "Explicit-control face editing at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// TOML configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the top-level `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `runs/<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData {
        /// Number of images; overrides `data.size`.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the semantic encoder and denoiser.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Train the control network against a frozen pretrained backbone.
    TrainControl {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        /// Train without semantic masking.
        #[arg(long)]
        no_rsm: bool,
    },
    /// Adapt the backbone to a single image.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Edit pose, expression or light of one image.
    Edit {
        /// Control-trained or fine-tuned checkpoint; a session's own
        /// fine-tuned weights are used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        edit: EditArgs,
    },
    /// Fill a rectangular region of one image.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        /// `x,y,w,h` in pixels.
        #[arg(long, value_delimiter = ',', conflicts_with = "center")]
        region: Option<Vec<usize>>,
        /// Centered square covering this fraction of the image.
        #[arg(long)]
        center: Option<f64>,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<MaskStrategy>,
        #[arg(long)]
        t_inf: Option<usize>,
        #[arg(long)]
        noise_seed: Option<u64>,
    },
    /// Run one evaluation protocol over the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// identity, pose, expression or light.
        #[arg(long, default_value = "pose")]
        protocol: String,
        /// Checkpoint whose encoder scores identity; defaults to `--checkpoint`.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Test samples to use; defaults to `desk.pose_samples`.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Compare masking, strategy, fine-tuning and detail arms.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rsm: Option<PathBuf>,
        #[arg(long)]
        no_rsm: Option<PathBuf>,
        #[arg(long)]
        finetuned: Option<PathBuf>,
        /// Test-split position the fine-tuned checkpoint was tuned on.
        #[arg(long)]
        finetune_sample: Option<usize>,
        /// Checkpoint whose encoder scores identity; defaults to `--rsm`.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Start the HTTP editing service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long)]
        addr: Option<String>,
    },
    /// Run every desk stage (cached under `--out`) and the directional checks.
    Desk,
}

/// Where the source image comes from: a dataset sample, a PNG with optional
/// parameters (fitted when absent), or a persisted service session.
#[derive(Debug, Clone, Args)]
pub struct SourceArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset index.
    #[arg(long, requires = "data")]
    pub sample: Option<usize>,
    #[arg(long, conflicts_with_all = ["sample", "session"])]
    pub image: Option<PathBuf>,
    /// JSON file with the image's parameters.
    #[arg(long, requires = "image")]
    pub params: Option<PathBuf>,
    #[arg(long, conflicts_with = "sample")]
    pub session: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EditArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub yaw: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub pitch: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub roll: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub jaw: Option<f64>,
    /// Comma-separated expression coefficients.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub psi: Option<Vec<f64>>,
    /// Nine comma-separated lighting coefficients.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub light: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<MaskStrategy>,
    #[arg(long)]
    pub t_inf: Option<usize>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::TrainControl { .. } => "train-control",
            Command::Finetune { .. } => "finetune",
            Command::Edit { .. } => "edit",
            Command::Inpaint { .. } => "inpaint",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Serve { .. } => "serve",
            Command::Desk => "desk",
        }
    }
}

/// Runs one parsed command and returns the JSON summary printed on stdout.
pub fn run(cli: Cli) -> Result<serde_json::Value> {
    let mut config = match &cli.global.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.global.seed {
        config.seed = s;
    }
    let out = cli
        .global
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    config
        .write_snapshot(&out)
        .with_context(|| format!("writing config snapshot to {}", out.display()))?;
    let ctx = Ctx { config, out };
    match cli.command {
        Command::GenData { size } => ctx.gen_data(size),
        Command::Pretrain { data, iters } => ctx.pretrain(&data, iters),
        Command::TrainControl {
            data,
            checkpoint,
            iters,
            no_rsm,
        } => ctx.train_control(&data, &checkpoint, iters, no_rsm),
        Command::Finetune {
            checkpoint,
            source,
            iters,
        } => ctx.finetune(&checkpoint, &source, iters),
        Command::Edit {
            checkpoint,
            source,
            edit,
        } => ctx.edit(checkpoint.as_deref(), &source, &edit),
        Command::Inpaint {
            checkpoint,
            source,
            region,
            center,
            strategy,
            t_inf,
            noise_seed,
        } => ctx.inpaint(&checkpoint, &source, region, center, strategy, t_inf, noise_seed),
        Command::Eval {
            checkpoint,
            data,
            protocol,
            reference,
            samples,
        } => ctx.eval(&checkpoint, &data, &protocol, reference.as_deref(), samples),
        Command::Ablate {
            data,
            rsm,
            no_rsm,
            finetuned,
            finetune_sample,
            reference,
            samples,
        } => ctx.ablate(
            &data,
            rsm.as_deref(),
            no_rsm.as_deref(),
            finetuned.as_deref(),
            finetune_sample,
            reference.as_deref(),
            samples,
        ),
        Command::Serve {
            checkpoint,
            data,
            sessions,
            addr,
        } => ctx.serve(checkpoint, data, sessions, addr),
        Command::Desk => ctx.desk(),
    }
}

struct Ctx {
    config: Config,
    out: PathBuf,
}

/// Appends training log lines to a file and echoes them on stderr; saves
/// periodic checkpoints next to it.
struct FileObserver {
    file: fs::File,
    stage: &'static str,
    dir: PathBuf,
}

impl FileObserver {
    fn create(dir: &Path, stage: &'static str) -> Result<Self> {
        let path = dir.join(format!("{stage}-log.jsonl"));
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(Self {
            file,
            stage,
            dir: dir.to_path_buf(),
        })
    }
}

impl TrainObserver for FileObserver {
    fn on_log(&mut self, line: &TrainLogLine) {
        let text = line.to_json_line();
        let _ = writeln!(self.file, "{text}");
        eprintln!("[{}] {text}", self.stage);
    }

    fn on_checkpoint(&mut self, iteration: usize, bundle: &ModelBundle) -> facectl_core::Result<()> {
        let path = self.dir.join(format!("{}-{iteration:07}.ckpt", self.stage));
        save_checkpoint(
            bundle,
            &path,
            &SaveInfo {
                iteration,
                ..SaveInfo::default()
            },
        )?;
        Ok(())
    }
}

struct StderrLog;
impl PipelineLog for StderrLog {
    fn line(&mut self, stage: &str, text: &str) {
        eprintln!("[{stage}] {text}");
    }
}

struct Source {
    image: Image,
    params: FaceParams,
    /// Fine-tuned weights stored with a session.
    session_bundle: Option<ModelBundle>,
}

fn load_bundle(path: &Path) -> Result<(ModelBundle, CheckpointManifest)> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

impl Ctx {
    fn model_for(&self, dataset: Option<&Dataset>) -> Result<ToyFaceModel> {
        let spec = dataset.map(|d| d.manifest.model).unwrap_or(self.config.data.model);
        Ok(ToyFaceModel::build(spec)?)
    }

    fn load_data(&self, dir: &Path) -> Result<Dataset> {
        load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
    }

    fn save_stage(&self, name: &str, out: TrainOutcome, seeds: &[(&str, u64)], parent: Option<String>) -> Result<serde_json::Value> {
        let iteration = out.losses.len();
        let bundle = out.ema.unwrap_or(out.bundle);
        let path = self.out.join(format!("{name}.ckpt"));
        let m = save_checkpoint(
            &bundle,
            &path,
            &SaveInfo {
                iteration,
                seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                parent_digest: parent,
            },
        )
        .with_context(|| format!("saving {}", path.display()))?;
        Ok(json!({
            "checkpoint": path,
            "digest": m.blob_sha256,
            "stage": m.stage,
            "iterations": iteration,
            "final_loss": out.losses.last(),
        }))
    }

    fn source(&self, s: &SourceArgs) -> Result<(Source, Option<Dataset>, ToyFaceModel)> {
        if let Some(dir) = &s.session {
            let sess = load_session(dir).map_err(|e| anyhow!(e))?;
            let model = self.model_for(None)?;
            let src = Source {
                image: sess.image,
                params: sess.record.params,
                session_bundle: sess.finetuned.map(|b| (*b).clone()),
            };
            return Ok((src, None, model));
        }
        let dataset = s.data.as_deref().map(|d| self.load_data(d)).transpose()?;
        let model = self.model_for(dataset.as_ref())?;
        if let Some(path) = &s.image {
            let image = Image::load_png(path).with_context(|| format!("loading {}", path.display()))?;
            let params = match &s.params {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    let params: FaceParams = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                    params.validate(&model)?;
                    params
                }
                None => {
                    eprintln!("fitting parameters to {}", path.display());
                    fit_params(
                        &image,
                        &model,
                        &FaceParams::neutral(&model),
                        self.config.serve.fit_budget,
                        self.config.seed,
                        None,
                    )?
                    .params
                }
            };
            let src = Source {
                image,
                params,
                session_bundle: None,
            };
            return Ok((src, dataset, model));
        }
        match (&dataset, s.sample) {
            (Some(ds), Some(i)) => {
                let r = ds
                    .manifest
                    .records
                    .get(i)
                    .ok_or_else(|| anyhow!("sample {i} outside the dataset of {} images", ds.len()))?;
                let src = Source {
                    image: ds.images[i].clone(),
                    params: r.params.clone(),
                    session_bundle: None,
                };
                Ok((src, dataset, model))
            }
            _ => bail!("choose a source: --data with --sample, --image [--params], or --session"),
        }
    }

    fn gen_data(&self, size: Option<usize>) -> Result<serde_json::Value> {
        let d = &self.config.data;
        let model = ToyFaceModel::build(d.model)?;
        let n = size.unwrap_or(d.size);
        let ds = generate_dataset(&model, n, &d.priors, &self.out, self.config.seed, (d.image_size, d.image_size))?;
        Ok(json!({
            "dir": self.out,
            "images": ds.len(),
            "train": ds.indices_with_split("train").len(),
            "test": ds.indices_with_split("test").len(),
        }))
    }

    fn pretrain(&self, data: &Path, iters: Option<usize>) -> Result<serde_json::Value> {
        let ds = self.load_data(data)?;
        let model = self.model_for(Some(&ds))?;
        let mut tc = self.config.pretrain.clone();
        if let Some(n) = iters {
            tc.iterations = n;
        }
        let mut net = self.config.net.clone();
        net.image_size = ds.images.first().map(|i| i.height).unwrap_or(net.image_size);
        let samples = prepare_samples(&ds, &model, &ds.indices_with_split("train"))?;
        let sched = self.config.schedule.build()?;
        let bundle = ModelBundle::new(net, self.config.schedule, self.config.seed)?;
        let mut obs = FileObserver::create(&self.out, "pretrain")?;
        let out = pretrain_diffae(&samples, bundle, &tc, &sched, &mut obs)?;
        self.save_stage("pretrain", out, &[("init", self.config.seed), ("train", tc.seed)], None)
    }

    fn train_control(&self, data: &Path, ckpt: &Path, iters: Option<usize>, no_rsm: bool) -> Result<serde_json::Value> {
        let ds = self.load_data(data)?;
        let model = self.model_for(Some(&ds))?;
        let (mut bundle, manifest) = load_bundle(ckpt)?;
        let mut tc: TrainConfig = self.config.control.clone();
        if no_rsm {
            tc.mask_ratio_low = 0.0;
            tc.mask_ratio_high = 0.0;
        }
        if let Some(n) = iters {
            tc.iterations = n;
        }
        let samples = prepare_samples(&ds, &model, &ds.indices_with_split("train"))?;
        let sched = bundle.schedule.build()?;
        let control_seed = self.config.seed.wrapping_add(1);
        bundle.attach_control(control_seed);
        let name = if no_rsm { "control-no-rsm" } else { "control" };
        let mut obs = FileObserver::create(&self.out, if no_rsm { "control-no-rsm" } else { "control" })?;
        let out = train_expfacenet(&samples, bundle, &tc, &sched, &mut obs)?;
        self.save_stage(
            name,
            out,
            &[("control_init", control_seed), ("train", tc.seed)],
            Some(manifest.blob_sha256),
        )
    }

    fn finetune(&self, ckpt: &Path, source: &SourceArgs, iters: Option<usize>) -> Result<serde_json::Value> {
        let (src, _, model) = self.source(source)?;
        let (bundle, manifest) = load_bundle(ckpt)?;
        let mut tc = self.config.finetune.clone();
        if let Some(n) = iters {
            tc.iterations = n;
        }
        let size = bundle.config.image_size;
        let sample = facectl_core::train::TrainSample {
            image: facectl_core::nn::Tensor::from(&src.image),
            snapshots: facectl_core::train::snapshot_tensor(&model, &src.params, size)?,
        };
        let sched = bundle.schedule.build()?;
        let mut obs = FileObserver::create(&self.out, "finetune")?;
        let out = finetune_one_shot(&sample, &bundle, &tc, &sched, &mut obs)?;
        self.save_stage("finetuned", out, &[("train", tc.seed)], Some(manifest.blob_sha256))
    }

    fn edit(&self, ckpt: Option<&Path>, source: &SourceArgs, a: &EditArgs) -> Result<serde_json::Value> {
        let (src, _, model) = self.source(source)?;
        let bundle = match (ckpt, src.session_bundle) {
            (Some(p), _) => load_bundle(p)?.0,
            (None, Some(b)) => b,
            (None, None) => bail!("--checkpoint is required unless the session holds fine-tuned weights"),
        };
        let mut req = EditRequest::new(src.params.clone());
        req.strategy = a.strategy.unwrap_or(self.config.edit.strategy);
        req.t_inf = a.t_inf.unwrap_or(self.config.edit.t_inf);
        req.noise_seed = a.noise_seed.unwrap_or(self.config.edit.noise_seed);
        if a.yaw.is_some() || a.pitch.is_some() || a.roll.is_some() {
            let mut th = src.params.theta_global;
            for (i, v) in [a.yaw, a.pitch, a.roll].into_iter().enumerate() {
                if let Some(v) = v {
                    th[i] = v;
                }
            }
            req.overrides.theta_global = Some(th);
        }
        req.overrides.theta_jaw = a.jaw;
        req.overrides.psi = a.psi.clone();
        if let Some(l) = &a.light {
            req.overrides.light = Some(
                l.as_slice()
                    .try_into()
                    .map_err(|_| anyhow!("--light needs 9 values, got {}", l.len()))?,
            );
        }
        let (out, trace) = edit(&bundle, &model, &src.image, &req)?;
        let image_path = self.out.join("edited.png");
        let trace_path = self.out.join("trace.json");
        out.save_png(&image_path)?;
        src.image.save_png(&self.out.join("source.png"))?;
        write_json(&trace_path, &json!({ "request": req, "trace": trace }))?;
        Ok(json!({
            "image": image_path,
            "trace": trace_path,
            "image_digest": facectl_core::editor::image_digest(&out),
        }))
    }

    #[allow(clippy::too_many_arguments)]
    fn inpaint(
        &self,
        ckpt: &Path,
        source: &SourceArgs,
        region: Option<Vec<usize>>,
        center: Option<f64>,
        strategy: Option<MaskStrategy>,
        t_inf: Option<usize>,
        noise_seed: Option<u64>,
    ) -> Result<serde_json::Value> {
        let (src, _, model) = self.source(source)?;
        let (bundle, _) = load_bundle(ckpt)?;
        let (h, w) = (src.image.height, src.image.width);
        let mask = match (region, center) {
            (Some(r), _) => {
                if r.len() != 4 {
                    bail!("--region needs x,y,w,h, got {} values", r.len());
                }
                let (x, y, rw, rh) = (r[0], r[1], r[2], r[3]);
                if x + rw > w || y + rh > h {
                    bail!("region {x},{y},{rw},{rh} extends past the {w}x{h} image");
                }
                (0..h * w)
                    .map(|p| (y..y + rh).contains(&(p / w)) && (x..x + rw).contains(&(p % w)))
                    .collect()
            }
            (None, Some(f)) => {
                if h != w {
                    bail!("--center needs a square image");
                }
                center_region(h, f)
            }
            (None, None) => bail!("give --region x,y,w,h or --center <fraction>"),
        };
        let seed = noise_seed.unwrap_or(self.config.edit.noise_seed);
        let opts = InpaintOptions {
            strategy: strategy.unwrap_or(self.config.edit.strategy),
            t_inf: t_inf.unwrap_or(self.config.edit.t_inf),
            noise_seed: seed,
            fit_budget: self.config.edit.inpaint_fit_budget,
            fit_seed: seed,
            params: None,
        };
        let r = inpaint(&bundle, &model, &src.image, &mask, &opts)?;
        let mut masked = src.image.clone();
        for c in 0..3 {
            for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                masked.data[c * h * w + p] = facectl_core::train::MASK_FILL;
            }
        }
        let image_path = self.out.join("inpainted.png");
        r.image.save_png(&image_path)?;
        masked.save_png(&self.out.join("masked.png"))?;
        let trace_path = self.out.join("trace.json");
        write_json(&trace_path, &json!({ "options": opts, "fitted_params": r.params, "trace": r.trace }))?;
        Ok(json!({
            "image": image_path,
            "trace": trace_path,
            "image_digest": facectl_core::editor::image_digest(&r.image),
        }))
    }

    fn eval(
        &self,
        ckpt: &Path,
        data: &Path,
        protocol: &str,
        reference: Option<&Path>,
        samples: Option<usize>,
    ) -> Result<serde_json::Value> {
        let protocol = EvalProtocol::parse(protocol)?;
        let ds = self.load_data(data)?;
        let model = self.model_for(Some(&ds))?;
        let (bundle, _) = load_bundle(ckpt)?;
        let reference = match reference {
            Some(p) => load_bundle(p)?.0.encoder,
            None => bundle.encoder.clone(),
        };
        let n = samples.unwrap_or(self.config.desk.pose_samples);
        let idx: Vec<usize> = ds.indices_with_split("test").into_iter().take(n).collect();
        let report = run_eval_suite(&bundle, &reference, &model, &ds, &idx, protocol, &self.config.eval)?;
        let json_path = self.out.join("report.json");
        let table_path = self.out.join("report.md");
        write_json(&json_path, &report)?;
        fs::write(&table_path, report.table())?;
        eprint!("{}", report.table());
        Ok(json!({ "report": json_path, "table": table_path, "digest": report.digest() }))
    }

    #[allow(clippy::too_many_arguments)]
    fn ablate(
        &self,
        data: &Path,
        rsm: Option<&Path>,
        no_rsm: Option<&Path>,
        finetuned: Option<&Path>,
        finetune_sample: Option<usize>,
        reference: Option<&Path>,
        samples: Option<usize>,
    ) -> Result<serde_json::Value> {
        let ds = self.load_data(data)?;
        let model = self.model_for(Some(&ds))?;
        let rsm = rsm.map(load_bundle).transpose()?.map(|b| b.0);
        let no_rsm = no_rsm.map(load_bundle).transpose()?.map(|b| b.0);
        let finetuned = finetuned.map(load_bundle).transpose()?.map(|b| b.0);
        let reference = match (reference, &rsm) {
            (Some(p), _) => load_bundle(p)?.0.encoder,
            (None, Some(b)) => b.encoder.clone(),
            (None, None) => bail!("--reference is required without --rsm"),
        };
        let test = ds.indices_with_split("test");
        let n = samples.unwrap_or(self.config.desk.pose_samples);
        let idx: Vec<usize> = test.iter().copied().take(n).collect();
        let ft_pos = finetune_sample.unwrap_or(self.config.desk.finetune_sample);
        let ft_index = *test
            .get(ft_pos)
            .ok_or_else(|| anyhow!("fine-tune sample {ft_pos} outside the test split"))?;
        let report = run_ablations(&AblationInputs {
            model: &model,
            dataset: &ds,
            reference: &reference,
            indices: &idx,
            rsm: rsm.as_ref(),
            no_rsm: no_rsm.as_ref(),
            finetuned: finetuned.as_ref().map(|b| (b, ft_index)),
            finetune_edits: self.config.desk.finetune_edits,
            opts: self.config.eval.clone(),
        })?;
        let json_path = self.out.join("ablation.json");
        let table_path = self.out.join("ablation.md");
        write_json(&json_path, &report)?;
        fs::write(&table_path, report.table())?;
        eprint!("{}", report.table());
        Ok(json!({ "report": json_path, "table": table_path }))
    }

    fn serve(
        self,
        checkpoint: Option<PathBuf>,
        data: Option<PathBuf>,
        sessions: Option<PathBuf>,
        addr: Option<String>,
    ) -> Result<serde_json::Value> {
        let mut config = self.config;
        if checkpoint.is_some() {
            config.serve.checkpoint = checkpoint;
        }
        if data.is_some() {
            config.serve.data_dir = data;
        }
        if sessions.is_some() {
            config.serve.sessions_dir = sessions;
        }
        if let Some(a) = addr {
            config.serve.addr = a;
        }
        let ckpt = config
            .serve
            .checkpoint
            .clone()
            .ok_or_else(|| anyhow!("serve needs --checkpoint or serve.checkpoint"))?;
        let (bundle, _) = load_bundle(&ckpt)?;
        let dataset = config.serve.data_dir.as_deref().map(load_dataset).transpose()?;
        let spec = dataset.as_ref().map(|d| d.manifest.model).unwrap_or(config.data.model);
        let model = ToyFaceModel::build(spec)?;
        let addr = config.serve.addr.clone();
        let state = AppState::new(config, bundle, model, dataset).map_err(|e| anyhow!(e))?;
        let rt = tokio::runtime::Runtime::new()?;
        rt.block_on(serve(state, &addr))?;
        Ok(json!({ "stopped": addr }))
    }

    fn desk(&self) -> Result<serde_json::Value> {
        let cfg = self.config.desk();
        let art = run_desk_pipeline(&cfg, &self.out, &mut StderrLog)?;
        let results = measure_desk(&cfg, &art, &mut StderrLog)?;
        let path = self.out.join("desk-results.json");
        write_json(&path, &json!({ "stages": art.stages, "results": results }))?;
        Ok(json!({ "results": path, "worst_strategy": results.worst_strategy() }))
    }
}
