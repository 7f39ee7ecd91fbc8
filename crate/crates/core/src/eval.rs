//! Re-inference errors, the identity proxy, protocol-driven evaluation and
//! ablation comparisons.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::editor::{edit, EditRequest, MaskStrategy};
use crate::error::{invalid_arg, Error, Result};
use crate::face::geom::{euler_to_matrix, rotation_angle_between};
use crate::face::{assemble_mesh, fit_params, render_ground_truth, vertex_rmse, Dataset, FaceParams, ToyFaceModel};
use crate::imageio::{psnr, Image};
use crate::nn::{ModelBundle, SemanticEncoder, Tensor};

/// How re-inference fits are started and bounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub budget: usize,
    pub seed: u64,
    /// Start from this instead of the neutral parameters.
    pub init: Option<FaceParams>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            budget: 2000,
            seed: 0,
            init: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReinferenceErrors {
    pub shape_rmse: f64,
    pub pose_err_deg: f64,
    pub expr_rmse: f64,
    pub light_rmse: f64,
    pub fit_loss: f64,
}

fn neutral_pose_shape(model: &ToyFaceModel, p: &FaceParams) -> Result<Vec<[f64; 3]>> {
    let mut q = p.clone();
    q.theta_global = [0.0; 3];
    q.theta_jaw = 0.0;
    q.psi.iter_mut().for_each(|v| *v = 0.0);
    q.delta.iter_mut().for_each(|v| *v = 0.0);
    Ok(assemble_mesh(model, &q)?.vertices)
}

fn expression_offsets(model: &ToyFaceModel, psi: &[f64]) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]; model.num_vertices()];
    for (k, &p) in psi.iter().enumerate() {
        let col = model.expr_column(k);
        for (i, o) in out.iter_mut().enumerate() {
            for d in 0..3 {
                o[d] += p * col[3 * i + d];
            }
        }
    }
    out
}

/// Errors between two parameter sets, decomposed per factor.
pub fn parameter_errors(model: &ToyFaceModel, fitted: &FaceParams, target: &FaceParams) -> Result<ReinferenceErrors> {
    let shape_rmse = vertex_rmse(&neutral_pose_shape(model, fitted)?, &neutral_pose_shape(model, target)?);
    let expr_rmse = vertex_rmse(&expression_offsets(model, &fitted.psi), &expression_offsets(model, &target.psi));
    let geo = rotation_angle_between(&euler_to_matrix(fitted.theta_global), &euler_to_matrix(target.theta_global));
    let pose_err_deg = (geo + (fitted.theta_jaw - target.theta_jaw).abs()).to_degrees();
    let light_rmse = (fitted
        .light
        .iter()
        .zip(&target.light)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / 9.0)
        .sqrt();
    Ok(ReinferenceErrors {
        shape_rmse,
        pose_err_deg,
        expr_rmse,
        light_rmse,
        fit_loss: 0.0,
    })
}

/// Fits parameters back from `edited` and compares them to `target`.
pub fn reinference_errors(
    model: &ToyFaceModel,
    edited: &Image,
    target: &FaceParams,
    opts: &FitOptions,
) -> Result<ReinferenceErrors> {
    target.validate(model)?;
    let init = opts.init.clone().unwrap_or_else(|| FaceParams::neutral(model));
    let fit = fit_params(edited, model, &init, opts.budget, opts.seed, None)?;
    let mut e = parameter_errors(model, &fit.params, target)?;
    e.fit_loss = fit.loss;
    Ok(e)
}

/// Cosine similarity of the semantic codes of a frozen reference encoder.
pub fn identity_score(reference: &SemanticEncoder<f32>, a: &Image, b: &Image) -> Result<f64> {
    let za = crate::nn::models::encode_semantic(reference, &Tensor::from(a))?;
    let zb = crate::nn::models::encode_semantic(reference, &Tensor::from(b))?;
    let dot: f64 = za.iter().zip(&zb).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = za.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = zb.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedScore("semantic code has zero norm".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean identity scores over triples: anchor vs the same identity in another
/// record's pose, and anchor vs another identity in the anchor's pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyCheck {
    pub same_identity: f64,
    pub different_identity: f64,
    pub triples: usize,
}

pub fn identity_proxy_check(
    reference: &SemanticEncoder<f32>,
    model: &ToyFaceModel,
    dataset: &Dataset,
    triples: usize,
) -> Result<ProxyCheck> {
    let recs = &dataset.manifest.records;
    let ids = recs.iter().map(|r| r.identity).max().map_or(0, |m| m + 1);
    if recs.len() < 2 || ids < 2 || triples == 0 {
        return Err(invalid_arg!("identity check needs at least two identities and one triple"));
    }
    let (h, w) = dataset.manifest.image_size;
    let (mut same, mut diff) = (0.0, 0.0);
    for k in 0..triples {
        let a = &recs[k % recs.len()];
        let pose_src = &recs[(k * 7 + 3) % recs.len()];
        let other = recs
            .iter()
            .cycle()
            .skip(k * 3 + 1)
            .find(|r| r.identity != a.identity)
            .expect("two identities exist");
        let anchor = render_ground_truth(model, &a.params, a.texture_seed, a.bg_seed, h, w)?;
        let mut posed = a.params.clone();
        posed.theta_global = pose_src.params.theta_global;
        posed.theta_jaw = pose_src.params.theta_jaw;
        let positive = render_ground_truth(model, &posed, a.texture_seed, a.bg_seed, h, w)?;
        let mut swapped = a.params.clone();
        swapped.beta = other.params.beta.clone();
        let negative = render_ground_truth(model, &swapped, other.texture_seed, a.bg_seed, h, w)?;
        same += identity_score(reference, &anchor, &positive)?;
        diff += identity_score(reference, &anchor, &negative)?;
    }
    Ok(ProxyCheck {
        same_identity: same / triples as f64,
        different_identity: diff / triples as f64,
        triples,
    })
}

/// Which edit each evaluated sample receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalProtocol {
    /// Empty overrides.
    Identity,
    /// Yaw offsets of +0.3 / -0.3 rad, alternating.
    Pose,
    /// Expression set to a sign pattern of magnitude 1.
    Expression,
    /// First-order light coefficients replaced by a rotating direction.
    Light,
}

impl EvalProtocol {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "pose" => Ok(Self::Pose),
            "expression" => Ok(Self::Expression),
            "light" => Ok(Self::Light),
            _ => Err(invalid_arg!("unknown protocol {s:?}; expected identity, pose, expression or light")),
        }
    }

    /// The edit applied to the `k`-th evaluated item.
    pub fn request(self, source: &FaceParams, k: usize) -> EditRequest {
        let mut req = EditRequest::new(source.clone());
        match self {
            EvalProtocol::Identity => {}
            EvalProtocol::Pose => {
                let mut th = source.theta_global;
                th[0] += if k % 2 == 0 { 0.3 } else { -0.3 };
                req.overrides.theta_global = Some(th);
            }
            EvalProtocol::Expression => {
                let psi = (0..source.psi.len())
                    .map(|j| if (j + k) % 2 == 0 { 1.0 } else { -1.0 })
                    .collect();
                req.overrides.psi = Some(psi);
            }
            EvalProtocol::Light => {
                let mut l = source.light;
                let a = k as f64 * std::f64::consts::FRAC_PI_3;
                l[1] = 0.3 * a.cos();
                l[2] = 0.2;
                l[3] = 0.3 * a.sin();
                req.overrides.light = Some(l);
            }
        }
        req
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub strategy: MaskStrategy,
    pub t_inf: usize,
    pub noise_seed: u64,
    pub fit: FitOptions,
    /// Edits per listed sample; each uses the next protocol variant and seed.
    pub edits_per_sample: usize,
    /// Keep the detail vector when rendering snapshots.
    pub use_detail: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::Linear,
            t_inf: crate::diffusion::DEFAULT_T_INF,
            noise_seed: 0,
            fit: FitOptions::default(),
            edits_per_sample: 1,
            use_detail: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample: usize,
    pub variant: usize,
    pub id_score: f64,
    pub psnr_vs_source: f64,
    pub errors: ReinferenceErrors,
}

/// Published full-scale numbers, kept only as context; desk numbers are not
/// comparable to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub id: f64,
    pub shape: f64,
    pub pose: f64,
    pub exp: f64,
    pub light: f64,
    pub note: String,
}

impl Default for ReferenceRow {
    fn default() -> Self {
        Self {
            id: 0.31,
            shape: 2.8,
            pose: 4.5,
            exp: 2.9,
            light: 0.31,
            note: "published full-resolution result; different data, metrics and units, not reproduced here".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub id_score: f64,
    pub shape_rmse: f64,
    pub pose_err_deg: f64,
    pub expr_rmse: f64,
    pub light_rmse: f64,
    pub psnr_vs_source: f64,
    pub n_samples: usize,
    pub config_digest: String,
    pub reference: ReferenceRow,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("report serializes")))
    }

    /// Plain-text table with the published column layout.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("protocol: {:?}, samples: {}\n", self.protocol, self.n_samples));
        s.push_str("| row | ID | Shape | Pose (deg) | Exp | Light |\n|---|---|---|---|---|---|\n");
        s.push_str(&format!(
            "| desk | {:.3} | {:.4} | {:.2} | {:.4} | {:.4} |\n",
            self.id_score, self.shape_rmse, self.pose_err_deg, self.expr_rmse, self.light_rmse
        ));
        let r = &self.reference;
        s.push_str(&format!(
            "| reference (context only) | {} | {} | {} | {} | {} |\n",
            r.id, r.shape, r.pose, r.exp, r.light
        ));
        s
    }
}

/// Digest of the inputs that determine a report.
fn config_digest(bundle: &ModelBundle, protocol: EvalProtocol, indices: &[usize], opts: &EvalOptions) -> String {
    let mut h = Sha256::new();
    h.update(bundle.checksum().as_bytes());
    h.update(serde_json::to_vec(&(protocol, indices, opts)).expect("serializes"));
    hex::encode(&h.finalize()[..16])
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Edits every listed sample per the protocol and aggregates errors against
/// the edit targets plus identity scores against the source image.
pub fn run_eval_suite(
    bundle: &ModelBundle,
    reference: &SemanticEncoder<f32>,
    model: &ToyFaceModel,
    dataset: &Dataset,
    indices: &[usize],
    protocol: EvalProtocol,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if indices.is_empty() || opts.edits_per_sample == 0 {
        return Err(invalid_arg!("evaluation split is empty"));
    }
    let mut rows = Vec::with_capacity(indices.len() * opts.edits_per_sample);
    for (n, &i) in indices.iter().enumerate() {
        let image = dataset
            .images
            .get(i)
            .ok_or_else(|| invalid_arg!("sample {i} outside the dataset"))?;
        let mut source = dataset.manifest.records[i].params.clone();
        for v in 0..opts.edits_per_sample {
            let k = n * opts.edits_per_sample + v;
            if !opts.use_detail {
                source.delta.iter_mut().for_each(|d| *d = 0.0);
            }
            let mut req = protocol.request(&source, k);
            req.strategy = opts.strategy;
            req.t_inf = opts.t_inf;
            req.noise_seed = opts.noise_seed.wrapping_add(k as u64);
            let (out, trace) = edit(bundle, model, image, &req)?;
            let mut target = trace.target_params;
            target.delta = dataset.manifest.records[i].params.delta.clone();
            let fit = FitOptions {
                seed: opts.fit.seed.wrapping_add(k as u64),
                ..opts.fit.clone()
            };
            let errors = reinference_errors(model, &out, &target, &fit)?;
            rows.push(EvalRow {
                sample: i,
                variant: v,
                id_score: identity_score(reference, image, &out)?,
                psnr_vs_source: psnr(image, &out),
                errors,
            });
        }
    }
    let report = EvalReport {
        protocol,
        id_score: mean(rows.iter().map(|r| r.id_score)),
        shape_rmse: mean(rows.iter().map(|r| r.errors.shape_rmse)),
        pose_err_deg: mean(rows.iter().map(|r| r.errors.pose_err_deg)),
        expr_rmse: mean(rows.iter().map(|r| r.errors.expr_rmse)),
        light_rmse: mean(rows.iter().map(|r| r.errors.light_rmse)),
        psnr_vs_source: mean(rows.iter().map(|r| r.psnr_vs_source)),
        n_samples: rows.len(),
        config_digest: config_digest(bundle, protocol, indices, opts),
        reference: ReferenceRow::default(),
        rows,
    };
    let finite = [
        report.id_score,
        report.shape_rmse,
        report.pose_err_deg,
        report.expr_rmse,
        report.light_rmse,
    ]
    .iter()
    .all(|v| v.is_finite());
    if !finite {
        return Err(Error::InvalidState("evaluation produced non-finite metrics".into()));
    }
    Ok(report)
}

/// One arm of an ablation; `report` is absent when the arm had no model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rsm: Vec<Arm>,
    pub strategies: Vec<Arm>,
    pub finetune: Vec<Arm>,
    pub detail: Vec<Arm>,
}

impl AblationReport {
    pub fn arm<'a>(arms: &'a [Arm], name: &str) -> Option<&'a EvalReport> {
        arms.iter().find(|a| a.name == name).and_then(|a| a.report.as_ref())
    }

    pub fn table(&self) -> String {
        let mut s = String::from("| group | arm | n | ID | Shape | Pose (deg) | Exp | Light |\n|---|---|---|---|---|---|---|---|\n");
        for (group, arms) in [
            ("rsm", &self.rsm),
            ("strategy", &self.strategies),
            ("finetune", &self.finetune),
            ("detail", &self.detail),
        ] {
            for a in arms {
                match &a.report {
                    Some(r) => s.push_str(&format!(
                        "| {group} | {} | {} | {:.3} | {:.4} | {:.2} | {:.4} | {:.4} |\n",
                        a.name, r.n_samples, r.id_score, r.shape_rmse, r.pose_err_deg, r.expr_rmse, r.light_rmse
                    )),
                    None => s.push_str(&format!("| {group} | {} | absent | | | | | |\n", a.name)),
                }
            }
        }
        s
    }
}

/// Everything the ablation suite can compare; missing models become absent
/// arms.
pub struct AblationInputs<'a> {
    pub model: &'a ToyFaceModel,
    pub dataset: &'a Dataset,
    pub reference: &'a SemanticEncoder<f32>,
    pub indices: &'a [usize],
    pub rsm: Option<&'a ModelBundle>,
    pub no_rsm: Option<&'a ModelBundle>,
    /// Fine-tuned bundle and the sample it was tuned on.
    pub finetuned: Option<(&'a ModelBundle, usize)>,
    pub finetune_edits: usize,
    pub opts: EvalOptions,
}

pub fn run_ablations(inputs: &AblationInputs) -> Result<AblationReport> {
    let run = |b: Option<&ModelBundle>, idx: &[usize], protocol: EvalProtocol, opts: &EvalOptions| -> Result<Option<EvalReport>> {
        b.map(|b| run_eval_suite(b, inputs.reference, inputs.model, inputs.dataset, idx, protocol, opts))
            .transpose()
    };
    let o = &inputs.opts;
    let rsm = vec![
        Arm {
            name: "rsm".into(),
            report: run(inputs.rsm, inputs.indices, EvalProtocol::Pose, o)?,
        },
        Arm {
            name: "no-rsm".into(),
            report: run(inputs.no_rsm, inputs.indices, EvalProtocol::Pose, o)?,
        },
    ];
    let mut strategies = Vec::new();
    for (label, s) in crate::editor::ablation_strategies() {
        let opts = EvalOptions {
            strategy: s,
            ..o.clone()
        };
        strategies.push(Arm {
            name: label.to_string(),
            report: run(inputs.rsm, inputs.indices, EvalProtocol::Pose, &opts)?,
        });
    }
    let finetune = match inputs.finetuned {
        Some((tuned, idx)) => {
            let opts = EvalOptions {
                edits_per_sample: inputs.finetune_edits.max(1),
                ..o.clone()
            };
            vec![
                Arm {
                    name: "on".into(),
                    report: run(Some(tuned), &[idx], EvalProtocol::Pose, &opts)?,
                },
                Arm {
                    name: "off".into(),
                    report: run(inputs.rsm, &[idx], EvalProtocol::Pose, &opts)?,
                },
            ]
        }
        None => vec![
            Arm {
                name: "on".into(),
                report: None,
            },
            Arm {
                name: "off".into(),
                report: None,
            },
        ],
    };
    let no_detail = EvalOptions {
        use_detail: false,
        ..o.clone()
    };
    let detail = vec![
        Arm {
            name: "with-delta".into(),
            report: run(inputs.rsm, inputs.indices, EvalProtocol::Expression, o)?,
        },
        Arm {
            name: "without-delta".into(),
            report: run(inputs.rsm, inputs.indices, EvalProtocol::Expression, &no_detail)?,
        },
    ];
    Ok(AblationReport {
        rsm,
        strategies,
        finetune,
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face::ModelSpec;
    use crate::nn::NetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> ToyFaceModel {
        ToyFaceModel::build(ModelSpec::default()).unwrap()
    }

    #[test]
    fn self_reinference_is_a_fixed_point() {
        let m = model();
        let mut p = FaceParams::neutral(&m);
        p.theta_global = [0.2, -0.1, 0.05];
        p.psi[0] = 0.5;
        let img = render_ground_truth(&m, &p, 3, 4, 32, 32).unwrap();
        let e = reinference_errors(
            &m,
            &img,
            &p,
            &FitOptions {
                budget: 1,
                seed: 0,
                init: Some(p.clone()),
            },
        )
        .unwrap();
        assert_eq!(e.shape_rmse, 0.0);
        assert_eq!(e.pose_err_deg, 0.0);
        assert_eq!(e.expr_rmse, 0.0);
        assert_eq!(e.light_rmse, 0.0);
    }

    #[test]
    fn light_rmse_of_a_single_coefficient() {
        let m = model();
        let a = FaceParams::neutral(&m);
        let mut b = a.clone();
        b.light[0] += 0.3;
        let e = parameter_errors(&m, &a, &b).unwrap();
        assert!((e.light_rmse - 0.1).abs() < 1e-12);
        assert_eq!(e.pose_err_deg, 0.0);
    }

    #[test]
    fn pose_error_adds_geodesic_and_jaw() {
        let m = model();
        let a = FaceParams::neutral(&m);
        let mut b = a.clone();
        b.theta_global[0] = 0.1;
        b.theta_jaw = 0.05;
        let e = parameter_errors(&m, &a, &b).unwrap();
        assert!((e.pose_err_deg - 0.15f64.to_degrees()).abs() < 1e-9);
    }

    #[test]
    fn identity_score_properties() {
        let cfg = NetConfig {
            image_size: 16,
            ..NetConfig::tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = SemanticEncoder::new(&cfg, &mut rng);
        let a = Image::filled(16, 16, 0.3);
        let mut b = a.clone();
        b.data[5] = -0.7;
        assert!((identity_score(&enc, &a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(identity_score(&enc, &a, &b).unwrap(), identity_score(&enc, &b, &a).unwrap());
        let mut zero = enc.clone();
        zero.fc.weight.value.iter_mut().for_each(|v| *v = 0.0);
        zero.fc.bias.value.iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(identity_score(&zero, &a, &b), Err(Error::UndefinedScore(_))));
    }

    #[test]
    fn protocol_requests() {
        let m = model();
        let p = FaceParams::neutral(&m);
        assert!(EvalProtocol::Identity.request(&p, 0).overrides.is_empty());
        assert_eq!(EvalProtocol::Pose.request(&p, 1).overrides.theta_global.unwrap()[0], -0.3);
        assert!(EvalProtocol::parse("bogus").is_err());
    }
}
