mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::tiny_config;
use facectl_cli::config::SNAPSHOT_FILE;
use facectl_cli::Config;

fn facectl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facectl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = facectl(args);
    assert!(
        out.status.success(),
        "facectl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_command_fails_with_usage() {
    let out = facectl(&["teleport"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn schema_violation_names_the_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[pretrain]\niterations = 3\nwarmup = 10\n").unwrap();
    let out = facectl(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pretrain.warmup"), "{err}");
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, tiny_config().to_toml()).unwrap();
        Self { _dir: dir, root, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> serde_json::Value {
        let out = self.out(out);
        let mut args = vec![cmd, "--config", s(&self.config), "--seed", "5", "--out", s(&out)];
        args.extend_from_slice(extra);
        let v = ok(&args);
        let snap = fs::read_to_string(out.join(SNAPSHOT_FILE)).expect("snapshot written");
        assert_eq!(Config::parse(&snap).unwrap().seed, 5);
        v
    }
}

#[test]
fn training_editing_and_eval_end_to_end() {
    let r = Run::new();
    let data = r.out("data");
    let gen = r.run("gen-data", "data", &[]);
    assert_eq!(gen["images"], 24);

    let pre = r.run("pretrain", "pre", &["--data", s(&data)]);
    assert_eq!(pre["stage"], "pretrained");
    let pre_ckpt = r.out("pre").join("pretrain.ckpt");
    assert!(fs::read_to_string(r.out("pre").join("pretrain-log.jsonl")).unwrap().lines().count() > 0);

    let control = |out: &str| r.run("train-control", out, &["--data", s(&data), "--checkpoint", s(&pre_ckpt), "--iters", "12"]);
    let a = control("ctl-a");
    let b = control("ctl-b");
    assert_eq!(a["digest"], b["digest"], "same seed, same control checkpoint");
    assert_eq!(a["stage"], "control-trained");
    assert_eq!(a["iterations"], 12);
    let ckpt = r.out("ctl-a").join("control.ckpt");

    let e = r.run(
        "edit",
        "edit",
        &["--checkpoint", s(&ckpt), "--data", s(&data), "--sample", "3", "--yaw", "0.3"],
    );
    assert!(r.out("edit").join("edited.png").exists());
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.out("edit").join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["trace"]["target_params"]["theta_global"][0], 0.3);
    assert_eq!(trace["trace"]["steps"].as_array().unwrap().len(), 5);
    let again = r.run(
        "edit",
        "edit2",
        &["--checkpoint", s(&ckpt), "--data", s(&data), "--sample", "3", "--yaw", "0.3"],
    );
    assert_eq!(e["image_digest"], again["image_digest"]);

    r.run(
        "inpaint",
        "inpaint",
        &["--checkpoint", s(&ckpt), "--data", s(&data), "--sample", "3", "--region", "2,2,3,3"],
    );
    assert!(r.out("inpaint").join("inpainted.png").exists());

    r.run("eval", "eval", &["--checkpoint", s(&ckpt), "--data", s(&data), "--protocol", "pose"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.out("eval").join("report.json")).unwrap()).unwrap();
    assert_eq!(report["protocol"], "pose");
    assert_eq!(report["n_samples"], 2);
    for key in ["id_score", "shape_rmse", "pose_err_deg", "expr_rmse", "light_rmse"] {
        assert!(report[key].as_f64().unwrap().is_finite(), "{key}");
    }
    let table = fs::read_to_string(r.out("eval").join("report.md")).unwrap();
    assert!(table.contains("Pose"), "{table}");

    let ft = r.run(
        "finetune",
        "ft",
        &["--checkpoint", s(&ckpt), "--data", s(&data), "--sample", "3", "--iters", "3"],
    );
    assert_eq!(ft["stage"], "fine-tuned");
}

#[test]
fn edit_reads_a_persisted_session() {
    use facectl_cli::session::{ParamsSource, Session, SessionDir, SessionRecord};
    use facectl_core::pipeline::{run_desk_pipeline, SilentLog};

    let r = Run::new();
    let art = run_desk_pipeline(&tiny_config().desk(), &r.out("desk"), &mut SilentLog).unwrap();
    let i = art.finetune_index;
    let store = SessionDir::new(Some(r.out("sessions")));
    let session = Session::new(
        SessionRecord {
            id: "s0001".into(),
            params: art.dataset.manifest.records[i].params.clone(),
            params_source: ParamsSource::Oracle,
            sample_index: Some(i),
            finetuned_digest: None,
            history: Vec::new(),
        },
        art.dataset.images[i].clone(),
    );
    store.save_record(&session).unwrap();
    store.save_finetuned("s0001", &art.finetuned).unwrap();

    let dir = r.out("sessions").join("s0001");
    r.run("edit", "edit", &["--session", s(&dir), "--yaw", "0.3"]);
    assert!(r.out("edit").join("edited.png").exists());
    assert!(r.out("edit").join("trace.json").exists());
}
