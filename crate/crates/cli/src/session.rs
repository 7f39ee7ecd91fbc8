//! Editing sessions and their on-disk form.
//!
//! A persisted session is a directory `<sessions_dir>/<id>/` holding
//! `session.json`, `source.png`, `finetuned.ckpt` once fine-tuned, and one
//! PNG per history entry under `outputs/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use facectl_core::checkpoint::{load_checkpoint, save_checkpoint, SaveInfo};
use facectl_core::face::FaceParams;
use facectl_core::imageio::Image;
use facectl_core::nn::ModelBundle;
use serde::{Deserialize, Serialize};

pub const SESSION_FILE: &str = "session.json";
pub const SOURCE_FILE: &str = "source.png";
pub const FINETUNED_FILE: &str = "finetuned.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamsSource {
    Oracle,
    Fitted,
    Supplied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryKind {
    Edit,
    Inpaint,
    Manipulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub kind: HistoryKind,
    /// The request body as received.
    pub request: serde_json::Value,
    /// Whether the fine-tuned weights produced the output.
    pub finetuned: bool,
    /// Relative to the session directory.
    pub output: String,
    pub image_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    pub params: FaceParams,
    pub params_source: ParamsSource,
    pub sample_index: Option<usize>,
    /// Digest of the fine-tuned checkpoint, if any.
    pub finetuned_digest: Option<String>,
    pub history: Vec<HistoryEntry>,
}

pub struct Session {
    pub record: SessionRecord,
    pub image: Image,
    pub finetuned: Option<Arc<ModelBundle>>,
    /// Outputs by history position, kept for sessions without a directory.
    pub outputs: Vec<Image>,
    pub active_job: Option<String>,
}

impl Session {
    pub fn new(record: SessionRecord, image: Image) -> Self {
        Self {
            record,
            image,
            finetuned: None,
            outputs: Vec::new(),
            active_job: None,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> String {
    format!("{}: {e}", path.display())
}

/// Sessions persisted under one directory, or kept in memory only.
pub struct SessionDir {
    root: Option<PathBuf>,
}

impl SessionDir {
    pub fn new(root: Option<PathBuf>) -> Self {
        Self { root }
    }

    pub fn path(&self, id: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(id))
    }

    pub fn save_record(&self, s: &Session) -> Result<(), String> {
        let Some(dir) = self.path(&s.record.id) else {
            return Ok(());
        };
        fs::create_dir_all(dir.join("outputs")).map_err(|e| io_err(&dir, e))?;
        let src = dir.join(SOURCE_FILE);
        if !src.exists() {
            s.image.save_png(&src).map_err(|e| io_err(&src, e))?;
        }
        let path = dir.join(SESSION_FILE);
        let tmp = dir.join("session.json.tmp");
        let text = serde_json::to_string_pretty(&s.record).map_err(|e| e.to_string())?;
        fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }

    pub fn save_output(&self, id: &str, name: &str, image: &Image) -> Result<(), String> {
        if let Some(dir) = self.path(id) {
            let path = dir.join(name);
            image.save_png(&path).map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }

    pub fn save_finetuned(&self, id: &str, bundle: &ModelBundle) -> Result<Option<String>, String> {
        match self.path(id) {
            Some(dir) => {
                let path = dir.join(FINETUNED_FILE);
                let m = save_checkpoint(bundle, &path, &SaveInfo::default()).map_err(|e| io_err(&path, e))?;
                Ok(Some(m.blob_sha256))
            }
            None => Ok(None),
        }
    }

    /// Loads every session directory under the root.
    pub fn load_all(&self) -> Result<BTreeMap<String, Session>, String> {
        let mut out = BTreeMap::new();
        let Some(root) = &self.root else {
            return Ok(out);
        };
        if !root.exists() {
            return Ok(out);
        }
        for entry in fs::read_dir(root).map_err(|e| io_err(root, e))? {
            let dir = entry.map_err(|e| io_err(root, e))?.path();
            if dir.join(SESSION_FILE).exists() {
                let s = load_session(&dir)?;
                out.insert(s.record.id.clone(), s);
            }
        }
        Ok(out)
    }
}

/// Reads a session directory written by the service.
pub fn load_session(dir: &Path) -> Result<Session, String> {
    let path = dir.join(SESSION_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let record: SessionRecord = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    let src = dir.join(SOURCE_FILE);
    let image = Image::load_png(&src).map_err(|e| io_err(&src, e))?;
    let mut s = Session::new(record, image);
    let ft = dir.join(FINETUNED_FILE);
    if ft.exists() {
        let (b, _) = load_checkpoint(&ft).map_err(|e| io_err(&ft, e))?;
        s.finetuned = Some(Arc::new(b));
    }
    for h in &s.record.history {
        let p = dir.join(&h.output);
        s.outputs.push(Image::load_png(&p).map_err(|e| io_err(&p, e))?);
    }
    Ok(s)
}
