//! Run configuration: a TOML document whose sections mirror the library
//! types. Unknown keys are rejected with their full key path.

use std::fs;
use std::path::{Path, PathBuf};

use facectl_core::diffusion::ScheduleParams;
use facectl_core::editor::MaskStrategy;
use facectl_core::eval::EvalOptions;
use facectl_core::face::{ModelSpec, ParamPriors};
use facectl_core::nn::NetConfig;
use facectl_core::pipeline::DeskConfig;
use facectl_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SNAPSHOT_FILE: &str = "resolved-config.toml";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config key `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub size: usize,
    pub image_size: usize,
    pub model: ModelSpec,
    pub priors: ParamPriors,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DeskConfig::default();
        Self {
            size: d.dataset_size,
            image_size: d.image_size,
            model: d.model,
            priors: d.priors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub strategy: MaskStrategy,
    pub t_inf: usize,
    pub noise_seed: u64,
    pub inpaint_fit_budget: usize,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::Linear,
            t_inf: facectl_core::diffusion::DEFAULT_T_INF,
            noise_seed: 0,
            inpaint_fit_budget: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    /// Directory holding `manifest.jsonl`; `/api/samples` draws from its test split.
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub sessions_dir: Option<PathBuf>,
    /// Budget for fitting parameters of uploaded images.
    pub fit_budget: usize,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            data_dir: None,
            checkpoint: None,
            sessions_dir: None,
            fit_budget: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataSection,
    pub net: NetConfig,
    pub schedule: ScheduleParams,
    pub pretrain: TrainConfig,
    pub control: TrainConfig,
    pub finetune: TrainConfig,
    pub edit: EditSection,
    pub eval: EvalOptions,
    pub desk: DeskExtras,
    pub serve: ServeSection,
}

/// Desk experiment settings not covered by the other sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskExtras {
    pub finetune_sample: usize,
    pub finetune_edits: usize,
    pub identity_samples: usize,
    pub pose_samples: usize,
    pub proxy_triples: usize,
}

impl Default for DeskExtras {
    fn default() -> Self {
        let d = DeskConfig::default();
        Self {
            finetune_sample: d.finetune_sample,
            finetune_edits: d.finetune_edits,
            identity_samples: d.identity_samples,
            pose_samples: d.pose_samples,
            proxy_triples: d.proxy_triples,
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        let d = DeskConfig::default();
        Self {
            seed: d.seed,
            data: DataSection::default(),
            net: d.net,
            schedule: d.schedule,
            pretrain: d.pretrain,
            control: d.control,
            finetune: d.finetune,
            edit: EditSection::default(),
            eval: d.eval,
            desk: DeskExtras::default(),
            serve: ServeSection::default(),
        }
    }
}

impl Config {
    /// Keys absent from `text` keep the values of [`Config::default`], so a
    /// partial `[pretrain]` table still starts from the desk preset.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.message().to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut merged, user);
        serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| ConfigError::Schema {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Writes the resolved configuration next to a run's outputs.
    pub fn write_snapshot(&self, dir: &Path) -> std::io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    pub fn desk(&self) -> DeskConfig {
        DeskConfig {
            seed: self.seed,
            dataset_size: self.data.size,
            image_size: self.data.image_size,
            model: self.data.model,
            priors: self.data.priors.clone(),
            net: self.net.clone(),
            schedule: self.schedule,
            pretrain: self.pretrain.clone(),
            control: self.control.clone(),
            finetune: self.finetune.clone(),
            finetune_sample: self.desk.finetune_sample,
            finetune_edits: self.desk.finetune_edits,
            identity_samples: self.desk.identity_samples,
            pose_samples: self.desk.pose_samples,
            proxy_triples: self.desk.proxy_triples,
            eval: self.eval.clone(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !is_tagged(b) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Internally tagged enums (`kind = ...`) are replaced whole, not merged.
fn is_tagged(t: &toml::Table) -> bool {
    t.contains_key("kind")
}
