//! The trained model set and its parameter digests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::models::{ControlNet, Denoiser, NetConfig, SemanticEncoder};
use super::param::{join, Module, Param};
use crate::diffusion::ScheduleParams;
use crate::error::Result;

/// How far a bundle has progressed through training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Initialized,
    Pretrained,
    ControlTrained,
    FineTuned,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initialized => "initialized",
            Stage::Pretrained => "pretrained",
            Stage::ControlTrained => "control-trained",
            Stage::FineTuned => "fine-tuned",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: NetConfig,
    pub schedule: ScheduleParams,
    pub encoder: SemanticEncoder<f32>,
    pub denoiser: Denoiser<f32>,
    pub control: Option<ControlNet<f32>>,
    pub stage: Stage,
}

impl ModelBundle {
    pub fn new(config: NetConfig, schedule: ScheduleParams, seed: u64) -> Result<Self> {
        config.validate()?;
        schedule.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = SemanticEncoder::new(&config, &mut rng);
        let denoiser = Denoiser::new(&config, &mut rng);
        Ok(Self {
            config,
            schedule,
            encoder,
            denoiser,
            control: None,
            stage: Stage::Initialized,
        })
    }

    /// Adds a control network whose trunk starts from the denoiser's.
    pub fn attach_control(&mut self, seed: u64) {
        self.control = Some(ControlNet::init_from_denoiser(&self.config, &self.denoiser, seed));
    }

    pub fn encoder_checksum(&self) -> String {
        checksum(&self.encoder)
    }

    pub fn denoiser_checksum(&self) -> String {
        checksum(&self.denoiser)
    }

    pub fn backbone_checksum(&self) -> String {
        let mut enc = self.encoder.clone();
        let mut den = self.denoiser.clone();
        checksum(&BackboneMut {
            encoder: &mut enc,
            denoiser: &mut den,
        })
    }

    pub fn control_checksum(&self) -> Option<String> {
        self.control.as_ref().map(checksum)
    }

    /// Digest of every parameter in the bundle.
    pub fn checksum(&self) -> String {
        checksum(self)
    }
}

impl Module<f32> for ModelBundle {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.denoiser.visit(&join(prefix, "denoiser"), f);
        if let Some(c) = &self.control {
            c.visit(&join(prefix, "control"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.denoiser.visit_mut(&join(prefix, "denoiser"), f);
        if let Some(c) = &mut self.control {
            c.visit_mut(&join(prefix, "control"), f);
        }
    }
}

/// Encoder and denoiser together, the component fine-tuning updates.
pub struct BackboneMut<'a> {
    pub encoder: &'a mut SemanticEncoder<f32>,
    pub denoiser: &'a mut Denoiser<f32>,
}

impl Module<f32> for BackboneMut<'_> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.denoiser.visit(&join(prefix, "denoiser"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.denoiser.visit_mut(&join(prefix, "denoiser"), f);
    }
}

/// SHA-256 over parameter names, shapes and little-endian values, hex encoded.
pub fn checksum<M: Module<f32>>(m: &M) -> String {
    let mut h = Sha256::new();
    m.visit("", &mut |name, p| {
        h.update(name.as_bytes());
        for d in &p.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &p.value {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}
