use serde::{Deserialize, Serialize};

use super::model::ToyFaceModel;
use crate::error::{invalid_arg, Result};

/// Default orthographic camera: scale, x offset, y offset.
pub const DEFAULT_CAMERA: [f64; 3] = [0.8, 0.0, 0.0];
pub const DEFAULT_ALPHA: f64 = 0.6;

/// Explicit face parameters.
///
/// `theta_global` holds (yaw, pitch, roll) in radians; `light` holds the nine
/// order-2 SH coefficients; `camera` is (scale, tx, ty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceParams {
    pub beta: Vec<f64>,
    pub theta_global: [f64; 3],
    pub theta_jaw: f64,
    pub psi: Vec<f64>,
    pub alpha: f64,
    pub light: [f64; 9],
    pub camera: [f64; 3],
    pub delta: Vec<f64>,
}

impl FaceParams {
    /// Zero shape, pose, expression and detail with a frontal ambient light
    /// of unit irradiance.
    pub fn neutral(model: &ToyFaceModel) -> Self {
        let mut light = [0.0; 9];
        light[0] = 2.0 * std::f64::consts::PI.sqrt();
        Self {
            beta: vec![0.0; model.spec.k_beta],
            theta_global: [0.0; 3],
            theta_jaw: 0.0,
            psi: vec![0.0; model.spec.k_psi],
            alpha: DEFAULT_ALPHA,
            light,
            camera: DEFAULT_CAMERA,
            delta: vec![0.0; model.spec.k_delta],
        }
    }

    pub fn validate(&self, model: &ToyFaceModel) -> Result<()> {
        let spec = &model.spec;
        if self.beta.len() != spec.k_beta {
            return Err(invalid_arg!("beta has {} entries, model expects {}", self.beta.len(), spec.k_beta));
        }
        if self.psi.len() != spec.k_psi {
            return Err(invalid_arg!("psi has {} entries, model expects {}", self.psi.len(), spec.k_psi));
        }
        if self.delta.len() != spec.k_delta {
            return Err(invalid_arg!(
                "delta has {} entries, model expects {}",
                self.delta.len(),
                spec.k_delta
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid_arg!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.camera[0] > 0.0) {
            return Err(invalid_arg!("camera scale must be positive, got {}", self.camera[0]));
        }
        let all_finite = self
            .beta
            .iter()
            .chain(&self.psi)
            .chain(&self.delta)
            .chain(&self.theta_global)
            .chain(&self.light)
            .chain(&self.camera)
            .chain([&self.theta_jaw, &self.alpha])
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(invalid_arg!("non-finite parameter"));
        }
        Ok(())
    }
}
