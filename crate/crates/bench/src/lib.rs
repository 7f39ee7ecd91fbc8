//! Fixtures for the desk-scale benchmarks.

use facectl_core::diffusion::ScheduleParams;
use facectl_core::face::{FaceParams, ModelSpec, ToyFaceModel};
use facectl_core::nn::{ModelBundle, NetConfig, Stage};

/// Desk face model and a mildly posed parameter set.
pub fn desk_face() -> (ToyFaceModel, FaceParams) {
    let model = ToyFaceModel::build(ModelSpec::default()).expect("default model builds");
    let mut p = FaceParams::neutral(&model);
    p.theta_global = [0.3, -0.1, 0.05];
    p.theta_jaw = 0.15;
    (model, p)
}

/// Untrained desk network with a control branch, marked ready for editing.
pub fn desk_bundle() -> ModelBundle {
    let mut b = ModelBundle::new(NetConfig::desk(), ScheduleParams::default(), 0).expect("desk bundle builds");
    b.attach_control(1);
    b.stage = Stage::ControlTrained;
    b
}
