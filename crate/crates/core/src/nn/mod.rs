//! Hand-written convolutional networks with explicit forward caches and
//! backward passes.

pub mod bundle;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod unet;

pub use bundle::{checksum, BackboneMut, ModelBundle, Stage};
pub use models::{ControlFeatures, ControlNet, Denoiser, NetConfig, SemanticEncoder};
pub use optim::Adam;
pub use param::{Module, Param};
pub use tensor::Tensor;
