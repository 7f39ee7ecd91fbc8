//! Toy-scale diffusion autoencoder with a parallel explicit-control network
//! for parametric face editing.

pub mod checkpoint;
pub mod diffusion;
pub mod editor;
pub mod error;
pub mod eval;
pub mod face;
pub mod imageio;
pub mod nn;
pub mod pipeline;
pub mod real;
pub mod train;

pub use error::{Error, Result};
pub use face::{FaceParams, SnapshotPair, ToyFaceModel};
pub use imageio::Image;
