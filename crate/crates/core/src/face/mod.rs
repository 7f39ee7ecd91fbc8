//! Procedural parametric head: assembly, shading, rasterization, fitting and
//! synthetic data.

pub mod dataset;
pub mod fit;
pub mod geom;
pub mod mesh;
pub mod model;
pub mod params;
pub mod raster;
pub mod render;
pub mod sh;

pub use dataset::{generate_dataset, load_dataset, load_manifest, Dataset, DatasetManifest, DatasetRecord, ParamPriors};
pub use fit::{fit_params, FitResult};
pub use mesh::{assemble_mesh, vertex_normals, vertex_rmse, Mesh};
pub use model::{build_toy_model, ModelSpec, ToyFaceModel};
pub use params::FaceParams;
pub use raster::{rasterize, RasterOutput};
pub use render::{render_ground_truth, render_snapshots, SnapshotPair};
pub use sh::{sh_basis, sh_irradiance};
