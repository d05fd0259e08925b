//! Training with privileged skeleton information: data preparation, model,
//! losses, the latent-target EM machinery and stage drivers.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod latent;
pub mod losses;
pub mod model;
pub mod train;

pub use data::Sample;
pub use latent::{BridgingMatrix, LatentPi};
pub use train::{Split, StageResult};
