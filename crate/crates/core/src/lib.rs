//! Single-image novel view synthesis trained jointly with self-supervised
//! depth estimation.
//!
//! A source frame is encoded into a latent point code and a feature
//! pyramid. The code is moved rigidly into the target camera, the pyramid is
//! warped with predicted depth, and weight-shared decoders produce target
//! depth and the novel view.
//!
//! All numerics are generic over [`Element`] (`f32` or `f64`); the aliases
//! below fix the precision used for training (`f32`) and for oracle and
//! gradient checks (`f64`).

pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod oracle;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
pub use viewsynth_tensor::{Element, Graph, Var};

pub use geometry::{CameraIntrinsics, LatentCode, PixelGrid, Pose};

pub type Pose32 = Pose<f32>;
pub type Pose64 = Pose<f64>;
pub type Intrinsics32 = CameraIntrinsics<f32>;
pub type Intrinsics64 = CameraIntrinsics<f64>;
