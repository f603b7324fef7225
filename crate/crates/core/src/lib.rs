//! Decoupled appearance modeling for multi-view reconstruction.
//!
//! A rendered image is mapped to a target appearance by a per-pixel affine color
//! transform. Each transform is decoded by a small MLP from multi-resolution hash-grid
//! features of the pixel's back-projected 3D position, concatenated with a per-view
//! appearance embedding. The module sits entirely after the renderer and can be dropped
//! once optimization is done.

// Validation uses `!(x > y)` so that NaN fails every check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod appearance;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod loss;
pub mod network;
pub mod synth;
pub mod train;

pub use appearance::{
    apply_affine, identity_regularizer, AppearanceModel, Affine, TransformField, M_ID,
};
pub use encoding::{AblationEncoding, EncodingKind, HashGridConfig, HashGridStack};
pub use error::{Error, Result};
pub use geometry::{Camera, DepthMap};
pub use image::Image;
pub use loss::{LossConfig, Lambda2Schedule};
pub use network::{Activation, Mlp};
pub use synth::{Dataset, DatasetConfig, SceneSpec, VariationSpec};
pub use train::{FrameBundle, TrainConfig, Trainer};
