//! Salience-guided query filtering for detection-transformer encoders.
//!
//! The crate builds scale-independent salience targets for every position of
//! a multi-scale feature pyramid, trains a small top-down salience predictor
//! against them with a focal loss, and uses the predicted maps to pick which
//! queries each encoder layer refines at each pyramid level. Around that core
//! sit the query refinement pieces (background embeddings, cross-level token
//! fusion and NMS-based redundancy removal), an analytic cost model, and a
//! synthetic scene generator used for training and evaluation.
//!
//! Everything runs on a small reverse-mode tape over `f64` tensors in
//! [`tensor`].

// `!(x >= 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod filtering;
pub mod geometry;
pub mod pipeline;
pub mod pyramid;
pub mod predictor;
pub mod refinement;
pub mod supervision;
pub mod tensor;

pub use error::{Error, Result};
pub use filtering::{FilterPlan, FilterRatios};
pub use geometry::{BBox, GridPos};
pub use pipeline::SyntheticScene;
pub use pyramid::{FeaturePyramid, PyramidSpec};
pub use supervision::{FocalParams, SalienceTargets};
pub use tensor::{Tape, Tensor, Var};
