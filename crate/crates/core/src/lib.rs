//! Occlusion-robust facial landmark localization.
//!
//! The pipeline localizes 29 facial landmarks with per-landmark occlusion
//! state using a two-level cascaded fern regressor whose initial shapes come
//! from two complementary sources: training shapes whose LBP texture
//! signature correlates with the test face, and projections of a 3D mean
//! face under the rough head pose recovered from five fiducial points.
//! The per-initialization predictions are fused by a variance gate.

pub mod cascade;
pub mod dataset;
pub mod epnp;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod lbp;
pub mod pose;
pub mod shapes;
pub mod synthetic;
pub mod texture;

pub use error::{AlignError, Result};
pub use shapes::{AnnotatedShape, FaceBox, FiducialFive, Landmark, LandmarkIndexMap, LANDMARK_COUNT};
