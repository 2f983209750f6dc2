//! Multi-scale teacher-student feature imitation for unsupervised anomaly
//! localization.
//!
//! A frozen CNN teacher produces a feature pyramid; for every input scale a
//! bank of independent student blocks learns to predict teacher level `l`
//! from teacher level `l-1` on normal images only. At test time the
//! normalized prediction error of each block becomes a score map, and the
//! maps are fused across levels and scales, optionally with learned weights.

pub mod backbone;
pub mod cli;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod nn;
pub mod pyramid_data;
pub mod resize;
pub mod scale_search;
pub mod scoring;
pub mod student;
pub mod tensorfile;
pub mod training;

pub use backbone::{extract_features, load_teacher, Architecture, FeatureMap, TeacherNetwork, WeightsSource};
pub use error::{Error, Result};
pub use scoring::{multi_scale_score, ScoreMap};
pub use student::{init_student_bank, BlockId, ScaleBank};
