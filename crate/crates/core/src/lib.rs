//! Occlusion-aware trustworthy self-attention for optical flow, trained and
//! measured on synthetic layered scenes with exact ground truth.
//!
//! Pipeline: [`matcher`] (features and global matching) → [`occdet`]
//! (forward–backward occlusion scores) → [`attention`] (occlusion-extended
//! attention, rectified flow, repulsion and attraction constraints) →
//! [`refiner`] (recurrent refinement). [`metrics`] scores attention and flow;
//! [`harness`] trains, evaluates and runs the ablation grid.

pub mod attention;
pub mod grid;
pub mod harness;
pub mod io;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod occdet;
pub mod params;
pub mod refiner;
pub mod scenegen;
pub mod tensor;
