//! Occluded-pose estimation sandbox.
//!
//! The crate implements a desk-scale top-down pose pipeline built around
//! three occlusion mechanisms: occlusion data augmentation (joint masking and
//! instance paste), adaptive discriminative attention over the backbone
//! features, and feature-guided multi-hop graph refinement of the decoded
//! pose. Everything trains on procedurally generated occluded scenes through
//! a small reverse-mode tensor tape.

pub mod ablate;
pub mod attention;
pub mod augment;
pub mod coco;
pub mod config;
pub mod crop;
pub mod dataset;
pub mod eval;
pub mod gcn;
pub mod gradsuite;
pub mod heatmap;
pub mod keypoints;
pub mod model;
pub mod numerics;
pub mod skeleton;
pub mod synthdata;
pub mod train;
pub mod util;

pub use keypoints::{AnnotatedImage, BBox, Joint, KeypointSet, Person, Visibility};
pub use numerics::{Params, Tape, Tensor, TensorId};
