//! Webly supervised object detection at desk scale.
//!
//! The pipeline has three training stages: (1) a base-class detector trained
//! on annotated target-domain images doubles as a class-agnostic region
//! estimator for web images, (2) a combined base+novel detector is trained on
//! the resulting pseudo boxes with a CAM-driven attentive classification
//! loss, and (3) a residual feature refinement block adapts target-domain
//! RoI features to the frozen web detector. A synthetic two-domain shape
//! benchmark, VOC-style mAP evaluation, and an ablation runner round out the
//! harness.

pub mod attention;
pub mod checkpoint;
// pub mod config;
pub mod datamodel;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod imgio;
pub mod nn;
// pub mod pipeline;
pub mod region_estimator;
pub mod rfr;
// pub mod synthetic;

pub use datamodel::{BBox, ClassSplit, Detection, PseudoAnnotation};
pub use error::{Error, Result};
