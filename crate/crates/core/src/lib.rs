//! Volumetric biopsy-core reconstruction from serial tissue sections.
//!
//! The crate is organised bottom-up:
//!
//! - [`raster`]: section images, tissue masking, morphology, ribbon labelling
//!   and distance transforms.
//! - [`features`]: difference-of-Gaussians keypoints and 128-d gradient
//!   histogram descriptors.
//! - [`matching`]: descriptor assignment by log-domain Sinkhorn with a dustbin.
//! - [`register`]: RANSAC similarity fitting, the sequential registration
//!   chain, cross-level propagation, B-spline boundary refinement and warping.
//! - [`volume`]: core assembly on a common canvas and volumetric patching.
//! - [`attention`]: divided space-time attention, rollout, ABMIL and the
//!   self-distillation helpers.
//! - [`metrics`]: registration error, ROC/AUC, weighted F1, kappa, McNemar.
//! - [`synth`]: a ground-truth synthetic serial-section generator.
//! - [`pipeline`] and [`io`]: the end-to-end alignment run and its on-disk
//!   formats.

pub mod attention;
pub mod error;
pub mod features;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod register;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use features::{Descriptor, Keypoint};
pub use matching::{CostMatrix, MatchSet};
pub use raster::{BinaryMask, GrayImage, RibbonLabel, ScalarField, SectionImage};
pub use register::{DisplacementField, RegistrationChain, SimilarityTransform};
pub use volume::{VolumetricCore, VolumetricPatch};
