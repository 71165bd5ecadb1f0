//! Similarity estimation, sequential stack alignment, cross-level
//! propagation and boundary-driven B-spline refinement.

mod bspline;
mod chain;
mod similarity;
mod warp;

pub use bspline::{nonrigid_refine, DisplacementField, NonrigidParams, NonrigidResult};
pub use chain::{
    chain_from_correspondences, chain_register, extract_section_features, match_pair, pair_correspondences,
    refine_chain_nonrigid, Canvas, ChainParams, Matcher, PairDiagnostics, RegistrationChain,
};
pub use similarity::{
    estimate_similarity, fit_similarity, propagate_to_level, similarity_from_two, wrap_angle, PointPair, RansacParams,
    SimilarityEstimate, SimilarityTransform,
};
pub use warp::{apply_warp, forward_point, warp_mask, GLASS};
