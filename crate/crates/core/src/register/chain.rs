use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bspline::{nonrigid_refine, DisplacementField, NonrigidParams};
use super::similarity::{estimate_similarity, PointPair, RansacParams, SimilarityTransform};
use super::warp::{forward_point, warp_mask};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureSet, SiftParams};
use crate::matching::{match_descriptors, ratio_test_matches, MatchParams, MatchSet};
use crate::raster::{boundary_of, dilate, BinaryMask, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Matcher {
    Sinkhorn,
    RatioTest { ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainParams {
    pub sift: SiftParams,
    pub matching: MatchParams,
    pub matcher: Matcher,
    pub ransac: RansacParams,
    pub min_matches: usize,
    /// Detection is restricted to the tissue mask grown by this many pixels.
    pub mask_dilation: usize,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            sift: SiftParams {
                max_keypoints: Some(600),
                ..SiftParams::default()
            },
            matching: MatchParams::default(),
            matcher: Matcher::Sinkhorn,
            ransac: RansacParams::default(),
            min_matches: 8,
            mask_dilation: 8,
        }
    }
}

/// Diagnostics of one `moving -> fixed` pair, `fixed = moving - 1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub moving: usize,
    pub fixed: usize,
    pub match_count: usize,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
    pub rms_residual: f64,
    pub transform: SimilarityTransform,
    pub failed: bool,
    pub failure: Option<String>,
    pub nonrigid_initial_cost: Option<f64>,
    pub nonrigid_final_cost: Option<f64>,
}

/// Axis-aligned canvas in reference coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub origin: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl Canvas {
    /// Reference-frame transform re-expressed in canvas pixels.
    pub fn to_canvas(&self, t: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform::translation(-self.origin[0], -self.origin[1]).compose(t)
    }

    /// Union of the mapped section rectangles, grown to whole multiples of
    /// `multiple` pixels.
    pub fn covering(transforms: &[SimilarityTransform], sizes: &[(usize, usize)], multiple: usize) -> Canvas {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for (t, &(w, h)) in transforms.iter().zip(sizes) {
            for c in [[0.0, 0.0], [w as f64, 0.0], [0.0, h as f64], [w as f64, h as f64]] {
                let p = t.apply(c);
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
        }
        if !lo[0].is_finite() {
            return Canvas {
                origin: [0.0, 0.0],
                width: 0,
                height: 0,
            };
        }
        let m = multiple.max(1) as f64;
        let origin = [lo[0].floor(), lo[1].floor()];
        // Round away tiny overshoots so exactly fitting sections do not grow the canvas.
        let side = |k: usize| ((((hi[k] - origin[k]) - 1e-6) / m).ceil().max(1.0) * m) as usize;
        Canvas {
            origin,
            width: side(0),
            height: side(1),
        }
    }
}

/// Per-section transforms into the reference (section 0) frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationChain {
    pub transforms: Vec<SimilarityTransform>,
    /// Non-rigid stage per section, in canvas coordinates.
    pub fields: Vec<Option<DisplacementField>>,
    pub pairs: Vec<PairDiagnostics>,
    pub reference_index: usize,
    pub canvas: Option<Canvas>,
}

impl RegistrationChain {
    pub fn identity(n: usize) -> Self {
        Self {
            transforms: vec![SimilarityTransform::identity(); n],
            fields: vec![None; n],
            pairs: Vec::new(),
            reference_index: 0,
            canvas: None,
        }
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn failed_pairs(&self) -> Vec<usize> {
        self.pairs.iter().filter(|p| p.failed).map(|p| p.moving).collect()
    }

    /// Rigid map of section `i` into canvas pixels.
    pub fn canvas_transform(&self, i: usize) -> SimilarityTransform {
        match &self.canvas {
            Some(c) => c.to_canvas(&self.transforms[i]),
            None => self.transforms[i],
        }
    }

    /// Where a section point lands on the canvas after every stage.
    pub fn map_point(&self, i: usize, p: [f64; 2]) -> [f64; 2] {
        forward_point(&self.canvas_transform(i), self.fields[i].as_ref(), p)
    }

    /// Same as [`map_point`](Self::map_point) without the non-rigid stage.
    pub fn map_point_rigid(&self, i: usize, p: [f64; 2]) -> [f64; 2] {
        self.canvas_transform(i).apply(p)
    }
}

/// Features of every section, computed in parallel.
pub fn extract_section_features(images: &[GrayImage], masks: Option<&[BinaryMask]>, params: &ChainParams) -> Result<Vec<FeatureSet>> {
    if let Some(m) = masks {
        if m.len() != images.len() {
            return Err(Error::ShapeMismatch(format!("{} masks for {} sections", m.len(), images.len())));
        }
    }
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mask = masks.map(|m| dilate(&m[i], params.mask_dilation));
            extract_features(img, &params.sift, mask.as_ref())
        })
        .collect()
}

pub fn match_pair(moving: &FeatureSet, fixed: &FeatureSet, params: &ChainParams) -> Result<MatchSet> {
    Ok(match params.matcher {
        Matcher::Sinkhorn => match_descriptors(&moving.descriptors, &fixed.descriptors, &params.matching)?.0,
        Matcher::RatioTest { ratio } => ratio_test_matches(&moving.descriptors, &fixed.descriptors, ratio),
    })
}

pub fn pair_correspondences(moving: &FeatureSet, fixed: &FeatureSet, matches: &MatchSet) -> Vec<PointPair> {
    matches
        .pairs
        .iter()
        .map(|m| {
            let (a, b) = (&moving.keypoints[m.i], &fixed.keypoints[m.j]);
            PointPair {
                src: [a.x as f64, a.y as f64],
                dst: [b.x as f64, b.y as f64],
            }
        })
        .collect()
}

/// Composes pairwise estimates. `correspondences[k]` maps section `k + 1`
/// onto section `k`. A pair with too few matches or no plausible fit
/// contributes the identity and is flagged.
pub fn chain_from_correspondences(n_sections: usize, correspondences: &[Vec<PointPair>], params: &ChainParams) -> Result<RegistrationChain> {
    if n_sections == 0 {
        return Err(Error::EmptyInput("sections"));
    }
    if correspondences.len() + 1 != n_sections {
        return Err(Error::ShapeMismatch(format!(
            "{} correspondence sets for {n_sections} sections",
            correspondences.len()
        )));
    }
    let mut chain = RegistrationChain::identity(n_sections);
    for (k, pairs) in correspondences.iter().enumerate() {
        let i = k + 1;
        let mut diag = PairDiagnostics {
            moving: i,
            fixed: k,
            match_count: pairs.len(),
            inlier_count: 0,
            inlier_ratio: 0.0,
            rms_residual: 0.0,
            transform: SimilarityTransform::identity(),
            failed: false,
            failure: None,
            nonrigid_initial_cost: None,
            nonrigid_final_cost: None,
        };
        let estimate = if pairs.len() < params.min_matches {
            Err(Error::TooFewMatches {
                found: pairs.len(),
                required: params.min_matches,
            })
        } else {
            estimate_similarity(pairs, &params.ransac).and_then(|e| {
                if e.inliers.len() < params.min_matches {
                    Err(Error::TooFewMatches {
                        found: e.inliers.len(),
                        required: params.min_matches,
                    })
                } else {
                    Ok(e)
                }
            })
        };
        match estimate {
            Ok(e) => {
                diag.inlier_count = e.inliers.len();
                diag.inlier_ratio = e.inliers.len() as f64 / pairs.len() as f64;
                diag.rms_residual = e.rms_residual;
                diag.transform = e.transform;
            }
            Err(err) => {
                warn!("pair {i} -> {k} failed: {err}");
                diag.failed = true;
                diag.failure = Some(err.to_string());
            }
        }
        chain.transforms[i] = chain.transforms[k].compose(&diag.transform);
        chain.pairs.push(diag);
    }
    Ok(chain)
}

/// Sequential rigid registration: section 0 is the reference and section
/// `i` is aligned to the registered section `i - 1`.
pub fn chain_register(images: &[GrayImage], masks: Option<&[BinaryMask]>, params: &ChainParams) -> Result<RegistrationChain> {
    if images.is_empty() {
        return Err(Error::EmptyInput("sections"));
    }
    let features = extract_section_features(images, masks, params)?;
    let correspondences = (1..images.len())
        .into_par_iter()
        .map(|i| {
            let m = match_pair(&features[i], &features[i - 1], params)?;
            Ok(pair_correspondences(&features[i], &features[i - 1], &m))
        })
        .collect::<Result<Vec<_>>>()?;
    let chain = chain_from_correspondences(images.len(), &correspondences, params)?;
    info!(
        "registered {} sections, {} failed pairs",
        images.len(),
        chain.failed_pairs().len()
    );
    Ok(chain)
}

/// Boundary-driven refinement of every section onto its already refined
/// predecessor, on `canvas`.
pub fn refine_chain_nonrigid(chain: &mut RegistrationChain, masks: &[BinaryMask], canvas: Canvas, params: &NonrigidParams) -> Result<()> {
    if masks.len() != chain.len() {
        return Err(Error::ShapeMismatch(format!("{} masks for {} sections", masks.len(), chain.len())));
    }
    chain.canvas = Some(canvas);
    chain.fields = vec![None; chain.len()];
    let size = (canvas.width, canvas.height);
    let mut previous = boundary_of(&warp_mask(&masks[0], &chain.canvas_transform(0), None, size));
    for i in 1..chain.len() {
        let rigid = chain.canvas_transform(i);
        let moving = boundary_of(&warp_mask(&masks[i], &rigid, None, size));
        match nonrigid_refine(&previous, &moving, params) {
            Ok(r) => {
                if let Some(d) = chain.pairs.get_mut(i - 1) {
                    d.nonrigid_initial_cost = Some(r.initial_cost);
                    d.nonrigid_final_cost = Some(r.final_cost);
                }
                chain.fields[i] = Some(r.field);
            }
            Err(Error::EmptyBoundary) => warn!("section {i}: empty boundary, non-rigid stage skipped"),
            Err(e) => return Err(e),
        }
        previous = boundary_of(&warp_mask(&masks[i], &rigid, chain.fields[i].as_ref(), size));
    }
    Ok(())
}
