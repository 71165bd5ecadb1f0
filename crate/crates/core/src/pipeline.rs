//! The end-to-end alignment run: stack directory in, core archive and
//! registration report out.
//!
//! A stack directory holds one PNG per section and a `stack.json` listing
//! them in cutting order with their resolution. Synthetic stacks add a
//! `truth.json` with the generating poses and landmark tracks.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{create_dir, read_json, read_section, write_json, write_section};
use crate::metrics::{
    classification_report, mcnemar, quadratic_kappa, registration_error, warp_matches, MetricsReport, RegistrationError,
};
use crate::raster::{default_min_ribbon_area, label_components, morphological_close, tissue_mask, BinaryMask, SectionImage, TissueThresholds};
use crate::register::{
    chain_from_correspondences, extract_section_features, match_pair, pair_correspondences, propagate_to_level,
    refine_chain_nonrigid, Canvas, ChainParams, NonrigidParams, PairDiagnostics, PointPair, RegistrationChain,
};
use crate::synth::{SynthStack, SynthTruth};
use crate::volume::{assemble_core, write_core, CANVAS_MULTIPLE, CORE_META};

pub const STACK_MANIFEST: &str = "stack.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const REPORT_FILE: &str = "registration_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackSection {
    pub image: String,
    pub mpp: f64,
    /// Pyramid level the image was taken from.
    #[serde(default)]
    pub level: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackManifest {
    pub core_id: String,
    pub sections: Vec<StackSection>,
}

pub fn stack_image_file(z: usize) -> String {
    format!("section_{z:03}.png")
}

/// Write a generated stack in the same layout as real input.
pub fn write_synth_stack(stack: &SynthStack, core_id: &str, dir: &Path) -> Result<StackManifest> {
    create_dir(dir)?;
    let manifest = StackManifest {
        core_id: core_id.to_string(),
        sections: (0..stack.sections.len())
            .map(|z| StackSection {
                image: stack_image_file(z),
                mpp: stack.spec.mpp,
                level: 0,
            })
            .collect(),
    };
    stack
        .sections
        .par_iter()
        .zip(&manifest.sections)
        .map(|(s, e)| write_section(s, &dir.join(&e.image)))
        .collect::<Result<()>>()?;
    write_json(&manifest, &dir.join(STACK_MANIFEST))?;
    write_json(&stack.truth(), &dir.join(TRUTH_FILE))?;
    Ok(manifest)
}

pub fn read_stack(dir: &Path) -> Result<(StackManifest, Vec<SectionImage>)> {
    let manifest: StackManifest = read_json(&dir.join(STACK_MANIFEST))?;
    if manifest.sections.is_empty() {
        return Err(Error::EmptyInput("sections"));
    }
    let sections = manifest
        .sections
        .par_iter()
        .enumerate()
        .map(|(z, e)| {
            let mut s = read_section(&dir.join(&e.image), e.mpp)?;
            s.section_index = z;
            s.level = e.level;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, sections))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignParams {
    pub chain: ChainParams,
    pub tissue: TissueThresholds,
    pub close_radius: usize,
    /// Rigid registration runs on sections downsampled by this factor.
    pub rigid_downsample: usize,
    /// `None` stops after the rigid stage.
    pub nonrigid: Option<NonrigidParams>,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            chain: ChainParams::default(),
            tissue: TissueThresholds::default(),
            close_radius: 5,
            rigid_downsample: 1,
            nonrigid: Some(NonrigidParams::default()),
        }
    }
}

/// Closed tissue mask restricted to ribbons above the dust threshold.
pub fn section_mask(section: &SectionImage, tissue: &TissueThresholds, close_radius: usize) -> BinaryMask {
    let closed = morphological_close(&tissue_mask(section, tissue), close_radius);
    label_components(&closed, default_min_ribbon_area(section.width, section.height)).retained()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub core_id: String,
    pub sections: usize,
    pub mpp: f64,
    pub canvas: Canvas,
    pub nonrigid: bool,
    pub pairs: Vec<PairDiagnostics>,
    pub failed_pairs: Vec<usize>,
    /// Matched keypoints pushed through the rigid maps only.
    pub rigid_error: RegistrationError,
    /// Matched keypoints pushed through the final maps.
    pub final_error: RegistrationError,
    pub elapsed_seconds: f64,
}

/// Rigid chain on (optionally downsampled) sections, boundary refinement on
/// the full-resolution masks, then core assembly.
pub fn align_sections(sections: &[SectionImage], params: &AlignParams) -> Result<(RegistrationChain, Vec<BinaryMask>, Vec<Vec<PointPair>>)> {
    if sections.is_empty() {
        return Err(Error::EmptyInput("sections"));
    }
    let factor = params.rigid_downsample.max(1);
    let masks: Vec<BinaryMask> = sections.par_iter().map(|s| section_mask(s, &params.tissue, params.close_radius)).collect();
    for (z, m) in masks.iter().enumerate() {
        if m.is_empty() {
            warn!("section {z}: no tissue found");
        }
    }
    let (gray, small_masks): (Vec<_>, Vec<_>) = if factor == 1 {
        (sections.par_iter().map(|s| s.to_gray()).collect(), masks.clone())
    } else {
        sections
            .par_iter()
            .map(|s| {
                let small = s.downsample(factor);
                let m = section_mask(&small, &params.tissue, (params.close_radius / factor).max(1));
                (small.to_gray(), m)
            })
            .unzip()
    };
    let features = extract_section_features(&gray, Some(&small_masks), &params.chain)?;
    let mut correspondences = (1..sections.len())
        .into_par_iter()
        .map(|i| {
            let m = match_pair(&features[i], &features[i - 1], &params.chain)?;
            Ok(pair_correspondences(&features[i], &features[i - 1], &m))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut chain = chain_from_correspondences(sections.len(), &correspondences, &params.chain)?;
    if factor > 1 {
        let f = factor as f64;
        for t in chain.transforms.iter_mut() {
            *t = propagate_to_level(t, f)?;
        }
        for p in chain.pairs.iter_mut() {
            p.transform = propagate_to_level(&p.transform, f)?;
            p.rms_residual *= f;
        }
        for pairs in correspondences.iter_mut() {
            for pp in pairs.iter_mut() {
                pp.src = [pp.src[0] * f, pp.src[1] * f];
                pp.dst = [pp.dst[0] * f, pp.dst[1] * f];
            }
        }
    }
    let sizes: Vec<_> = sections.iter().map(|s| (s.width, s.height)).collect();
    let canvas = Canvas::covering(&chain.transforms, &sizes, CANVAS_MULTIPLE);
    match &params.nonrigid {
        Some(np) => refine_chain_nonrigid(&mut chain, &masks, canvas, np)?,
        None => chain.canvas = Some(canvas),
    }
    Ok((chain, masks, correspondences))
}

/// Align the stack at `stack_dir` and write the core archive and report to
/// `out_dir`.
pub fn align_stack(stack_dir: &Path, out_dir: &Path, params: &AlignParams) -> Result<AlignReport> {
    let start = Instant::now();
    let (manifest, sections) = read_stack(stack_dir)?;
    let mpp = sections[0].mpp;
    if sections.iter().any(|s| (s.mpp - mpp).abs() > 1e-9 * mpp) {
        warn!("{}: sections differ in mpp; using {mpp}", manifest.core_id);
    }
    let (chain, masks, correspondences) = align_sections(&sections, params)?;
    let core = assemble_core(&sections, &masks, &chain)?;
    write_core(&core, out_dir)?;
    let rigid = warp_matches(&core.chain, &correspondences, true)?;
    let full = warp_matches(&core.chain, &correspondences, false)?;
    let report = AlignReport {
        core_id: manifest.core_id.clone(),
        sections: sections.len(),
        mpp,
        canvas: core.canvas,
        nonrigid: params.nonrigid.is_some(),
        pairs: core.chain.pairs.clone(),
        failed_pairs: core.chain.failed_pairs(),
        rigid_error: registration_error(&rigid, mpp)?,
        final_error: registration_error(&full, mpp)?,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&report, &out_dir.join(REPORT_FILE))?;
    info!(
        "{}: {} sections, core error {:.2} µm rigid, {:.2} µm final",
        report.core_id, report.sections, report.rigid_error.core_error, report.final_error.core_error
    );
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkError {
    pub mean_px: f64,
    pub max_px: f64,
    pub mean_um: f64,
    pub rigid_mean_px: f64,
}

/// Distance between each landmark's mapped position in section `i` and its
/// mapped position in the reference, averaged over landmarks and sections.
pub fn landmark_error(chain: &RegistrationChain, landmarks: &[Vec<[f64; 2]>], mpp: f64) -> Result<LandmarkError> {
    if landmarks.is_empty() || chain.len() < 2 {
        return Err(Error::EmptyInput("landmark tracks"));
    }
    let (mut sum, mut sum_rigid, mut max, mut n) = (0.0, 0.0, 0.0f64, 0usize);
    for track in landmarks {
        if track.len() != chain.len() {
            return Err(Error::ShapeMismatch(format!("track of {} points for {} sections", track.len(), chain.len())));
        }
        let (r, rr) = (chain.map_point(0, track[0]), chain.map_point_rigid(0, track[0]));
        for (i, &p) in track.iter().enumerate().skip(1) {
            let q = chain.map_point(i, p);
            let qr = chain.map_point_rigid(i, p);
            let d = (q[0] - r[0]).hypot(q[1] - r[1]);
            sum += d;
            max = max.max(d);
            sum_rigid += (qr[0] - rr[0]).hypot(qr[1] - rr[1]);
            n += 1;
        }
    }
    let mean_px = sum / n as f64;
    Ok(LandmarkError {
        mean_px,
        max_px: max,
        mean_um: mean_px * mpp,
        rigid_mean_px: sum_rigid / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingPair {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub categories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedOutcomes {
    pub first: Vec<bool>,
    pub second: Vec<bool>,
}

/// Inputs of an evaluation run; every part is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalInput {
    /// Core archive written by [`align_stack`].
    pub core_dir: Option<PathBuf>,
    /// `truth.json` of a synthetic stack.
    pub truth: Option<PathBuf>,
    /// `samples x classes` probabilities.
    pub scores: Option<Vec<Vec<f64>>>,
    pub labels: Option<Vec<usize>>,
    pub ratings: Option<RatingPair>,
    pub paired: Option<PairedOutcomes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rigid_registration: Option<RegistrationError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<LandmarkError>,
}

pub fn evaluate(input: &EvalInput) -> Result<EvalReport> {
    let mut out = EvalReport {
        metrics: MetricsReport {
            classification: None,
            kappa: None,
            mcnemar: None,
            registration: None,
        },
        rigid_registration: None,
        landmarks: None,
    };
    if let Some(dir) = &input.core_dir {
        let report: AlignReport = read_json(&dir.join(REPORT_FILE))?;
        out.metrics.registration = Some(report.final_error.clone());
        out.rigid_registration = Some(report.rigid_error.clone());
        if let Some(truth_path) = &input.truth {
            #[derive(Deserialize)]
            struct Meta {
                chain: RegistrationChain,
            }
            let meta: Meta = read_json(&dir.join(CORE_META))?;
            let truth: SynthTruth = read_json(truth_path)?;
            out.landmarks = Some(landmark_error(&meta.chain, &truth.landmarks, report.mpp)?);
        }
    } else if input.truth.is_some() {
        return Err(Error::InvalidArgument("a truth file needs a core directory".into()));
    }
    match (&input.scores, &input.labels) {
        (Some(rows), Some(labels)) => {
            let c = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != c) {
                return Err(Error::ShapeMismatch("score rows differ in length".into()));
            }
            let scores = Array2::from_shape_vec((rows.len(), c), rows.concat()).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            out.metrics.classification = Some(classification_report(&scores, labels)?);
        }
        (None, None) => {}
        _ => return Err(Error::InvalidArgument("scores and labels must be given together".into())),
    }
    if let Some(r) = &input.ratings {
        out.metrics.kappa = Some(quadratic_kappa(&r.a, &r.b, r.categories)?);
    }
    if let Some(p) = &input.paired {
        out.metrics.mcnemar = Some(mcnemar(&p.first, &p.second)?);
    }
    Ok(out)
}
