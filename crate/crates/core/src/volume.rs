//! Volumetric core assembly and patch extraction.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{create_dir, read_json, read_mask, read_section, write_bytes, write_json, write_mask, write_section};
use crate::raster::{BinaryMask, SectionImage};
use crate::register::{apply_warp, warp_mask, Canvas, RegistrationChain};

/// Canvas sides are padded to this multiple.
pub const CANVAS_MULTIPLE: usize = 256;
pub const PATCH_SIDE: usize = 256;

/// A co-registered stack on one canvas.
#[derive(Debug, Clone)]
pub struct VolumetricCore {
    pub sections: Vec<SectionImage>,
    pub tissue_masks: Vec<BinaryMask>,
    pub mpp: f64,
    pub canvas: Canvas,
    pub chain: RegistrationChain,
}

impl VolumetricCore {
    pub fn depth(&self) -> usize {
        self.sections.len()
    }

    pub fn width(&self) -> usize {
        self.canvas.width
    }

    pub fn height(&self) -> usize {
        self.canvas.height
    }
}

/// Warp every section and its mask onto the reference canvas.
///
/// The chain's own canvas is used when it has one (it must, if it carries
/// non-rigid fields); otherwise the union of the mapped sections is taken.
pub fn assemble_core(raws: &[SectionImage], masks: &[BinaryMask], chain: &RegistrationChain) -> Result<VolumetricCore> {
    if raws.is_empty() {
        return Err(Error::EmptyInput("sections"));
    }
    if raws.len() != chain.len() || masks.len() != raws.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} sections, {} masks, {} chain transforms",
            raws.len(),
            masks.len(),
            chain.len()
        )));
    }
    for (i, (s, m)) in raws.iter().zip(masks).enumerate() {
        if s.width != m.width || s.height != m.height {
            return Err(Error::ShapeMismatch(format!("section {i} and its mask differ in size")));
        }
    }
    let canvas = match chain.canvas {
        Some(c) => c,
        None => {
            let sizes: Vec<_> = raws.iter().map(|s| (s.width, s.height)).collect();
            Canvas::covering(&chain.transforms, &sizes, CANVAS_MULTIPLE)
        }
    };
    let mut chain = chain.clone();
    chain.canvas = Some(canvas);
    let size = (canvas.width, canvas.height);
    let warped: Vec<(SectionImage, BinaryMask)> = (0..raws.len())
        .into_par_iter()
        .map(|i| {
            let t = chain.canvas_transform(i);
            let field = chain.fields[i].as_ref();
            let mut img = apply_warp(&raws[i], &t, field, size);
            img.section_index = i;
            (img, warp_mask(&masks[i], &t, field, size))
        })
        .collect();
    for p in chain.pairs.iter().filter(|p| p.failed) {
        warn!("section {} assembled with an identity pair transform", p.moving);
    }
    let (sections, tissue_masks) = warped.into_iter().unzip();
    Ok(VolumetricCore {
        sections,
        tissue_masks,
        mpp: raws[0].mpp,
        canvas,
        chain,
    })
}

/// How per-section tissue fractions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissueRule {
    #[default]
    DepthMean,
    SectionMin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchParams {
    pub size: usize,
    /// Patches are kept only when their fraction is strictly above this.
    pub min_tissue: f64,
    pub rule: TissueRule,
}

impl Default for PatchParams {
    fn default() -> Self {
        Self {
            size: PATCH_SIDE,
            min_tissue: 0.6,
            rule: TissueRule::DepthMean,
        }
    }
}

/// A `depth x side x side x 3` sub-volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumetricPatch {
    pub origin: [usize; 2],
    pub side: usize,
    pub depth: usize,
    /// Mean over sections of the in-mask pixel fraction.
    pub tissue_fraction: f64,
    pub voxels: Vec<u8>,
}

impl VolumetricPatch {
    pub fn voxel(&self, z: usize, x: usize, y: usize) -> [u8; 3] {
        let i = ((z * self.side + y) * self.side + x) * 3;
        [self.voxels[i], self.voxels[i + 1], self.voxels[i + 2]]
    }
}

/// Grid cell statistics before thresholding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCell {
    pub origin: [usize; 2],
    /// In-mask pixel count per section.
    pub counts: Vec<usize>,
    pub mean_fraction: f64,
    pub min_fraction: f64,
}

impl PatchCell {
    pub fn retained(&self, params: &PatchParams) -> bool {
        let f = match params.rule {
            TissueRule::DepthMean => self.mean_fraction,
            TissueRule::SectionMin => self.min_fraction,
        };
        f > params.min_tissue
    }
}

/// Tissue statistics of every whole grid cell, row-major.
pub fn patch_cells(core: &VolumetricCore, size: usize) -> Vec<PatchCell> {
    if size == 0 || core.depth() == 0 {
        return Vec::new();
    }
    let (gx, gy) = (core.width() / size, core.height() / size);
    let area = (size * size) as f64;
    (0..gx * gy)
        .into_par_iter()
        .map(|c| {
            let origin = [(c % gx) * size, (c / gx) * size];
            let counts: Vec<usize> = core
                .tissue_masks
                .iter()
                .map(|m| {
                    (origin[1]..origin[1] + size)
                        .map(|y| m.bits[y * m.width + origin[0]..y * m.width + origin[0] + size].iter().filter(|&&b| b).count())
                        .sum()
                })
                .collect();
            let total: usize = counts.iter().sum();
            PatchCell {
                origin,
                mean_fraction: total as f64 / (area * counts.len() as f64),
                min_fraction: counts.iter().copied().min().unwrap_or(0) as f64 / area,
                counts,
            }
        })
        .collect()
}

fn crop(core: &VolumetricCore, origin: [usize; 2], size: usize) -> Vec<u8> {
    let mut voxels = Vec::with_capacity(core.depth() * size * size * 3);
    for s in &core.sections {
        for y in origin[1]..origin[1] + size {
            let row = (y * s.width + origin[0]) * 3;
            voxels.extend_from_slice(&s.pixels[row..row + size * 3]);
        }
    }
    voxels
}

/// Non-overlapping patches on the canvas grid whose tissue fraction is
/// strictly above `params.min_tissue`.
pub fn extract_patches(core: &VolumetricCore, params: &PatchParams) -> Vec<VolumetricPatch> {
    patch_cells(core, params.size)
        .into_par_iter()
        .filter(|c| c.retained(params))
        .map(|c| VolumetricPatch {
            origin: c.origin,
            side: params.size,
            depth: core.depth(),
            tissue_fraction: c.mean_fraction,
            voxels: crop(core, c.origin, params.size),
        })
        .collect()
}

/// Blob layout: `u32` depth and `u32` side (little endian), then raw voxels.
pub fn encode_patch(patch: &VolumetricPatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + patch.voxels.len());
    out.extend_from_slice(&(patch.depth as u32).to_le_bytes());
    out.extend_from_slice(&(patch.side as u32).to_le_bytes());
    out.extend_from_slice(&patch.voxels);
    out
}

/// Inverse of [`encode_patch`]; origin and fraction live in the index.
pub fn decode_patch(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    if bytes.len() < 8 {
        return Err("truncated header".into());
    }
    let depth = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let side = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let want = depth * side * side * 3;
    if bytes.len() - 8 != want {
        return Err(format!("expected {want} voxel bytes, found {}", bytes.len() - 8));
    }
    Ok((depth, side, bytes[8..].to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchIndexEntry {
    pub file: String,
    pub origin: [usize; 2],
    pub tissue_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchIndex {
    pub depth: usize,
    pub side: usize,
    pub min_tissue: f64,
    pub rule: TissueRule,
    pub patches: Vec<PatchIndexEntry>,
}

/// Write one blob per patch plus `index.json` into `dir`.
pub fn export_patches(patches: &[VolumetricPatch], params: &PatchParams, depth: usize, dir: &Path) -> Result<PatchIndex> {
    create_dir(dir)?;
    let mut entries = Vec::with_capacity(patches.len());
    for p in patches {
        let file = format!("patch_x{:06}_y{:06}.bin", p.origin[0], p.origin[1]);
        write_bytes(&dir.join(&file), &encode_patch(p))?;
        entries.push(PatchIndexEntry {
            file,
            origin: p.origin,
            tissue_fraction: p.tissue_fraction,
        });
    }
    let index = PatchIndex {
        depth,
        side: params.size,
        min_tissue: params.min_tissue,
        rule: params.rule,
        patches: entries,
    };
    write_json(&index, &dir.join("index.json"))?;
    Ok(index)
}

pub fn read_patch(dir: &Path, entry: &PatchIndexEntry) -> Result<VolumetricPatch> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let (depth, side, voxels) = decode_patch(&bytes).map_err(|reason| Error::Format { path, reason })?;
    Ok(VolumetricPatch {
        origin: entry.origin,
        side,
        depth,
        tissue_fraction: entry.tissue_fraction,
        voxels,
    })
}

/// `core.json` in a core archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreMeta {
    pub depth: usize,
    pub mpp: f64,
    pub canvas: Canvas,
    /// Physical distance between sections; never known from the images.
    pub section_spacing_um: Option<f64>,
    pub sections: Vec<String>,
    pub masks: Vec<String>,
    pub chain: RegistrationChain,
}

pub const CORE_META: &str = "core.json";

pub fn section_file(z: usize) -> String {
    format!("section_{z:03}.png")
}

pub fn mask_file(z: usize) -> String {
    format!("mask_{z:03}.png")
}

pub fn write_core(core: &VolumetricCore, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let results: Vec<Result<()>> = (0..core.depth())
        .into_par_iter()
        .map(|z| {
            write_section(&core.sections[z], &dir.join(section_file(z)))?;
            write_mask(&core.tissue_masks[z], &dir.join(mask_file(z)))
        })
        .collect();
    results.into_iter().collect::<Result<()>>()?;
    let meta = CoreMeta {
        depth: core.depth(),
        mpp: core.mpp,
        canvas: core.canvas,
        section_spacing_um: None,
        sections: (0..core.depth()).map(section_file).collect(),
        masks: (0..core.depth()).map(mask_file).collect(),
        chain: core.chain.clone(),
    };
    let path = dir.join(CORE_META);
    write_json(&meta, &path)?;
    Ok(path)
}

pub fn read_core(dir: &Path) -> Result<VolumetricCore> {
    let meta: CoreMeta = read_json(&dir.join(CORE_META))?;
    if meta.sections.len() != meta.depth || meta.masks.len() != meta.depth {
        return Err(Error::Format {
            path: dir.join(CORE_META),
            reason: format!("depth {} but {} sections and {} masks", meta.depth, meta.sections.len(), meta.masks.len()),
        });
    }
    let mut sections = Vec::with_capacity(meta.depth);
    let mut tissue_masks = Vec::with_capacity(meta.depth);
    for (z, (s, m)) in meta.sections.iter().zip(&meta.masks).enumerate() {
        let mut img = read_section(&dir.join(s), meta.mpp)?;
        img.section_index = z;
        let mask = read_mask(&dir.join(m))?;
        if (img.width, img.height) != (meta.canvas.width, meta.canvas.height) || !mask_fits(&mask, &img) {
            return Err(Error::Format {
                path: dir.join(s),
                reason: "section does not match the canvas".into(),
            });
        }
        sections.push(img);
        tissue_masks.push(mask);
    }
    Ok(VolumetricCore {
        sections,
        tissue_masks,
        mpp: meta.mpp,
        canvas: meta.canvas,
        chain: meta.chain,
    })
}

fn mask_fits(mask: &BinaryMask, img: &SectionImage) -> bool {
    mask.width == img.width && mask.height == img.height
}
