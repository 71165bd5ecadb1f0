//! Per-core manifest tying the z-stack of pyramids together.

use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use volcore::pipeline::{AlignReport, REPORT_FILE};
use volcore::volume::read_core;

use crate::dzi::{build_pyramid, PyramidPaths, TileParams};
use crate::error::{Result, ServiceError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TILES_DIR: &str = "tiles";
pub const PYRAMID_NAME: &str = "image";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationSummary {
    pub pairs: usize,
    pub failed_pairs: Vec<usize>,
    pub mean_inlier_ratio: f64,
    pub rigid_error_um: f64,
    pub final_error_um: f64,
    pub nonrigid: bool,
}

impl From<&AlignReport> for RegistrationSummary {
    fn from(r: &AlignReport) -> Self {
        let n = r.pairs.len();
        Self {
            pairs: n,
            failed_pairs: r.failed_pairs.clone(),
            mean_inlier_ratio: if n == 0 { 0.0 } else { r.pairs.iter().map(|p| p.inlier_ratio).sum::<f64>() / n as f64 },
            rigid_error_um: r.rigid_error.core_error,
            final_error_um: r.final_error.core_error,
            nonrigid: r.nonrigid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreManifest {
    pub core_id: String,
    pub depth: usize,
    pub mpp: f64,
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub overlap: usize,
    /// Descriptor of each z, relative to the core directory.
    pub pyramids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registration: Option<RegistrationSummary>,
}

pub fn z_dir(z: usize) -> String {
    format!("{TILES_DIR}/z{z:03}")
}

pub fn pyramid_paths(core_dir: &Path, z: usize) -> PyramidPaths {
    PyramidPaths::new(&core_dir.join(z_dir(z)), PYRAMID_NAME)
}

pub fn read_manifest(core_dir: &Path) -> Result<CoreManifest> {
    let path = core_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| ServiceError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| ServiceError::Json { path, source })
}

/// Build one pyramid per section of the core archive and write the manifest.
/// The core id is the directory name.
pub fn tile_core(core_dir: &Path, params: &TileParams) -> Result<CoreManifest> {
    let core = read_core(core_dir)?;
    let core_id = core_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "core".into());
    let mut pyramids = Vec::with_capacity(core.depth());
    for (z, section) in core.sections.iter().enumerate() {
        build_pyramid(section, &pyramid_paths(core_dir, z), params)?;
        pyramids.push(format!("{}/{PYRAMID_NAME}.dzi", z_dir(z)));
    }
    let report_path = core_dir.join(REPORT_FILE);
    let registration = if report_path.exists() {
        let report: AlignReport = volcore::io::read_json(&report_path)?;
        Some(RegistrationSummary::from(&report))
    } else {
        None
    };
    let manifest = CoreManifest {
        core_id,
        depth: core.depth(),
        mpp: core.mpp,
        width: core.width(),
        height: core.height(),
        tile_size: params.tile_size,
        overlap: params.overlap,
        pyramids,
        registration,
    };
    volcore::io::write_json(&manifest, &core_dir.join(MANIFEST_FILE))?;
    info!("{}: {} pyramids of {}x{}", manifest.core_id, manifest.depth, manifest.width, manifest.height);
    Ok(manifest)
}
