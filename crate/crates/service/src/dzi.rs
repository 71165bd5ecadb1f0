//! Deep Zoom pyramids: an XML descriptor plus `{level}/{col}_{row}.jpg`.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageEncoder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use volcore::SectionImage;

use crate::error::{Result, ServiceError};

pub const DZI_NAMESPACE: &str = "http://schemas.microsoft.com/deepzoom/2008";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileParams {
    pub tile_size: usize,
    pub overlap: usize,
    pub quality: u8,
}

impl Default for TileParams {
    fn default() -> Self {
        Self {
            tile_size: 254,
            overlap: 1,
            quality: 90,
        }
    }
}

/// What a `.dzi` file says about its pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DziDescriptor {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub overlap: usize,
}

impl DziDescriptor {
    /// Index of the full-resolution level: `ceil(log2(max(width, height)))`.
    pub fn max_level(&self) -> u32 {
        let m = self.width.max(self.height).max(1);
        usize::BITS - (m - 1).leading_zeros()
    }

    pub fn level_size(&self, level: u32) -> (usize, usize) {
        let shift = self.max_level() - level;
        (div_ceil_pow2(self.width, shift), div_ceil_pow2(self.height, shift))
    }

    pub fn tile_grid(&self, level: u32) -> (usize, usize) {
        let (w, h) = self.level_size(level);
        (w.div_ceil(self.tile_size).max(1), h.div_ceil(self.tile_size).max(1))
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` of tile `(col, row)`, overlap included.
    pub fn tile_rect(&self, level: u32, col: usize, row: usize) -> (usize, usize, usize, usize) {
        let (w, h) = self.level_size(level);
        let span = |i: usize, len: usize| {
            let start = (i * self.tile_size).saturating_sub(if i > 0 { self.overlap } else { 0 });
            let end = ((i + 1) * self.tile_size + self.overlap).min(len);
            (start, end)
        };
        let (x0, x1) = span(col, w);
        let (y0, y1) = span(row, h);
        (x0, y0, x1, y1)
    }

    /// Every `(level, col, row)` the descriptor implies.
    pub fn tiles(&self) -> Vec<(u32, usize, usize)> {
        let mut out = Vec::new();
        for level in 0..=self.max_level() {
            let (cols, rows) = self.tile_grid(level);
            for row in 0..rows {
                for col in 0..cols {
                    out.push((level, col, row));
                }
            }
        }
        out
    }

    pub fn to_xml(&self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<Image xmlns=\"{DZI_NAMESPACE}\" Format=\"jpg\" Overlap=\"{}\" TileSize=\"{}\">\n  <Size Width=\"{}\" Height=\"{}\"/>\n</Image>\n",
            self.overlap, self.tile_size, self.width, self.height
        )
    }

    /// Reads the attributes this crate writes; anything else is ignored.
    pub fn parse(xml: &str) -> Result<Self> {
        let attr = |name: &str| -> Result<usize> {
            let key = format!("{name}=\"");
            let start = xml.find(&key).ok_or_else(|| ServiceError::Descriptor(format!("missing {name}")))? + key.len();
            let len = xml[start..].find('"').ok_or_else(|| ServiceError::Descriptor(format!("unterminated {name}")))?;
            xml[start..start + len]
                .parse()
                .map_err(|_| ServiceError::Descriptor(format!("{name} is not an integer")))
        };
        Ok(Self {
            width: attr("Width")?,
            height: attr("Height")?,
            tile_size: attr("TileSize")?,
            overlap: attr("Overlap")?,
        })
    }
}

fn div_ceil_pow2(v: usize, shift: u32) -> usize {
    if shift >= usize::BITS {
        return 1;
    }
    v.div_ceil(1 << shift).max(1)
}

/// Half-size image by 2x2 box averaging; odd edges average what exists.
pub fn box_downsample(img: &SectionImage) -> SectionImage {
    let (w, h) = (img.width.div_ceil(2).max(1), img.height.div_ceil(2).max(1));
    let mut pixels = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let mut sum = [0u32; 3];
            let mut n = 0u32;
            for sy in 2 * y..(2 * y + 2).min(img.height) {
                for sx in 2 * x..(2 * x + 2).min(img.width) {
                    let p = img.rgb(sx, sy);
                    for c in 0..3 {
                        sum[c] += p[c] as u32;
                    }
                    n += 1;
                }
            }
            for c in 0..3 {
                pixels[(y * w + x) * 3 + c] = ((sum[c] + n / 2) / n) as u8;
            }
        }
    }
    SectionImage {
        width: w,
        height: h,
        pixels,
        ..img.clone()
    }
}

pub fn crop(img: &SectionImage, rect: (usize, usize, usize, usize)) -> SectionImage {
    let (x0, y0, x1, y1) = rect;
    let w = x1 - x0;
    let mut pixels = Vec::with_capacity(w * (y1 - y0) * 3);
    for y in y0..y1 {
        pixels.extend_from_slice(&img.pixels[(y * img.width + x0) * 3..(y * img.width + x1) * 3]);
    }
    SectionImage {
        width: w,
        height: y1 - y0,
        pixels,
        ..img.clone()
    }
}

pub fn encode_jpeg(img: &SectionImage, quality: u8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality)
        .write_image(&img.pixels, img.width as u32, img.height as u32, ExtendedColorType::Rgb8)
        .map_err(|e| ServiceError::Image(e.to_string()))?;
    Ok(out)
}

/// Paths of one pyramid: `{dir}/{name}.dzi` and `{dir}/{name}_files/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidPaths {
    pub descriptor: PathBuf,
    pub files: PathBuf,
}

impl PyramidPaths {
    pub fn new(dir: &Path, name: &str) -> Self {
        Self {
            descriptor: dir.join(format!("{name}.dzi")),
            files: dir.join(format!("{name}_files")),
        }
    }

    pub fn tile(&self, level: u32, col: usize, row: usize) -> PathBuf {
        self.files.join(level.to_string()).join(format!("{col}_{row}.jpg"))
    }
}

/// Write the full pyramid of `image`.
pub fn build_pyramid(image: &SectionImage, paths: &PyramidPaths, params: &TileParams) -> Result<DziDescriptor> {
    if params.tile_size == 0 {
        return Err(ServiceError::Descriptor("tile size must be positive".into()));
    }
    let desc = DziDescriptor {
        width: image.width,
        height: image.height,
        tile_size: params.tile_size,
        overlap: params.overlap,
    };
    let top = desc.max_level();
    let mut level_image = image.clone();
    for level in (0..=top).rev() {
        debug_assert_eq!((level_image.width, level_image.height), desc.level_size(level));
        let dir = paths.files.join(level.to_string());
        fs::create_dir_all(&dir).map_err(|e| ServiceError::io(&dir, e))?;
        let (cols, rows) = desc.tile_grid(level);
        (0..cols * rows).into_par_iter().try_for_each(|k| {
            let (col, row) = (k % cols, k / cols);
            let tile = crop(&level_image, desc.tile_rect(level, col, row));
            let bytes = encode_jpeg(&tile, params.quality)?;
            let path = paths.tile(level, col, row);
            fs::write(&path, bytes).map_err(|e| ServiceError::io(&path, e))
        })?;
        if level > 0 {
            level_image = box_downsample(&level_image);
        }
    }
    if let Some(parent) = paths.descriptor.parent() {
        fs::create_dir_all(parent).map_err(|e| ServiceError::io(parent, e))?;
    }
    fs::write(&paths.descriptor, desc.to_xml()).map_err(|e| ServiceError::io(&paths.descriptor, e))?;
    Ok(desc)
}

pub fn decode_jpeg(bytes: &[u8]) -> Result<SectionImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Jpeg)
        .map_err(|e| ServiceError::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    SectionImage::new(w as usize, h as usize, img.into_raw(), 1.0).map_err(ServiceError::Core)
}
