//! PNG and JSON helpers shared by the archive formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage as LumaImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, SectionImage};

pub fn read_section(path: &Path, mpp: f64) -> Result<SectionImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    SectionImage::new(w as usize, h as usize, img.into_raw(), mpp)
}

pub fn write_section(image: &SectionImage, path: &Path) -> Result<()> {
    let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(image.width as u32, image.height as u32, image.pixels.clone())
        .ok_or_else(|| Error::InvalidImage("pixel buffer does not match dimensions".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Masks are stored as 8-bit gray, 255 for set pixels.
pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let raw = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf: LumaImage = ImageBuffer::<Luma<u8>, _>::from_raw(mask.width as u32, mask.height as u32, raw)
        .ok_or_else(|| Error::InvalidImage("mask buffer does not match dimensions".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(BinaryMask {
        width: w as usize,
        height: h as usize,
        bits: img.into_raw().into_iter().map(|v| v > 127).collect(),
    })
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
