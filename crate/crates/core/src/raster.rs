//! Section rasters, tissue masking and binary morphology.
//!
//! Geometric coordinates used elsewhere in the crate are continuous: pixel
//! `(i, j)` covers `[i, i + 1) x [j, j + 1)` and its centre sits at
//! `(i + 0.5, j + 0.5)`. The rasters here are indexed by integer pixel.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value stored in a [`ScalarField`] produced from an empty mask.
pub const DISTANCE_SENTINEL: f64 = f64::INFINITY;

/// One RGB serial-section raster.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, 3 bytes per pixel.
    pub pixels: Vec<u8>,
    /// Microns per pixel.
    pub mpp: f64,
    /// Pyramid level index.
    pub level: u32,
    /// Position in the z-stack.
    pub section_index: usize,
}

impl SectionImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, mpp: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("{width}x{height} raster")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} bytes for {width}x{height} RGB, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        if !(mpp > 0.0 && mpp.is_finite()) {
            return Err(Error::InvalidImage(format!("mpp must be positive, got {mpp}")));
        }
        Ok(Self {
            width,
            height,
            pixels,
            mpp,
            level: 0,
            section_index: 0,
        })
    }

    /// A white (glass) raster.
    pub fn blank(width: usize, height: usize, mpp: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![255; width * height * 3],
            mpp,
            level: 0,
            section_index: 0,
        }
    }

    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luma with weights 0.299/0.587/0.114, scaled to `[0, 1]`.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .pixels
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Box-filter downsample by an integer factor. Partial edge blocks are
    /// averaged over the pixels they contain. The result's `mpp` is scaled.
    pub fn downsample(&self, factor: usize) -> SectionImage {
        if factor <= 1 {
            return self.clone();
        }
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        let mut pixels = vec![0u8; w * h * 3];
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = [0u32; 3];
                let mut n = 0u32;
                for y in oy * factor..((oy + 1) * factor).min(self.height) {
                    for x in ox * factor..((ox + 1) * factor).min(self.width) {
                        let p = self.rgb(x, y);
                        acc[0] += p[0] as u32;
                        acc[1] += p[1] as u32;
                        acc[2] += p[2] as u32;
                        n += 1;
                    }
                }
                let o = (oy * w + ox) * 3;
                for c in 0..3 {
                    pixels[o + c] = ((acc[c] + n / 2) / n) as u8;
                }
            }
        }
        SectionImage {
            width: w,
            height: h,
            pixels,
            mpp: self.mpp * factor as f64,
            level: self.level + factor.trailing_zeros(),
            section_index: self.section_index,
        }
    }
}

/// Single-channel float raster, intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} gray raster with {} samples",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Rotate 90 degrees: output `(x', y') = (y, width - 1 - x)`.
    pub fn rotate90(&self) -> GrayImage {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = (y, w - 1 - x);
                data[ny * h + nx] = self.data[y * w + x];
            }
        }
        GrayImage {
            width: h,
            height: w,
            data,
        }
    }
}

/// Per-pixel boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// `get` with out-of-frame reads returning `false`.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn difference(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && !*b).collect(),
        }
    }

    /// Bounding box `(x0, y0, x1, y1)` with exclusive upper corner.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bb
    }

    /// Pixel indices `(x, y)` of all set pixels in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        let mut pts = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    pts.push((x, y));
                }
            }
        }
        pts
    }
}

/// Real-valued raster (distance transforms).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarField {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hsv {
    pub h: f32,
    pub s: f32,
    pub v: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HsvImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Hsv>,
}

/// Standard hexcone RGB to HSV for one pixel.
pub fn rgb_to_hsv_pixel(rgb: [u8; 3]) -> Hsv {
    let r = rgb[0] as f32 / 255.0;
    let g = rgb[1] as f32 / 255.0;
    let b = rgb[2] as f32 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let h = if h >= 360.0 { h - 360.0 } else { h };
    Hsv { h, s, v }
}

pub fn hsv_to_rgb_pixel(hsv: Hsv) -> [u8; 3] {
    let c = hsv.v * hsv.s;
    let hp = hsv.h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = hsv.v - c;
    let q = |u: f32| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

pub fn rgb_to_hsv(image: &SectionImage) -> HsvImage {
    HsvImage {
        width: image.width,
        height: image.height,
        data: image
            .pixels
            .chunks_exact(3)
            .map(|p| rgb_to_hsv_pixel([p[0], p[1], p[2]]))
            .collect(),
    }
}

/// Hue window and saturation floor for tissue detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueThresholds {
    /// Lower hue bound in degrees (inclusive).
    pub hue_lo: f32,
    /// Upper hue bound in degrees (exclusive). May be below `hue_lo`, in
    /// which case the window wraps through 0.
    pub hue_hi: f32,
    pub sat_min: f32,
}

impl Default for TissueThresholds {
    // Eosin/hematoxylin pinks and purples: [270, 360) u [0, 30).
    fn default() -> Self {
        Self {
            hue_lo: 270.0,
            hue_hi: 30.0,
            sat_min: 0.05,
        }
    }
}

impl TissueThresholds {
    pub fn hue_in_window(&self, h: f32) -> bool {
        if self.hue_hi - self.hue_lo >= 360.0 {
            return true;
        }
        let lo = self.hue_lo.rem_euclid(360.0);
        let hi = self.hue_hi.rem_euclid(360.0);
        if lo < hi {
            h >= lo && h < hi
        } else if lo > hi {
            h >= lo || h < hi
        } else {
            false
        }
    }
}

pub fn tissue_mask(image: &SectionImage, t: &TissueThresholds) -> BinaryMask {
    let bits = image
        .pixels
        .chunks_exact(3)
        .map(|p| {
            let hsv = rgb_to_hsv_pixel([p[0], p[1], p[2]]);
            hsv.s >= t.sat_min && t.hue_in_window(hsv.h)
        })
        .collect();
    BinaryMask {
        width: image.width,
        height: image.height,
        bits,
    }
}

const INF: f64 = 1e30;

/// Felzenszwalb-Huttenlocher 1D squared distance transform of `f`, in place.
fn edt_1d(f: &mut [f64], v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        if f[q] >= INF {
            continue;
        }
        if f[v[k]] >= INF {
            v[k] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    if f[v[0]] >= INF {
        out[..n].fill(INF);
        return;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest pixel for
/// which `seed` is true, by separable column then row passes. Pixels with no
/// seed in the frame get `>= 1e30`.
pub fn squared_distance_to(width: usize, height: usize, seed: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..width * height).map(|i| if seed(i) { 0.0 } else { INF }).collect();
    let n = width.max(height);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&mut f[..height], &mut v, &mut z, &mut out[..height]);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        f[..width].copy_from_slice(row);
        edt_1d(&mut f[..width], &mut v, &mut z, &mut out[..width]);
        row.copy_from_slice(&out[..width]);
    }
    grid
}

fn pad(mask: &BinaryMask, r: usize) -> BinaryMask {
    let (w, h) = (mask.width + 2 * r, mask.height + 2 * r);
    let mut out = BinaryMask::empty(w, h);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                out.set(x + r, y + r, true);
            }
        }
    }
    out
}

fn crop(mask: &BinaryMask, r: usize, width: usize, height: usize) -> BinaryMask {
    BinaryMask::from_fn(width, height, |x, y| mask.get(x + r, y + r))
}

/// Dilation by the discrete disk `{(dx, dy) : dx^2 + dy^2 <= r^2}`; the frame
/// outside the raster counts as unset.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let d2 = squared_distance_to(mask.width, mask.height, |i| mask.bits[i]);
    let r2 = (radius * radius) as f64;
    BinaryMask {
        width: mask.width,
        height: mask.height,
        bits: d2.into_iter().map(|d| d <= r2).collect(),
    }
}

/// Erosion by the same disk; the frame outside the raster counts as unset.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let padded = pad(mask, radius);
    let d2 = squared_distance_to(padded.width, padded.height, |i| !padded.bits[i]);
    let r2 = (radius * radius) as f64;
    let eroded = BinaryMask {
        width: padded.width,
        height: padded.height,
        bits: d2.into_iter().map(|d| d > r2).collect(),
    };
    crop(&eroded, radius, mask.width, mask.height)
}

/// Closing (dilation then erosion) with a disk, evaluated as on an unbounded
/// plane and cropped back, so the result is extensive and idempotent.
pub fn morphological_close(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let padded = pad(mask, radius);
    let closed = erode_inside(&dilate(&padded, radius), radius);
    crop(&closed, radius, mask.width, mask.height)
}

// Erosion where the outside of the frame does not constrain the result; only
// valid for pixels at least `radius` from the frame edge.
fn erode_inside(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let d2 = squared_distance_to(mask.width, mask.height, |i| !mask.bits[i]);
    let r2 = (radius * radius) as f64;
    BinaryMask {
        width: mask.width,
        height: mask.height,
        bits: d2.into_iter().map(|d| d > r2).collect(),
    }
}

/// One connected tissue ribbon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RibbonLabel {
    pub label_id: u32,
    /// `(x0, y0, x1, y1)`, upper corner exclusive.
    pub bounding_box: (usize, usize, usize, usize),
    pub pixel_count: usize,
}

/// Component labelling of a mask; `map` holds the ribbon id per pixel or 0.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub map: Vec<u32>,
    pub ribbons: Vec<RibbonLabel>,
}

impl LabelMap {
    pub fn mask_of(&self, label_id: u32) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.map.iter().map(|&l| l == label_id).collect(),
        }
    }

    /// Union of all retained ribbons.
    pub fn retained(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.map.iter().map(|&l| l != 0).collect(),
        }
    }
}

/// 8-connected components with at least `min_area` pixels, numbered from 1 in
/// top-to-bottom, left-to-right order of their bounding-box origin.
pub fn label_components(mask: &BinaryMask, min_area: usize) -> LabelMap {
    let (w, h) = (mask.width, mask.height);
    let mut provisional = vec![0u32; w * h];
    let mut comps: Vec<(RibbonLabel, Vec<usize>)> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || provisional[start] != 0 {
            continue;
        }
        let id = comps.len() as u32 + 1;
        provisional[start] = id;
        queue.push_back(start);
        let mut members = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if mask.get_signed(nx, ny) {
                        let j = ny as usize * w + nx as usize;
                        if provisional[j] == 0 {
                            provisional[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        let count = members.len();
        comps.push((
            RibbonLabel {
                label_id: id,
                bounding_box: (x0, y0, x1, y1),
                pixel_count: count,
            },
            members,
        ));
    }
    comps.retain(|(r, _)| r.pixel_count >= min_area.max(1));
    comps.sort_by_key(|(r, _)| (r.bounding_box.1, r.bounding_box.0));
    let mut map = vec![0u32; w * h];
    let mut ribbons = Vec::with_capacity(comps.len());
    for (k, (mut r, members)) in comps.into_iter().enumerate() {
        r.label_id = k as u32 + 1;
        for i in members {
            map[i] = r.label_id;
        }
        ribbons.push(r);
    }
    LabelMap {
        width: w,
        height: h,
        map,
        ribbons,
    }
}

pub fn label_ribbons(mask: &BinaryMask, min_area: usize) -> Vec<RibbonLabel> {
    label_components(mask, min_area).ribbons
}

/// Default minimum ribbon area: 0.1% of the frame.
pub fn default_min_ribbon_area(width: usize, height: usize) -> usize {
    (width * height).div_ceil(1000)
}

/// Mask pixels with at least one 4-neighbour unset or outside the frame.
pub fn boundary_of(mask: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(mask.width, mask.height, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        let (x, y) = (x as isize, y as isize);
        !(mask.get_signed(x - 1, y)
            && mask.get_signed(x + 1, y)
            && mask.get_signed(x, y - 1)
            && mask.get_signed(x, y + 1))
    })
}

/// Euclidean distance to the nearest boundary pixel of `mask`, negative
/// strictly inside, zero on [`boundary_of`], positive outside. An empty mask
/// yields [`DISTANCE_SENTINEL`] everywhere.
pub fn signed_distance(mask: &BinaryMask) -> ScalarField {
    let boundary = boundary_of(mask);
    let (w, h) = (mask.width, mask.height);
    if boundary.is_empty() {
        return ScalarField {
            width: w,
            height: h,
            data: vec![DISTANCE_SENTINEL; w * h],
        };
    }
    let d2 = squared_distance_to(w, h, |i| boundary.bits[i]);
    let data = d2
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let d = d.sqrt();
            if mask.bits[i] {
                -d
            } else {
                d
            }
        })
        .collect();
    ScalarField { width: w, height: h, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disk(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            dx * dx + dy * dy <= r * r
        })
    }

    fn brute_dilate(m: &BinaryMask, r: i64) -> BinaryMask {
        BinaryMask::from_fn(m.width, m.height, |x, y| {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy <= r * r && m.get_signed(x as isize + dx as isize, y as isize + dy as isize) {
                        return true;
                    }
                }
            }
            false
        })
    }

    // Closing on an unbounded plane: dilate onto a padded frame, then erode.
    fn brute_close(m: &BinaryMask, r: i64) -> BinaryMask {
        let ru = r as usize;
        let padded = pad(m, ru);
        let dil = brute_dilate(&padded, r);
        BinaryMask::from_fn(m.width, m.height, |x, y| {
            let (px, py) = ((x + ru) as i64, (y + ru) as i64);
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy <= r * r && !dil.get_signed((px + dx) as isize, (py + dy) as isize) {
                        return false;
                    }
                }
            }
            true
        })
    }

    #[test]
    fn hsv_primaries_and_gray() {
        let red = rgb_to_hsv_pixel([255, 0, 0]);
        assert_eq!((red.h, red.s, red.v), (0.0, 1.0, 1.0));
        let gray = rgb_to_hsv_pixel([128, 128, 128]);
        assert_eq!(gray.s, 0.0);
        assert!((gray.v - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn hsv_matches_reference_value() {
        // Reference hexcone conversion (Python colorsys) of (180, 90, 160):
        // h = 0.870370370... of a turn, s = 0.5, v = 180/255.
        let hsv = rgb_to_hsv_pixel([180, 90, 160]);
        assert!((hsv.h - 313.333_33).abs() < 1e-3, "{hsv:?}");
        assert!((hsv.s - 0.5).abs() < 1e-6);
        assert!((hsv.v - 0.705_882_35).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn hsv_round_trip(r in 0u8..=255, g in 0u8..=255, b in 0u8..=255) {
            let back = hsv_to_rgb_pixel(rgb_to_hsv_pixel([r, g, b]));
            for (a, b) in back.iter().zip([r, g, b]) {
                prop_assert!((*a as i32 - b as i32).abs() <= 1);
            }
        }
    }

    #[test]
    fn white_page_has_no_tissue() {
        let img = SectionImage::blank(40, 30, 0.5);
        assert!(tissue_mask(&img, &TissueThresholds::default()).is_empty());
    }

    #[test]
    fn full_circle_window_selects_everything() {
        let img = SectionImage::blank(10, 10, 0.5);
        let t = TissueThresholds {
            hue_lo: 0.0,
            hue_hi: 360.0,
            sat_min: 0.0,
        };
        assert_eq!(tissue_mask(&img, &t).count(), 100);
    }

    #[test]
    fn magenta_disk_is_recovered() {
        let (w, h) = (120, 100);
        let truth = disk(w, h, 60.0, 50.0, 30.0);
        let mut img = SectionImage::blank(w, h, 0.5);
        for (x, y) in truth.points() {
            img.set_rgb(x, y, [200, 60, 190]);
        }
        let m = tissue_mask(&img, &TissueThresholds::default());
        let diff = m.bits.iter().zip(&truth.bits).filter(|(a, b)| a != b).count();
        assert!((diff as f64) <= 0.01 * truth.count() as f64);
    }

    #[test]
    fn close_radius_zero_and_empty() {
        let m = disk(30, 30, 15.0, 15.0, 7.0);
        assert_eq!(morphological_close(&m, 0), m);
        let e = BinaryMask::empty(20, 20);
        assert_eq!(morphological_close(&e, 4), e);
    }

    #[test]
    fn close_fills_crack_and_matches_brute_force() {
        let mut m = disk(48, 48, 24.0, 24.0, 15.0);
        for y in 0..48 {
            m.set(24, y, false);
        }
        let closed = morphological_close(&m, 3);
        let whole = disk(48, 48, 24.0, 24.0, 15.0);
        assert!((11..38).all(|y| closed.get(24, y) == whole.get(24, y)));
        assert_eq!(closed, brute_close(&m, 3));
    }

    #[test]
    fn dilate_matches_brute_force() {
        let m = BinaryMask::from_fn(25, 19, |x, y| (x * 7 + y * 3) % 11 == 0 && x > 3);
        for r in 1..5 {
            assert_eq!(dilate(&m, r), brute_dilate(&m, r as i64));
        }
    }

    proptest! {
        #[test]
        fn close_is_idempotent(bits in proptest::collection::vec(any::<bool>(), 16 * 14), r in 1usize..4) {
            let m = BinaryMask { width: 16, height: 14, bits };
            let once = morphological_close(&m, r);
            prop_assert_eq!(morphological_close(&once, r), once.clone());
            prop_assert_eq!(once, brute_close(&m, r as i64));
        }
    }

    fn flood_fill_components(m: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
        let mut seen = vec![false; m.bits.len()];
        let mut out = Vec::new();
        for (x, y) in m.points() {
            if seen[y * m.width + x] {
                continue;
            }
            let mut stack = vec![(x, y)];
            seen[y * m.width + x] = true;
            let mut comp = Vec::new();
            while let Some((cx, cy)) = stack.pop() {
                comp.push((cx, cy));
                for (dx, dy) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
                    let (nx, ny) = (cx as isize + dx, cy as isize + dy);
                    if m.get_signed(nx, ny) && !seen[ny as usize * m.width + nx as usize] {
                        seen[ny as usize * m.width + nx as usize] = true;
                        stack.push((nx as usize, ny as usize));
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    #[test]
    fn two_disks_two_ribbons() {
        let a = disk(100, 60, 25.0, 40.0, 10.0);
        let b = disk(100, 60, 70.0, 20.0, 8.0);
        let m = a.union(&b);
        let labels = label_ribbons(&m, 10);
        assert_eq!(labels.len(), 2);
        // top-to-bottom ordering: b (y0 = 12) before a (y0 = 30).
        assert_eq!(labels[0].bounding_box, b.bounding_box().unwrap());
        assert_eq!(labels[1].bounding_box, a.bounding_box().unwrap());
        assert_eq!(labels[0].pixel_count, b.count());
        let oracle = flood_fill_components(&m);
        assert_eq!(oracle.len(), 2);
    }

    #[test]
    fn ribbon_edge_cases() {
        assert!(label_ribbons(&BinaryMask::empty(10, 10), 1).is_empty());
        let full = label_ribbons(&BinaryMask::full(12, 9), 1);
        assert_eq!(full.len(), 1);
        assert_eq!(full[0].bounding_box, (0, 0, 12, 9));
        assert_eq!(full[0].pixel_count, 108);
    }

    proptest! {
        #[test]
        fn labels_partition_mask(bits in proptest::collection::vec(any::<bool>(), 20 * 15), min_area in 1usize..6) {
            let m = BinaryMask { width: 20, height: 15, bits };
            let lm = label_components(&m, min_area);
            let oracle = flood_fill_components(&m);
            let kept: usize = oracle.iter().filter(|c| c.len() >= min_area).map(|c| c.len()).sum();
            prop_assert_eq!(lm.retained().count(), kept);
            prop_assert_eq!(lm.ribbons.len(), oracle.iter().filter(|c| c.len() >= min_area).count());
            for r in &lm.ribbons {
                prop_assert_eq!(lm.mask_of(r.label_id).count(), r.pixel_count);
            }
            prop_assert!(lm.retained().difference(&m).is_empty());
        }
    }

    #[test]
    fn disk_boundary_is_thin_ring() {
        let m = disk(41, 41, 20.0, 20.0, 10.0);
        let b = boundary_of(&m);
        // Per-pixel neighbourhood oracle.
        for y in 0..41 {
            for x in 0..41 {
                let (xi, yi) = (x as isize, y as isize);
                let expect = m.get(x, y)
                    && [(1, 0), (-1, 0), (0, 1), (0, -1)]
                        .iter()
                        .any(|(dx, dy)| !m.get_signed(xi + dx, yi + dy));
                assert_eq!(b.get(x, y), expect);
            }
        }
        assert!(!b.get(20, 20));
        // Removing the ring exposes the next inner ring.
        let inner = m.difference(&b);
        let next = boundary_of(&inner);
        assert!(next.difference(&inner).is_empty());
        assert!(next.bits.iter().zip(&b.bits).all(|(n, o)| !(*n && *o)));
    }

    #[test]
    fn boundary_edge_cases() {
        let mut single = BinaryMask::empty(5, 5);
        single.set(2, 2, true);
        assert_eq!(boundary_of(&single), single);
        assert!(boundary_of(&BinaryMask::empty(5, 5)).is_empty());
    }

    #[test]
    fn signed_distance_disk() {
        let m = disk(41, 41, 20.0, 20.0, 10.0);
        let sd = signed_distance(&m);
        let b = boundary_of(&m);
        let ring = b.points();
        for y in 0..41 {
            for x in 0..41 {
                // Brute force over all boundary pixels.
                let d = ring
                    .iter()
                    .map(|&(bx, by)| ((bx as f64 - x as f64).powi(2) + (by as f64 - y as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                let expect = if m.get(x, y) { -d } else { d };
                assert!((sd.get(x, y) - expect).abs() < 1e-9, "({x},{y})");
            }
        }
        assert!((sd.get(20, 20) + 10.0).abs() <= 1.0);
        for (x, y) in ring {
            assert_eq!(sd.get(x, y), 0.0);
        }
    }

    #[test]
    fn signed_distance_empty_is_sentinel() {
        let sd = signed_distance(&BinaryMask::empty(6, 4));
        assert!(sd.data.iter().all(|&d| d == DISTANCE_SENTINEL));
    }

    proptest! {
        #[test]
        fn signed_distance_sign_changes_at_boundary(bits in proptest::collection::vec(any::<bool>(), 12 * 12)) {
            let m = BinaryMask { width: 12, height: 12, bits };
            prop_assume!(!m.is_empty());
            let sd = signed_distance(&m);
            let b = boundary_of(&m);
            for i in 0..m.bits.len() {
                if b.bits[i] {
                    prop_assert_eq!(sd.data[i], 0.0);
                } else if m.bits[i] {
                    prop_assert!(sd.data[i] < 0.0);
                } else {
                    prop_assert!(sd.data[i] > 0.0);
                }
            }
        }
    }

    #[test]
    fn downsample_averages_blocks() {
        let mut img = SectionImage::blank(5, 3, 0.5);
        img.set_rgb(0, 0, [0, 0, 0]);
        let d = img.downsample(2);
        assert_eq!((d.width, d.height), (3, 2));
        assert_eq!(d.rgb(0, 0), [191, 191, 191]);
        assert_eq!(d.rgb(2, 1), [255, 255, 255]);
        assert_eq!(d.mpp, 1.0);
    }
}
