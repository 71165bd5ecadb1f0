//! Scale-invariant keypoints and gradient-histogram descriptors.
//!
//! Difference-of-Gaussians extrema with quadratic sub-pixel refinement,
//! contrast and edge rejection, 36-bin dominant orientation and the classic
//! 4x4x8 descriptor. Coordinates follow the crate convention: the centre of
//! pixel `(i, j)` is `(i + 0.5, j + 0.5)`. Orientations are measured in image
//! coordinates (x right, y down).

use std::f32::consts::PI;
use std::io::{Read, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, GrayImage};

pub const DESCRIPTOR_LEN: usize = 128;
const MIN_SIDE: usize = 32;
const IMAGE_BORDER: usize = 5;
const MAX_REFINE_STEPS: usize = 5;
const ORI_BINS: usize = 36;
const ORI_PEAK_RATIO: f32 = 0.8;
const ORI_SIGMA_FACTOR: f32 = 1.5;
const DESCR_WIDTH: usize = 4;
const DESCR_BINS: usize = 8;
const DESCR_SCALE_FACTOR: f32 = 3.0;
const DESCR_MAG_CLAMP: f32 = 0.2;
const ASSUMED_BLUR: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiftParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub contrast_thresh: f32,
    pub edge_thresh: f32,
    /// Blur of the first layer of every octave, in that octave's pixels.
    pub sigma0: f32,
    /// Keep at most this many keypoints, strongest `|response|` first.
    pub max_keypoints: Option<usize>,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            octaves: 4,
            scales_per_octave: 3,
            contrast_thresh: 0.04,
            edge_thresh: 10.0,
            sigma0: 1.6,
            max_keypoints: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    /// Blur sigma in input pixels.
    pub scale: f32,
    /// Radians in `[0, 2*pi)`.
    pub orientation: f32,
    pub response: f32,
}

/// L2-normalised 128-bin descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(pub [f32; DESCRIPTOR_LEN]);

impl Descriptor {
    pub fn dot(&self, other: &Descriptor) -> f32 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f32 {
        self.dot(self).sqrt()
    }
}

/// Keypoints paired with their descriptors.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
    /// Keypoints dropped during description because their sampling window
    /// left the image.
    pub skipped: usize,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

struct Octave {
    width: usize,
    height: usize,
    gauss: Vec<Vec<f32>>,
    dog: Vec<Vec<f32>>,
}

/// Gaussian and DoG pyramids of one image.
pub struct ScaleSpace {
    octaves: Vec<Octave>,
    params: SiftParams,
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(src: &[f32], width: usize, height: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = (x as isize + t as isize - r).clamp(0, width as isize - 1) as usize;
                acc += kv * row[xx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..height {
        for (t, kv) in k.iter().enumerate() {
            let yy = (y as isize + t as isize - r).clamp(0, height as isize - 1) as usize;
            let src_row = &tmp[yy * width..(yy + 1) * width];
            let dst_row = &mut out[y * width..(y + 1) * width];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    out
}

// Keeps pixels 0, 2, 4, ... so octave pixel i sits at input pixel 2^o * i.
fn decimate(src: &[f32], width: usize, height: usize) -> (Vec<f32>, usize, usize) {
    let (w, h) = (width.div_ceil(2), height.div_ceil(2));
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(src[2 * y * width + 2 * x]);
        }
    }
    (out, w, h)
}

impl ScaleSpace {
    pub fn build(image: &GrayImage, params: &SiftParams) -> Result<Self> {
        if image.width < MIN_SIDE || image.height < MIN_SIDE {
            return Err(Error::ImageTooSmall {
                width: image.width,
                height: image.height,
                min: MIN_SIDE,
            });
        }
        if params.scales_per_octave == 0 || params.octaves == 0 {
            return Err(Error::InvalidArgument("octaves and scales_per_octave must be positive".into()));
        }
        let s = params.scales_per_octave;
        let min_side = image.width.min(image.height) as f32;
        let max_octaves = ((min_side.log2() - 3.0).floor() as usize).max(1);
        let n_octaves = params.octaves.min(max_octaves);

        let sig: Vec<f32> = (0..s + 3).map(|i| params.sigma0 * 2f32.powf(i as f32 / s as f32)).collect();
        let incr: Vec<f32> = (1..s + 3).map(|i| (sig[i] * sig[i] - sig[i - 1] * sig[i - 1]).sqrt()).collect();

        let base_sigma = (params.sigma0 * params.sigma0 - ASSUMED_BLUR * ASSUMED_BLUR).max(0.01).sqrt();
        let mut base = gaussian_blur(&image.data, image.width, image.height, base_sigma);
        let (mut w, mut h) = (image.width, image.height);
        let mut octaves = Vec::with_capacity(n_octaves);
        for o in 0..n_octaves {
            if o > 0 {
                let prev: &Octave = &octaves[o - 1];
                let (d, dw, dh) = decimate(&prev.gauss[s], prev.width, prev.height);
                base = d;
                w = dw;
                h = dh;
            }
            let mut gauss = Vec::with_capacity(s + 3);
            gauss.push(std::mem::take(&mut base));
            for sigma in &incr {
                let next = gaussian_blur(gauss.last().unwrap(), w, h, *sigma);
                gauss.push(next);
            }
            let dog = gauss
                .windows(2)
                .map(|p| p[1].iter().zip(&p[0]).map(|(a, b)| a - b).collect())
                .collect();
            octaves.push(Octave {
                width: w,
                height: h,
                gauss,
                dog,
            });
        }
        Ok(Self {
            octaves,
            params: *params,
        })
    }

    pub fn n_octaves(&self) -> usize {
        self.octaves.len()
    }

    /// Octave and integer layer whose blur is nearest to `scale` (input px).
    fn locate(&self, scale: f32) -> (usize, usize, f32) {
        let s = self.params.scales_per_octave as f32;
        let total = s * (scale / self.params.sigma0).max(1e-6).log2();
        let mut octave = ((total + 0.5) / s).floor().max(0.0) as usize;
        octave = octave.min(self.octaves.len() - 1);
        let layer_f = total - octave as f32 * s;
        let layer = layer_f.round().clamp(1.0, s) as usize;
        let sigma_oct = scale / 2f32.powi(octave as i32);
        (octave, layer, sigma_oct)
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    octave: usize,
    layer: usize,
    xi: usize,
    yi: usize,
    kp: Keypoint,
}

/// Detect keypoints over the whole image.
pub fn detect_keypoints(image: &GrayImage, params: &SiftParams) -> Result<Vec<Keypoint>> {
    let ss = ScaleSpace::build(image, params)?;
    Ok(detect_in(&ss, None))
}

/// Detect keypoints whose refined position falls inside `mask`.
pub fn detect_keypoints_masked(image: &GrayImage, params: &SiftParams, mask: &BinaryMask) -> Result<Vec<Keypoint>> {
    if mask.width != image.width || mask.height != image.height {
        return Err(Error::ShapeMismatch("keypoint mask does not match image".into()));
    }
    let ss = ScaleSpace::build(image, params)?;
    Ok(detect_in(&ss, Some(mask)))
}

/// Detect and describe in one pass over a shared scale space.
pub fn extract_features(image: &GrayImage, params: &SiftParams, mask: Option<&BinaryMask>) -> Result<FeatureSet> {
    if let Some(m) = mask {
        if m.width != image.width || m.height != image.height {
            return Err(Error::ShapeMismatch("keypoint mask does not match image".into()));
        }
    }
    let ss = ScaleSpace::build(image, params)?;
    let kps = detect_in(&ss, mask);
    Ok(describe_in(&ss, &kps))
}

fn detect_in(ss: &ScaleSpace, mask: Option<&BinaryMask>) -> Vec<Keypoint> {
    let p = &ss.params;
    let s = p.scales_per_octave;
    let pre_thresh = 0.5 * p.contrast_thresh / s as f32;
    let mut found: Vec<Candidate> = Vec::new();
    for (o, oct) in ss.octaves.iter().enumerate() {
        let (w, h) = (oct.width, oct.height);
        if w <= 2 * IMAGE_BORDER || h <= 2 * IMAGE_BORDER {
            continue;
        }
        for layer in 1..=s {
            let (prev, cur, next) = (&oct.dog[layer - 1], &oct.dog[layer], &oct.dog[layer + 1]);
            for y in IMAGE_BORDER..h - IMAGE_BORDER {
                for x in IMAGE_BORDER..w - IMAGE_BORDER {
                    let v = cur[y * w + x];
                    if v.abs() <= pre_thresh || !is_extremum(prev, cur, next, w, x, y, v) {
                        continue;
                    }
                    if let Some(c) = refine(ss, o, layer, x, y) {
                        if let Some(m) = mask {
                            let (mx, my) = (c.kp.x.floor() as isize, c.kp.y.floor() as isize);
                            if !m.get_signed(mx, my) {
                                continue;
                            }
                        }
                        for ori in orientations(ss, &c) {
                            let mut c = c;
                            c.kp.orientation = ori;
                            found.push(c);
                        }
                    }
                }
            }
        }
    }
    if let Some(limit) = p.max_keypoints {
        if found.len() > limit {
            found.sort_by(|a, b| b.kp.response.abs().total_cmp(&a.kp.response.abs()));
            found.truncate(limit);
        }
    }
    found.sort_by(|a, b| {
        (a.octave, a.yi, a.xi)
            .cmp(&(b.octave, b.yi, b.xi))
            .then(a.kp.scale.total_cmp(&b.kp.scale))
            .then(a.layer.cmp(&b.layer))
            .then(a.kp.orientation.total_cmp(&b.kp.orientation))
    });
    found.into_iter().map(|c| c.kp).collect()
}

fn is_extremum(prev: &[f32], cur: &[f32], next: &[f32], w: usize, x: usize, y: usize, v: f32) -> bool {
    let idx = |dx: isize, dy: isize| ((y as isize + dy) as usize) * w + (x as isize + dx) as usize;
    if v > 0.0 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                let i = idx(dx, dy);
                if prev[i] > v || next[i] > v || cur[i] > v {
                    return false;
                }
            }
        }
    } else {
        for dy in -1..=1 {
            for dx in -1..=1 {
                let i = idx(dx, dy);
                if prev[i] < v || next[i] < v || cur[i] < v {
                    return false;
                }
            }
        }
    }
    true
}

fn refine(ss: &ScaleSpace, o: usize, layer0: usize, x0: usize, y0: usize) -> Option<Candidate> {
    let oct = &ss.octaves[o];
    let p = &ss.params;
    let s = p.scales_per_octave;
    let (w, h) = (oct.width, oct.height);
    let (mut layer, mut x, mut y) = (layer0, x0, y0);
    let mut offset = [0.0f64; 3];
    let mut grad = [0.0f64; 3];
    let mut converged = false;
    for _ in 0..MAX_REFINE_STEPS {
        let (prev, cur, next) = (&oct.dog[layer - 1], &oct.dog[layer], &oct.dog[layer + 1]);
        let at = |img: &[f32], dx: isize, dy: isize| -> f64 {
            img[((y as isize + dy) as usize) * w + (x as isize + dx) as usize] as f64
        };
        let v2 = 2.0 * at(cur, 0, 0);
        let dx = (at(cur, 1, 0) - at(cur, -1, 0)) / 2.0;
        let dy = (at(cur, 0, 1) - at(cur, 0, -1)) / 2.0;
        let ds = (at(next, 0, 0) - at(prev, 0, 0)) / 2.0;
        let dxx = at(cur, 1, 0) + at(cur, -1, 0) - v2;
        let dyy = at(cur, 0, 1) + at(cur, 0, -1) - v2;
        let dss = at(next, 0, 0) + at(prev, 0, 0) - v2;
        let dxy = (at(cur, 1, 1) - at(cur, -1, 1) - at(cur, 1, -1) + at(cur, -1, -1)) / 4.0;
        let dxs = (at(next, 1, 0) - at(next, -1, 0) - at(prev, 1, 0) + at(prev, -1, 0)) / 4.0;
        let dys = (at(next, 0, 1) - at(next, 0, -1) - at(prev, 0, 1) + at(prev, 0, -1)) / 4.0;
        let hess = [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]];
        grad = [dx, dy, ds];
        let sol = solve3(&hess, &grad)?;
        offset = [-sol[0], -sol[1], -sol[2]];
        if offset.iter().all(|v| v.abs() < 0.5) {
            converged = true;
            break;
        }
        if offset.iter().any(|v| v.abs() > 1e3) {
            return None;
        }
        let nx = x as isize + offset[0].round() as isize;
        let ny = y as isize + offset[1].round() as isize;
        let nl = layer as isize + offset[2].round() as isize;
        if nl < 1
            || nl > s as isize
            || nx < IMAGE_BORDER as isize
            || ny < IMAGE_BORDER as isize
            || nx >= (w - IMAGE_BORDER) as isize
            || ny >= (h - IMAGE_BORDER) as isize
        {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        layer = nl as usize;
    }
    if !converged {
        return None;
    }
    let cur = &oct.dog[layer];
    let val = cur[y * w + x] as f64;
    let contrast = val + 0.5 * (grad[0] * offset[0] + grad[1] * offset[1] + grad[2] * offset[2]);
    if contrast.abs() * (s as f64) < p.contrast_thresh as f64 {
        return None;
    }
    // Principal curvature ratio on the 2x2 spatial Hessian.
    let at = |dx: isize, dy: isize| -> f64 { cur[((y as isize + dy) as usize) * w + (x as isize + dx) as usize] as f64 };
    let v2 = 2.0 * val;
    let dxx = at(1, 0) + at(-1, 0) - v2;
    let dyy = at(0, 1) + at(0, -1) - v2;
    let dxy = (at(1, 1) - at(-1, 1) - at(1, -1) + at(-1, -1)) / 4.0;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    let r = p.edge_thresh as f64;
    if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
        return None;
    }
    let factor = 2f64.powi(o as i32);
    let sigma_oct = p.sigma0 as f64 * 2f64.powf((layer as f64 + offset[2]) / s as f64);
    Some(Candidate {
        octave: o,
        layer,
        xi: x,
        yi: y,
        kp: Keypoint {
            x: ((x as f64 + offset[0]) * factor + 0.5) as f32,
            y: ((y as f64 + offset[1]) * factor + 0.5) as f32,
            scale: (sigma_oct * factor) as f32,
            orientation: 0.0,
            response: contrast as f32,
        },
    })
}

fn solve3(a: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if det.abs() < 1e-18 {
        return None;
    }
    let inv_det = 1.0 / det;
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
    let inv = [
        [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
        [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
        [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
    ];
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = inv_det * (inv[i][0] * b[0] + inv[i][1] * b[1] + inv[i][2] * b[2]);
    }
    Some(out)
}

#[inline]
fn gradient(img: &[f32], w: usize, x: usize, y: usize) -> (f32, f32) {
    let dx = img[y * w + x + 1] - img[y * w + x - 1];
    let dy = img[(y + 1) * w + x] - img[(y - 1) * w + x];
    (dx, dy)
}

fn orientations(ss: &ScaleSpace, c: &Candidate) -> Vec<f32> {
    let oct = &ss.octaves[c.octave];
    let img = &oct.gauss[c.layer];
    let (w, h) = (oct.width, oct.height);
    let sigma_oct = c.kp.scale / 2f32.powi(c.octave as i32);
    let sigma_w = ORI_SIGMA_FACTOR * sigma_oct;
    let radius = (3.0 * sigma_w).round() as isize;
    let denom = -1.0 / (2.0 * sigma_w * sigma_w);
    let mut hist = [0.0f32; ORI_BINS];
    for dy in -radius..=radius {
        let y = c.yi as isize + dy;
        if y <= 0 || y >= h as isize - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let x = c.xi as isize + dx;
            if x <= 0 || x >= w as isize - 1 {
                continue;
            }
            let (gx, gy) = gradient(img, w, x as usize, y as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            let ang = gy.atan2(gx).rem_euclid(2.0 * PI);
            let weight = (((dx * dx + dy * dy) as f32) * denom).exp();
            let bin = ((ang * ORI_BINS as f32 / (2.0 * PI)).round() as usize) % ORI_BINS;
            hist[bin] += weight * mag;
        }
    }
    let n = ORI_BINS;
    let smooth: Vec<f32> = (0..n)
        .map(|k| {
            (hist[(k + n - 2) % n] + hist[(k + 2) % n]) / 16.0
                + 4.0 * (hist[(k + n - 1) % n] + hist[(k + 1) % n]) / 16.0
                + 6.0 * hist[k] / 16.0
        })
        .collect();
    let max = smooth.iter().copied().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for k in 0..n {
        let (l, c0, r) = (smooth[(k + n - 1) % n], smooth[k], smooth[(k + 1) % n]);
        if c0 > l && c0 > r && c0 >= ORI_PEAK_RATIO * max {
            let bin = k as f32 + 0.5 * (l - r) / (l - 2.0 * c0 + r);
            let ang = (bin * 2.0 * PI / n as f32).rem_euclid(2.0 * PI);
            out.push(if ang >= 2.0 * PI { 0.0 } else { ang });
        }
    }
    out
}

/// Describe keypoints of `image`. Keypoints whose centre lies outside the
/// image are skipped and counted in [`FeatureSet::skipped`].
pub fn compute_descriptors(image: &GrayImage, keypoints: &[Keypoint], params: &SiftParams) -> Result<FeatureSet> {
    let ss = ScaleSpace::build(image, params)?;
    Ok(describe_in(&ss, keypoints))
}

fn describe_in(ss: &ScaleSpace, keypoints: &[Keypoint]) -> FeatureSet {
    let mut set = FeatureSet::default();
    for kp in keypoints {
        match describe_one(ss, kp) {
            Some(d) => {
                set.keypoints.push(*kp);
                set.descriptors.push(d);
            }
            None => set.skipped += 1,
        }
    }
    if set.skipped > 0 {
        warn!("{} keypoints outside the image were not described", set.skipped);
    }
    set
}

fn describe_one(ss: &ScaleSpace, kp: &Keypoint) -> Option<Descriptor> {
    let (o, layer, sigma_oct) = ss.locate(kp.scale);
    let oct = &ss.octaves[o];
    let (w, h) = (oct.width, oct.height);
    let factor = 2f32.powi(o as i32);
    let cx = (kp.x - 0.5) / factor;
    let cy = (kp.y - 0.5) / factor;
    if !(cx >= 0.0 && cy >= 0.0 && cx <= (w - 1) as f32 && cy <= (h - 1) as f32) {
        return None;
    }
    let (xi, yi) = (cx.round() as isize, cy.round() as isize);
    let img = &oct.gauss[layer];
    let d = DESCR_WIDTH as f32;
    let hist_width = DESCR_SCALE_FACTOR * sigma_oct;
    let radius = ((hist_width * std::f32::consts::SQRT_2 * (d + 1.0) * 0.5).round() as isize)
        .min(((w * w + h * h) as f32).sqrt() as isize);
    let (sin_t, cos_t) = kp.orientation.sin_cos();
    let (cos_t, sin_t) = (cos_t / hist_width, sin_t / hist_width);
    let exp_scale = -1.0 / (d * d * 0.5);
    let bins_per_rad = DESCR_BINS as f32 / (2.0 * PI);
    // (d + 2) x (d + 2) x (n + 2) with a guard ring for trilinear spill.
    let (rs, cs, os) = (DESCR_WIDTH + 2, DESCR_WIDTH + 2, DESCR_BINS + 2);
    let mut hist = vec![0.0f32; rs * cs * os];
    for i in -radius..=radius {
        for j in -radius..=radius {
            // Offset relative to the sub-pixel centre, rotated into the keypoint frame.
            let (px, py) = (xi + j, yi + i);
            if px <= 0 || py <= 0 || px >= w as isize - 1 || py >= h as isize - 1 {
                continue;
            }
            let (ox, oy) = (px as f32 - cx, py as f32 - cy);
            let c_rot = ox * cos_t + oy * sin_t;
            let r_rot = -ox * sin_t + oy * cos_t;
            let rbin = r_rot + d / 2.0 - 0.5;
            let cbin = c_rot + d / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= d || cbin <= -1.0 || cbin >= d {
                continue;
            }
            let (gx, gy) = gradient(img, w, px as usize, py as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            let weight = ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp();
            let obin = ((gy.atan2(gx) - kp.orientation).rem_euclid(2.0 * PI)) * bins_per_rad;
            let v = mag * weight;

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            let (r0, c0) = (r0 as isize + 1, c0 as isize + 1);
            let o0 = (o0 as usize) % DESCR_BINS;
            for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
                for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                    for (dob, wo) in [(0, 1.0 - fo), (1, fo)] {
                        let idx = ((r0 + dr) as usize * cs + (c0 + dc) as usize) * os + o0 + dob;
                        hist[idx] += v * wr * wc * wo;
                    }
                }
            }
        }
    }
    let mut out = [0.0f32; DESCRIPTOR_LEN];
    for r in 0..DESCR_WIDTH {
        for c in 0..DESCR_WIDTH {
            let base = ((r + 1) * cs + (c + 1)) * os;
            // Wrap the orientation guard bins.
            let mut bins = [0.0f32; DESCR_BINS];
            bins.copy_from_slice(&hist[base..base + DESCR_BINS]);
            bins[0] += hist[base + DESCR_BINS];
            bins[1] += hist[base + DESCR_BINS + 1];
            out[(r * DESCR_WIDTH + c) * DESCR_BINS..][..DESCR_BINS].copy_from_slice(&bins);
        }
    }
    normalize_descriptor(&mut out)?;
    Some(Descriptor(out))
}

fn normalize_descriptor(v: &mut [f32; DESCRIPTOR_LEN]) -> Option<()> {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x = ((*x as f64 / norm) as f32).min(DESCR_MAG_CLAMP));
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
    Some(())
}

/// Little-endian dump: `u32` count, then per record `x, y, scale,
/// orientation` as `f32` followed by the 128 descriptor `f32`s.
pub fn write_features(mut w: impl Write, set: &FeatureSet) -> std::io::Result<()> {
    w.write_all(&(set.keypoints.len() as u32).to_le_bytes())?;
    for (kp, d) in set.keypoints.iter().zip(&set.descriptors) {
        for v in [kp.x, kp.y, kp.scale, kp.orientation] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in d.0 {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_features(mut r: impl Read) -> std::io::Result<FeatureSet> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let n = u32::from_le_bytes(word) as usize;
    let mut set = FeatureSet::default();
    let mut f = || -> std::io::Result<f32> {
        r.read_exact(&mut word)?;
        Ok(f32::from_le_bytes(word))
    };
    for _ in 0..n {
        let (x, y, scale, orientation) = (f()?, f()?, f()?, f()?);
        let mut d = [0.0f32; DESCRIPTOR_LEN];
        for v in d.iter_mut() {
            *v = f()?;
        }
        set.keypoints.push(Keypoint {
            x,
            y,
            scale,
            orientation,
            response: 0.0,
        });
        set.descriptors.push(Descriptor(d));
    }
    Ok(set)
}
