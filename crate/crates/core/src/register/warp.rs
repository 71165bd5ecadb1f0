use rayon::prelude::*;

use super::bspline::DisplacementField;
use super::similarity::SimilarityTransform;
use crate::raster::{BinaryMask, SectionImage};

pub const GLASS: [u8; 3] = [255, 255, 255];

/// Source point for output pixel `(x, y)`: undo the field, then the rigid map.
#[inline]
fn source_point(inv: &SimilarityTransform, field: Option<&DisplacementField>, x: usize, y: usize) -> [f64; 2] {
    let z = [x as f64 + 0.5, y as f64 + 0.5];
    let y = match field {
        Some(f) => f.invert_point(z),
        None => z,
    };
    inv.apply(y)
}

fn bilinear_rgb(image: &SectionImage, p: [f64; 2]) -> [u8; 3] {
    let (w, h) = (image.width, image.height);
    if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < w as f64 && p[1] < h as f64) {
        return GLASS;
    }
    let fx = (p[0] - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (p[1] - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let (a, b, c, d) = (image.rgb(x0, y0), image.rgb(x1, y0), image.rgb(x0, y1), image.rgb(x1, y1));
    let mut out = [0u8; 3];
    for k in 0..3 {
        let v = (1.0 - ty) * ((1.0 - tx) * a[k] as f64 + tx * b[k] as f64) + ty * ((1.0 - tx) * c[k] as f64 + tx * d[k] as f64);
        out[k] = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Backward-warp `image` onto an `out_size` canvas. `rigid` maps section
/// coordinates to canvas coordinates and `field`, if any, is applied after
/// it. Samples falling outside the section are white.
pub fn apply_warp(
    image: &SectionImage,
    rigid: &SimilarityTransform,
    field: Option<&DisplacementField>,
    out_size: (usize, usize),
) -> SectionImage {
    let (ow, oh) = out_size;
    let inv = rigid.inverse();
    let mut pixels = vec![0u8; ow * oh * 3];
    pixels.par_chunks_mut(ow * 3).enumerate().for_each(|(y, row)| {
        for x in 0..ow {
            let rgb = bilinear_rgb(image, source_point(&inv, field, x, y));
            row[x * 3..x * 3 + 3].copy_from_slice(&rgb);
        }
    });
    SectionImage {
        width: ow,
        height: oh,
        pixels,
        mpp: image.mpp,
        level: image.level,
        section_index: image.section_index,
    }
}

/// Nearest-neighbour counterpart of [`apply_warp`] for masks.
pub fn warp_mask(
    mask: &BinaryMask,
    rigid: &SimilarityTransform,
    field: Option<&DisplacementField>,
    out_size: (usize, usize),
) -> BinaryMask {
    let (ow, oh) = out_size;
    let inv = rigid.inverse();
    let mut bits = vec![false; ow * oh];
    bits.par_chunks_mut(ow).enumerate().for_each(|(y, row)| {
        for (x, b) in row.iter_mut().enumerate() {
            let p = source_point(&inv, field, x, y);
            *b = mask.get_signed(p[0].floor() as isize, p[1].floor() as isize);
        }
    });
    BinaryMask {
        width: ow,
        height: oh,
        bits,
    }
}

/// Forward map of a section point through rigid and non-rigid stages.
pub fn forward_point(rigid: &SimilarityTransform, field: Option<&DisplacementField>, p: [f64; 2]) -> [f64; 2] {
    let y = rigid.apply(p);
    match field {
        Some(f) => {
            let u = f.displacement(y);
            [y[0] + u[0], y[1] + u[1]]
        }
        None => y,
    }
}
