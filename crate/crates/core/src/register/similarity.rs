use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `x -> s R(theta) x + t`.
///
/// `level` is the log2 downsample factor of the image the translation is
/// expressed in; 0 is full resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub translation: [f64; 2],
    #[serde(default)]
    pub level: f64,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self::new(1.0, 0.0, [0.0, 0.0])
    }

    pub fn new(scale: f64, rotation: f64, translation: [f64; 2]) -> Self {
        Self {
            scale,
            rotation,
            translation,
            level: 0.0,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new(1.0, 0.0, [tx, ty])
    }

    /// Rotation and scale about `centre` followed by a translation.
    pub fn about(centre: [f64; 2], scale: f64, rotation: f64, translation: [f64; 2]) -> Self {
        let r = Self::new(scale, rotation, [0.0, 0.0]).apply(centre);
        Self::new(
            scale,
            rotation,
            [centre[0] - r[0] + translation[0], centre[1] - r[1] + translation[1]],
        )
    }

    fn from_complex(a: [f64; 2], b: [f64; 2], level: f64) -> Self {
        Self {
            scale: a[0].hypot(a[1]),
            rotation: a[1].atan2(a[0]),
            translation: b,
            level,
        }
    }

    /// `s * exp(i theta)` as `[re, im]`.
    pub fn linear(&self) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [self.scale * c, self.scale * s]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let [re, im] = self.linear();
        [
            re * p[0] - im * p[1] + self.translation[0],
            im * p[0] + re * p[1] + self.translation[1],
        ]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        let a = self.linear();
        let b = other.linear();
        let lin = [a[0] * b[0] - a[1] * b[1], a[0] * b[1] + a[1] * b[0]];
        Self::from_complex(lin, self.apply(other.translation), self.level)
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let [re, im] = self.linear();
        let n = re * re + im * im;
        let inv = [re / n, -im / n];
        let t = self.translation;
        let b = [-(inv[0] * t[0] - inv[1] * t[1]), -(inv[1] * t[0] + inv[0] * t[1])];
        Self::from_complex(inv, b, self.level)
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        (self.scale - 1.0).abs() <= tol
            && wrap_angle(self.rotation).abs() <= tol
            && self.translation.iter().all(|t| t.abs() <= tol)
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let r = a.rem_euclid(t);
    if r > std::f64::consts::PI {
        r - t
    } else {
        r
    }
}

/// Same transform acting on an image `factor` times larger.
pub fn propagate_to_level(t: &SimilarityTransform, downsample_factor: f64) -> Result<SimilarityTransform> {
    if !(downsample_factor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "downsample factor must be positive, got {downsample_factor}"
        )));
    }
    Ok(SimilarityTransform {
        translation: [t.translation[0] * downsample_factor, t.translation[1] * downsample_factor],
        level: t.level - downsample_factor.log2(),
        ..*t
    })
}

/// A correspondence mapping `src` onto `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPair {
    pub src: [f64; 2],
    pub dst: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_px: f64,
    pub seed: u64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 2000,
            inlier_px: 3.0,
            seed: 0x5eed,
            min_scale: 0.5,
            max_scale: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEstimate {
    pub transform: SimilarityTransform,
    pub inliers: Vec<usize>,
    pub rms_residual: f64,
}

const DEGENERATE_EPS: f64 = 1e-9;

/// Exact similarity through two correspondences.
pub fn similarity_from_two(a: &PointPair, b: &PointPair) -> Result<SimilarityTransform> {
    let dz = [b.src[0] - a.src[0], b.src[1] - a.src[1]];
    let dw = [b.dst[0] - a.dst[0], b.dst[1] - a.dst[1]];
    let n = dz[0] * dz[0] + dz[1] * dz[1];
    if n < DEGENERATE_EPS || dw[0] * dw[0] + dw[1] * dw[1] < DEGENERATE_EPS {
        return Err(Error::DegenerateGeometry("coincident sample points".into()));
    }
    // a = dw / dz
    let lin = [(dw[0] * dz[0] + dw[1] * dz[1]) / n, (dw[1] * dz[0] - dw[0] * dz[1]) / n];
    let t = [
        a.dst[0] - (lin[0] * a.src[0] - lin[1] * a.src[1]),
        a.dst[1] - (lin[1] * a.src[0] + lin[0] * a.src[1]),
    ];
    Ok(SimilarityTransform::from_complex(lin, t, 0.0))
}

/// Least-squares similarity (Procrustes with isotropic scale).
pub fn fit_similarity(pairs: &[PointPair]) -> Result<SimilarityTransform> {
    if pairs.len() < 2 {
        return Err(Error::TooFewMatches {
            found: pairs.len(),
            required: 2,
        });
    }
    let n = pairs.len() as f64;
    let mut ms = [0.0; 2];
    let mut md = [0.0; 2];
    for p in pairs {
        for k in 0..2 {
            ms[k] += p.src[k] / n;
            md[k] += p.dst[k] / n;
        }
    }
    let (mut num, mut den) = ([0.0; 2], 0.0);
    for p in pairs {
        let z = [p.src[0] - ms[0], p.src[1] - ms[1]];
        let w = [p.dst[0] - md[0], p.dst[1] - md[1]];
        // w * conj(z)
        num[0] += w[0] * z[0] + w[1] * z[1];
        num[1] += w[1] * z[0] - w[0] * z[1];
        den += z[0] * z[0] + z[1] * z[1];
    }
    if den < DEGENERATE_EPS {
        return Err(Error::DegenerateGeometry("all source points coincide".into()));
    }
    let lin = [num[0] / den, num[1] / den];
    let t = [
        md[0] - (lin[0] * ms[0] - lin[1] * ms[1]),
        md[1] - (lin[1] * ms[0] + lin[0] * ms[1]),
    ];
    Ok(SimilarityTransform::from_complex(lin, t, 0.0))
}

fn residual(t: &SimilarityTransform, p: &PointPair) -> f64 {
    let q = t.apply(p.src);
    (q[0] - p.dst[0]).hypot(q[1] - p.dst[1])
}

fn inliers_of(t: &SimilarityTransform, pairs: &[PointPair], tol: f64) -> Vec<usize> {
    (0..pairs.len()).filter(|&k| residual(t, &pairs[k]) < tol).collect()
}

/// RANSAC over 2-point samples scored by truncated squared residual, then least-squares refits on the consensus
/// set until it stops changing.
pub fn estimate_similarity(pairs: &[PointPair], params: &RansacParams) -> Result<SimilarityEstimate> {
    if pairs.len() < 2 {
        return Err(Error::TooFewMatches {
            found: pairs.len(),
            required: 2,
        });
    }
    let plausible = |t: &SimilarityTransform| t.scale >= params.min_scale && t.scale <= params.max_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, f64, SimilarityTransform)> = None;
    let n = pairs.len();
    let mut any_valid_sample = false;
    if n == 2 {
        let t = similarity_from_two(&pairs[0], &pairs[1])?;
        best = Some((2, 0.0, t));
        any_valid_sample = true;
    } else {
        for _ in 0..params.iterations.max(1) {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let Ok(t) = similarity_from_two(&pairs[a], &pairs[b]) else {
                continue;
            };
            any_valid_sample = true;
            if !plausible(&t) {
                continue;
            }
            // Truncated quadratic score: inliers pay r², everything else the cap.
            let cap = params.inlier_px * params.inlier_px;
            let mut count = 0;
            let mut cost = 0.0;
            for p in pairs {
                let r2 = residual(&t, p).powi(2);
                if r2 < cap {
                    count += 1;
                    cost += r2;
                } else {
                    cost += cap;
                }
            }
            if best.as_ref().is_none_or(|(_, c, _)| cost < *c) {
                best = Some((count, cost, t));
            }
        }
    }
    let Some((_, _, mut t)) = best else {
        if !any_valid_sample {
            return Err(Error::DegenerateGeometry("every sample pair was coincident".into()));
        }
        return Err(Error::ImplausibleScale(f64::NAN));
    };
    let mut inliers = inliers_of(&t, pairs, params.inlier_px);
    for _ in 0..10 {
        if inliers.len() < 2 {
            break;
        }
        let subset: Vec<PointPair> = inliers.iter().map(|&k| pairs[k]).collect();
        let refit = fit_similarity(&subset)?;
        let next = inliers_of(&refit, pairs, params.inlier_px);
        if next.len() < inliers.len() {
            break;
        }
        t = refit;
        let stable = next == inliers;
        inliers = next;
        if stable {
            break;
        }
    }
    if !plausible(&t) {
        return Err(Error::ImplausibleScale(t.scale));
    }
    let rms = if inliers.is_empty() {
        0.0
    } else {
        (inliers.iter().map(|&k| residual(&t, &pairs[k]).powi(2)).sum::<f64>() / inliers.len() as f64).sqrt()
    };
    Ok(SimilarityEstimate {
        transform: t,
        inliers,
        rms_residual: rms,
    })
}
