//! Ground-truth synthetic serial sections.
//!
//! A shared base tissue (layered value noise plus ring-shaped glands inside
//! a wobbly elliptical ribbon) is pushed through a per-section elastic
//! displacement and a per-section similarity pose. Landmarks are tracked
//! through the same maps, so registration output can be scored exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, SectionImage};
use crate::register::SimilarityTransform;

const PINK: [f64; 3] = [230.0, 150.0, 190.0];
const PURPLE: [f64; 3] = [120.0, 60.0, 150.0];
const GLASS_LEVEL: f64 = 246.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub sections: usize,
    pub width: usize,
    pub height: usize,
    pub max_rotation_deg: f64,
    pub scale_range: [f64; 2],
    pub max_translation: f64,
    /// Peak elastic displacement in pixels; 0 disables it.
    pub elastic_amplitude: f64,
    pub elastic_wavelength: f64,
    /// Gaussian pixel noise, in 8-bit intensity units.
    pub noise_sigma: f64,
    /// Strength of the per-section texture that is not shared between sections.
    pub decorrelation: f64,
    pub seed: u64,
    pub landmarks: usize,
    pub mpp: f64,
    pub ribbon_semi_axes: [f64; 2],
    pub glands: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sections: 8,
            width: 512,
            height: 512,
            max_rotation_deg: 15.0,
            scale_range: [0.95, 1.05],
            max_translation: 50.0,
            elastic_amplitude: 0.0,
            elastic_wavelength: 360.0,
            noise_sigma: 3.0,
            decorrelation: 0.08,
            seed: 1,
            landmarks: 100,
            mpp: 0.5,
            ribbon_semi_axes: [160.0, 75.0],
            glands: 25,
        }
    }
}

impl SynthSpec {
    /// No pose change, no elastic field and no noise.
    pub fn still(seed: u64) -> Self {
        Self {
            max_rotation_deg: 0.0,
            scale_range: [1.0, 1.0],
            max_translation: 0.0,
            noise_sigma: 0.0,
            decorrelation: 0.0,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.sections == 0 {
            return bad("at least one section is required");
        }
        if self.width < 64 || self.height < 64 {
            return bad("canvas must be at least 64x64");
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return bad("scale range must be positive and ordered");
        }
        if self.scale_range[0] < 0.5 || self.scale_range[1] > 2.0 {
            return bad("scale range must stay within [0.5, 2]");
        }
        if self.max_rotation_deg < 0.0 || self.max_translation < 0.0 || self.noise_sigma < 0.0 {
            return bad("ranges must be non-negative");
        }
        if self.elastic_amplitude < 0.0 || !(self.elastic_wavelength > 0.0) {
            return bad("elastic amplitude must be non-negative and wavelength positive");
        }
        let limit = self.elastic_wavelength / (std::f64::consts::TAU * 2.0);
        if self.elastic_amplitude >= limit {
            return bad("elastic field would fold; lower the amplitude or raise the wavelength");
        }
        if !(self.mpp > 0.0) {
            return bad("mpp must be positive");
        }
        Ok(())
    }
}

/// `e(p) = A (sin(2 pi y / L + phase_x), sin(2 pi x / L + phase_y))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticField {
    pub amplitude: f64,
    pub wavelength: f64,
    pub phase: [f64; 2],
}

impl ElasticField {
    pub fn none() -> Self {
        Self {
            amplitude: 0.0,
            wavelength: 1.0,
            phase: [0.0, 0.0],
        }
    }

    pub fn displacement(&self, p: [f64; 2]) -> [f64; 2] {
        if self.amplitude == 0.0 {
            return [0.0, 0.0];
        }
        let k = std::f64::consts::TAU / self.wavelength;
        [
            self.amplitude * (k * p[1] + self.phase[0]).sin(),
            self.amplitude * (k * p[0] + self.phase[1]).sin(),
        ]
    }

    pub fn forward(&self, p: [f64; 2]) -> [f64; 2] {
        let d = self.displacement(p);
        [p[0] + d[0], p[1] + d[1]]
    }

    pub fn inverse(&self, q: [f64; 2]) -> [f64; 2] {
        let mut p = q;
        for _ in 0..40 {
            let d = self.displacement(p);
            let next = [q[0] - d[0], q[1] - d[1]];
            let step = (next[0] - p[0]).abs() + (next[1] - p[1]).abs();
            p = next;
            if step < 1e-10 {
                break;
            }
        }
        p
    }
}

/// One generated stack and its ground truth.
#[derive(Debug, Clone)]
pub struct SynthStack {
    pub spec: SynthSpec,
    pub sections: Vec<SectionImage>,
    /// True ribbon masks per section.
    pub masks: Vec<BinaryMask>,
    /// Pose of each section: base-tissue point (after elastic) to section pixel.
    pub poses: Vec<SimilarityTransform>,
    pub elastic: Vec<ElasticField>,
    /// `landmarks[l][i]`: landmark `l` in section `i`.
    pub landmarks: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    pub poses: Vec<SimilarityTransform>,
    pub elastic: Vec<ElasticField>,
    pub landmarks: Vec<Vec<[f64; 2]>>,
}

impl SynthStack {
    /// True rigid map of section `i` into section 0, ignoring elastic terms.
    pub fn true_transform(&self, i: usize) -> SimilarityTransform {
        self.poses[0].compose(&self.poses[i].inverse())
    }

    /// True rigid map of section `i` into section `i - 1`.
    pub fn true_pair_transform(&self, i: usize) -> SimilarityTransform {
        self.poses[i - 1].compose(&self.poses[i].inverse())
    }

    pub fn truth(&self) -> SynthTruth {
        SynthTruth {
            spec: self.spec.clone(),
            poses: self.poses.clone(),
            elastic: self.elastic.clone(),
            landmarks: self.landmarks.clone(),
        }
    }

    /// Landmark trajectories as a section-major table.
    pub fn landmarks_in(&self, i: usize) -> Vec<[f64; 2]> {
        self.landmarks.iter().map(|t| t[i]).collect()
    }
}

/// Lattice value noise with smoothstep interpolation, values in `[0, 1]`.
struct ValueNoise {
    spacing: f64,
    nx: usize,
    ny: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(width: f64, height: f64, spacing: f64, rng: &mut ChaCha8Rng) -> Self {
        let margin = 4.0 * spacing;
        let nx = ((width + 2.0 * margin) / spacing).ceil() as usize + 2;
        let ny = ((height + 2.0 * margin) / spacing).ceil() as usize + 2;
        Self {
            spacing,
            nx,
            ny,
            values: (0..nx * ny).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn at(&self, p: [f64; 2]) -> f64 {
        let margin = 4.0 * self.spacing;
        let u = ((p[0] + margin) / self.spacing).clamp(0.0, (self.nx - 2) as f64);
        let v = ((p[1] + margin) / self.spacing).clamp(0.0, (self.ny - 2) as f64);
        let (i, j) = ((u.floor() as usize).min(self.nx - 2), (v.floor() as usize).min(self.ny - 2));
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (s(u - i as f64), s(v - j as f64));
        let g = |a: usize, b: usize| self.values[b * self.nx + a];
        (1.0 - ty) * ((1.0 - tx) * g(i, j) + tx * g(i + 1, j)) + ty * ((1.0 - tx) * g(i, j + 1) + tx * g(i + 1, j + 1))
    }
}

struct Gland {
    centre: [f64; 2],
    radii: [f64; 2],
    angle: f64,
    thickness: f64,
}

struct BaseTissue {
    centre: [f64; 2],
    axes: [f64; 2],
    wobble: [(f64, f64, f64); 4],
    layers: Vec<(ValueNoise, f64)>,
    glands: Vec<Gland>,
}

impl BaseTissue {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let (w, h) = (spec.width as f64, spec.height as f64);
        let centre = [w / 2.0, h / 2.0];
        let wobble = [
            (2.0, rng.random_range(0.06..0.10), rng.random_range(0.0..std::f64::consts::TAU)),
            (3.0, rng.random_range(0.05..0.09), rng.random_range(0.0..std::f64::consts::TAU)),
            (4.0, rng.random_range(0.03..0.06), rng.random_range(0.0..std::f64::consts::TAU)),
            (5.0, rng.random_range(0.02..0.04), rng.random_range(0.0..std::f64::consts::TAU)),
        ];
        let layers = [(24.0, 0.5), (12.0, 0.3), (6.0, 0.2)]
            .into_iter()
            .map(|(s, wgt)| (ValueNoise::new(w, h, s, rng), wgt))
            .collect();
        let mut base = Self {
            centre,
            axes: spec.ribbon_semi_axes,
            wobble,
            layers,
            glands: Vec::new(),
        };
        let mut tries = 0;
        while base.glands.len() < spec.glands && tries < spec.glands * 200 {
            tries += 1;
            let c = [
                centre[0] + rng.random_range(-1.0..1.0) * base.axes[0],
                centre[1] + rng.random_range(-1.0..1.0) * base.axes[1],
            ];
            let r: [f64; 2] = [rng.random_range(6.0..14.0), rng.random_range(5.0..11.0)];
            if base.radial(c) > 1.0 - 1.6 * r[0].max(r[1]) / base.axes[1] {
                continue;
            }
            if base
                .glands
                .iter()
                .any(|g| (g.centre[0] - c[0]).hypot(g.centre[1] - c[1]) < g.radii[0].max(g.radii[1]) + r[0].max(r[1]) + 4.0)
            {
                continue;
            }
            base.glands.push(Gland {
                centre: c,
                radii: r,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                thickness: rng.random_range(2.0..3.5),
            });
        }
        base
    }

    /// Normalised radius: `< 1` inside the ribbon.
    fn radial(&self, p: [f64; 2]) -> f64 {
        let (dx, dy) = (p[0] - self.centre[0], p[1] - self.centre[1]);
        let theta = (dy / self.axes[1]).atan2(dx / self.axes[0]);
        let mut scale = 1.0;
        for (k, a, ph) in self.wobble {
            scale += a * (k * theta + ph).sin();
        }
        ((dx / self.axes[0]).powi(2) + (dy / self.axes[1]).powi(2)).sqrt() / scale
    }

    fn inside(&self, p: [f64; 2]) -> bool {
        self.radial(p) <= 1.0
    }

    /// Stain density in `[0, 1]` at a base-tissue point.
    fn density(&self, p: [f64; 2]) -> f64 {
        let mut d: f64 = self.layers.iter().map(|(n, w)| w * n.at(p)).sum();
        d = 0.15 + 0.7 * d;
        for g in &self.glands {
            let (s, c) = g.angle.sin_cos();
            let (dx, dy) = (p[0] - g.centre[0], p[1] - g.centre[1]);
            let (u, v) = ((c * dx + s * dy) / g.radii[0], (-s * dx + c * dy) / g.radii[1]);
            let r = (u * u + v * v).sqrt();
            let mean_radius = 0.5 * (g.radii[0] + g.radii[1]);
            let ring = (r - 1.0).abs() * mean_radius;
            if ring < g.thickness {
                d = 0.95;
            } else if r < 1.0 {
                d = 0.05;
            }
        }
        d
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Generate a stack. Deterministic per `spec.seed`.
pub fn generate_stack(spec: &SynthSpec) -> Result<SynthStack> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = BaseTissue::new(spec, &mut rng);
    let centre = base.centre;

    let mut poses = Vec::with_capacity(spec.sections);
    let mut elastic = Vec::with_capacity(spec.sections);
    for i in 0..spec.sections {
        if i == 0 {
            poses.push(SimilarityTransform::identity());
        } else {
            let theta = uniform(&mut rng, -spec.max_rotation_deg, spec.max_rotation_deg).to_radians();
            let s = uniform(&mut rng, spec.scale_range[0], spec.scale_range[1]);
            // Uniform in the disc of radius max_translation.
            let r = spec.max_translation * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            poses.push(SimilarityTransform::about(centre, s, theta, [r * a.cos(), r * a.sin()]));
        }
        elastic.push(if spec.elastic_amplitude > 0.0 {
            ElasticField {
                amplitude: spec.elastic_amplitude,
                wavelength: spec.elastic_wavelength,
                phase: [
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..std::f64::consts::TAU),
                ],
            }
        } else {
            ElasticField::none()
        });
    }
    let section_seeds: Vec<u64> = (0..spec.sections).map(|_| rng.random()).collect();

    let (w, h) = (spec.width, spec.height);
    let to_base = |i: usize, x: [f64; 2]| elastic[i].inverse(poses[i].inverse().apply(x));
    let to_section = |i: usize, b: [f64; 2]| poses[i].apply(elastic[i].forward(b));

    let rendered: Vec<(SectionImage, BinaryMask)> = (0..spec.sections)
        .into_par_iter()
        .map(|i| {
            let mut srng = ChaCha8Rng::seed_from_u64(section_seeds[i]);
            let own = ValueNoise::new(w as f64, h as f64, 10.0, &mut srng);
            let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("positive sigma");
            let mut img = SectionImage::blank(w, h, spec.mpp);
            img.section_index = i;
            let mut mask = BinaryMask::empty(w, h);
            for y in 0..h {
                for x in 0..w {
                    let b = to_base(i, [x as f64 + 0.5, y as f64 + 0.5]);
                    let grain = if spec.noise_sigma > 0.0 { noise.sample(&mut srng) } else { 0.0 };
                    let rgb = if base.inside(b) {
                        mask.set(x, y, true);
                        let d = (base.density(b) + spec.decorrelation * (own.at(b) - 0.5) * 2.0).clamp(0.0, 1.0);
                        [0, 1, 2].map(|k| PINK[k] + (PURPLE[k] - PINK[k]) * d + grain)
                    } else {
                        [GLASS_LEVEL + grain; 3]
                    };
                    img.set_rgb(x, y, rgb.map(|v| v.round().clamp(0.0, 255.0) as u8));
                }
            }
            (img, mask)
        })
        .collect();
    let (sections, masks): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();

    let mut landmarks = Vec::with_capacity(spec.landmarks);
    let mut tries = 0;
    while landmarks.len() < spec.landmarks {
        tries += 1;
        if tries > spec.landmarks * 1000 + 1000 {
            return Err(Error::InvalidArgument("could not place landmarks inside the ribbon".into()));
        }
        let b = [
            centre[0] + rng.random_range(-1.0..1.0) * base.axes[0],
            centre[1] + rng.random_range(-1.0..1.0) * base.axes[1],
        ];
        if base.radial(b) > 0.9 {
            continue;
        }
        let track: Vec<[f64; 2]> = (0..spec.sections).map(|i| to_section(i, b)).collect();
        let ok = track.iter().zip(&masks).all(|(p, m)| m.get_signed(p[0].floor() as isize, p[1].floor() as isize));
        if ok {
            landmarks.push(track);
        }
    }

    Ok(SynthStack {
        spec: spec.clone(),
        sections,
        masks,
        poses,
        elastic,
        landmarks,
    })
}
