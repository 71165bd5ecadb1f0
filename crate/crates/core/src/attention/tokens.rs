use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::volume::VolumetricPatch;

pub const LN_EPS: f64 = 1e-6;

/// Class token at row 0, then patch tokens with `(p, t)` at row
/// `1 + t * n + p`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub z: Array2<f64>,
    /// Spatial positions per slice.
    pub n: usize,
    /// Depth slices.
    pub f: usize,
}

impl TokenGrid {
    pub fn new(z: Array2<f64>, n: usize, f: usize) -> Result<Self> {
        if z.nrows() != 1 + n * f {
            return Err(Error::ShapeMismatch(format!("{} token rows for a {n}x{f} grid", z.nrows())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite token".into()));
        }
        Ok(Self { z, n, f })
    }

    #[inline]
    pub fn index(&self, p: usize, t: usize) -> usize {
        token_index(self.n, p, t)
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

#[inline]
pub fn token_index(n: usize, p: usize, t: usize) -> usize {
    1 + t * n + p
}

/// Flattened `P x P x 3` patch vectors with pixel values in `[0, 1]`,
/// one row per `(p, t)` in token order (row `t * n + p`). Spatial index
/// `p` runs row-major over the `side / P` grid.
pub fn patch_vectors(patch: &VolumetricPatch, p_side: usize) -> Result<Array2<f64>> {
    if p_side == 0 || patch.side % p_side != 0 {
        return Err(Error::ShapeMismatch(format!("patch side {} is not a multiple of {p_side}", patch.side)));
    }
    let g = patch.side / p_side;
    let n = g * g;
    let mut out = Array2::zeros((n * patch.depth, 3 * p_side * p_side));
    for t in 0..patch.depth {
        for p in 0..n {
            let (gx, gy) = (p % g, p / g);
            let mut row = out.row_mut(t * n + p);
            let mut k = 0;
            for yy in 0..p_side {
                for xx in 0..p_side {
                    let rgb = patch.voxel(t, gx * p_side + xx, gy * p_side + yy);
                    for c in rgb {
                        row[k] = c as f64 / 255.0;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `z = E x + pos` for every patch token and `cls + pos[0]` for the class token.
pub fn tokenize(patch: &VolumetricPatch, e: &Array2<f64>, pos: &Array2<f64>, cls: &Array1<f64>, p_side: usize) -> Result<TokenGrid> {
    let x = patch_vectors(patch, p_side)?;
    let (d, input) = e.dim();
    if input != x.ncols() {
        return Err(Error::ShapeMismatch(format!("embedding expects {input} inputs, patches have {}", x.ncols())));
    }
    let rows = x.nrows() + 1;
    if pos.dim() != (rows, d) || cls.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "position table {:?} and class token {} for {rows} tokens of dim {d}",
            pos.dim(),
            cls.len()
        )));
    }
    let mut z = Array2::zeros((rows, d));
    z.row_mut(0).assign(&(cls + &pos.row(0)));
    let embedded = x.dot(&e.t());
    z.slice_mut(ndarray::s![1.., ..]).assign(&(&embedded + &pos.slice(ndarray::s![1.., ..])));
    let n = (patch.side / p_side).pow(2);
    TokenGrid::new(z, n, patch.depth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    /// Zero-mean, unit-variance version of `x` before gain and bias.
    pub fn standardize(x: ArrayView1<f64>) -> Array1<f64> {
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.mapv(|v| (v - mean) * inv)
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        Self::standardize(x) * &self.gain + &self.bias
    }

    pub fn apply_rows(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(z.dim());
        for (i, row) in z.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&self.apply(row));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patch(rng: &mut ChaCha8Rng, depth: usize, side: usize) -> VolumetricPatch {
        VolumetricPatch {
            origin: [0, 0],
            side,
            depth,
            tissue_fraction: 1.0,
            voxels: (0..depth * side * side * 3).map(|_| rng.random()).collect(),
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_embedding_gives_zero_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patch = random_patch(&mut rng, 2, 8);
        let g = tokenize(&patch, &Array2::zeros((5, 48)), &Array2::zeros((9, 5)), &Array1::zeros(5), 4).unwrap();
        assert!(g.z.iter().all(|&v| v == 0.0));
        assert_eq!((g.n, g.f), (4, 2));
    }

    #[test]
    fn whole_side_patch_is_one_token_per_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let patch = random_patch(&mut rng, 3, 8);
        let g = tokenize(&patch, &Array2::zeros((4, 192)), &Array2::zeros((4, 4)), &Array1::zeros(4), 8).unwrap();
        assert_eq!(g.n, 1);
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn tokenize_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (depth, side, ps, d) = (2, 8, 4, 6);
        let patch = random_patch(&mut rng, depth, side);
        let e = random_matrix(&mut rng, d, 3 * ps * ps);
        let pos = random_matrix(&mut rng, 1 + 4 * depth, d);
        let cls = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
        let g = tokenize(&patch, &e, &pos, &cls, ps).unwrap();
        for t in 0..depth {
            for gy in 0..2 {
                for gx in 0..2 {
                    let p = gy * 2 + gx;
                    let mut x = Vec::new();
                    for yy in 0..ps {
                        for xx in 0..ps {
                            let base = ((t * side + gy * ps + yy) * side + gx * ps + xx) * 3;
                            for c in 0..3 {
                                x.push(patch.voxels[base + c] as f64 / 255.0);
                            }
                        }
                    }
                    let row = 1 + t * 4 + p;
                    for k in 0..d {
                        let mut acc = pos[[row, k]];
                        for (m, xv) in x.iter().enumerate() {
                            acc += e[[k, m]] * xv;
                        }
                        assert!((g.z[[row, k]] - acc).abs() < 1e-9);
                    }
                }
            }
        }
        for k in 0..d {
            assert!((g.z[[0, k]] - cls[k] - pos[[0, k]]).abs() < 1e-12);
        }
    }

    #[test]
    fn tokenize_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let patch = random_patch(&mut rng, 1, 8);
        assert!(tokenize(&patch, &Array2::zeros((4, 48)), &Array2::zeros((5, 4)), &Array1::zeros(4), 3).is_err());
        assert!(tokenize(&patch, &Array2::zeros((4, 47)), &Array2::zeros((5, 4)), &Array1::zeros(4), 4).is_err());
        assert!(tokenize(&patch, &Array2::zeros((4, 48)), &Array2::zeros((6, 4)), &Array1::zeros(4), 4).is_err());
    }

    #[test]
    fn layer_norm_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = LayerNorm::standardize(Array1::from_elem(16, 3.7).view());
        assert!(c.iter().all(|&v| v == 0.0));
        for _ in 0..20 {
            let x = Array1::from_shape_fn(64, |_| rng.random_range(-3.0..3.0));
            let y = LayerNorm::standardize(x.view());
            let mean = y.sum() / 64.0;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
