use ndarray::{Array2, Array4};

use super::divided::{Sublayer, SublayerAttention};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub time: SublayerAttention,
    pub space: SublayerAttention,
}

/// Head-averaged attention of every block, input first.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub n: usize,
    pub f: usize,
    pub layers: Vec<LayerAttention>,
}

impl AttentionStack {
    pub fn tokens(&self) -> usize {
        1 + self.n * self.f
    }
}

/// `W[i, j, p, q] = S[i, j, p] * T[p, j, q]`: the weight of patch token
/// `(i, j)` on `(p, q)` through the single path `(i, j) -> (p, j) -> (p, q)`.
pub fn combine_space_time(space: &SublayerAttention, time: &SublayerAttention) -> Result<Array4<f64>> {
    check_pair(space, time)?;
    let (n, f) = (space.n, space.f);
    Ok(Array4::from_shape_fn((n, f, n, f), |(i, j, p, q)| space.within[[i, j, p]] * time.within[[p, j, q]]))
}

fn check_pair(space: &SublayerAttention, time: &SublayerAttention) -> Result<()> {
    if space.kind != Sublayer::Space || time.kind != Sublayer::Time {
        return Err(Error::InvalidArgument("expected a space and a time sub-layer".into()));
    }
    if (space.n, space.f) != (time.n, time.f) {
        return Err(Error::ShapeMismatch(format!(
            "space grid {}x{} vs time grid {}x{}",
            space.n, space.f, time.n, time.f
        )));
    }
    Ok(())
}

/// Token-to-token matrix of one block: space attention after time
/// attention, including the paths that pass through the class token.
/// Its patch block differs from [`combine_space_time`] only by those
/// class-token paths.
pub fn layer_matrix(layer: &LayerAttention) -> Result<Array2<f64>> {
    check_pair(&layer.space, &layer.time)?;
    Ok(layer.space.dense().dot(&layer.time.dense()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Row `i` distributes output token `i` over the input tokens.
    pub matrix: Array2<f64>,
    /// The class token's relevance over the input patch tokens, `[p, t]`,
    /// renormalised to sum to 1 (all zeros if it has no patch mass).
    pub class_relevance: Array2<f64>,
}

fn with_residual(m: &Array2<f64>) -> Array2<f64> {
    let mut r = m * 0.5;
    for i in 0..r.nrows() {
        r[[i, i]] += 0.5;
    }
    for mut row in r.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    r
}

/// Multiply residual-augmented block matrices from the input layer up.
pub fn rollout(stack: &AttentionStack) -> Result<Rollout> {
    if stack.layers.is_empty() {
        return Err(Error::EmptyInput("attention layers"));
    }
    let t = stack.tokens();
    let mut r = Array2::eye(t);
    for layer in &stack.layers {
        let m = layer_matrix(layer)?;
        if m.dim() != (t, t) {
            return Err(Error::ShapeMismatch(format!("layer matrix {:?} for {t} tokens", m.dim())));
        }
        r = with_residual(&m).dot(&r);
    }
    let mut rel = Array2::zeros((stack.n, stack.f));
    let mut mass = 0.0;
    for tt in 0..stack.f {
        for p in 0..stack.n {
            let v = r[[0, 1 + tt * stack.n + p]];
            rel[[p, tt]] = v;
            mass += v;
        }
    }
    if mass > 0.0 {
        rel /= mass;
    }
    Ok(Rollout {
        matrix: r,
        class_relevance: rel,
    })
}
