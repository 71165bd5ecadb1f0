use ndarray::{s, Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::rollout::{AttentionStack, LayerAttention};
use super::tokens::{token_index, tokenize, LayerNorm, TokenGrid};
use crate::error::{Error, Result};
use crate::volume::VolumetricPatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sublayer {
    Time,
    Space,
}

/// Projections and output map of one attention sub-layer. Head `a` owns
/// rows `a * d_h .. (a + 1) * d_h` of `wq`, `wk` and `wv`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub norm: LayerNorm,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub heads: usize,
    pub time: AttentionWeights,
    pub space: AttentionWeights,
    pub mlp_norm: LayerNorm,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl BlockWeights {
    pub fn sublayer(&self, which: Sublayer) -> &AttentionWeights {
        match which {
            Sublayer::Time => &self.time,
            Sublayer::Space => &self.space,
        }
    }

    pub fn dim(&self) -> usize {
        self.time.wq.ncols()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn random(dim: usize, heads: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("embedding dim {dim} is not divisible by {heads} heads")));
        }
        let sub = |rng: &mut ChaCha8Rng| AttentionWeights {
            norm: LayerNorm::new(dim),
            wq: gaussian(rng, dim, dim),
            wk: gaussian(rng, dim, dim),
            wv: gaussian(rng, dim, dim),
            wo: gaussian(rng, dim, dim),
            bo: Array1::zeros(dim),
        };
        let time = sub(rng);
        let space = sub(rng);
        Ok(Self {
            heads,
            time,
            space,
            mlp_norm: LayerNorm::new(dim),
            w1: gaussian(rng, hidden, dim),
            b1: Array1::zeros(hidden),
            w2: gaussian(rng, dim, hidden),
            b2: Array1::zeros(dim),
        })
    }
}

/// `rows x cols` with entries N(0, 1/cols).
pub(crate) fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let nd = Normal::new(0.0, 1.0 / (cols.max(1) as f64).sqrt()).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| nd.sample(rng))
}

/// Per-head `tokens x d_h` queries, keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjections {
    pub q: Vec<Array2<f64>>,
    pub k: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

/// `q = W_Q LN(z)` and likewise for keys and values, split by head.
pub fn qkv(z: &Array2<f64>, block: &BlockWeights, which: Sublayer) -> Result<HeadProjections> {
    let w = block.sublayer(which);
    let d = z.ncols();
    if w.wq.dim() != (d, d) || w.wk.dim() != (d, d) || w.wv.dim() != (d, d) {
        return Err(Error::ShapeMismatch(format!("projection weights do not match token dim {d}")));
    }
    let ln = w.norm.apply_rows(z);
    let dh = block.head_dim();
    let split = |m: &Array2<f64>| -> Vec<Array2<f64>> {
        let all = ln.dot(&m.t());
        (0..block.heads).map(|a| all.slice(s![.., a * dh..(a + 1) * dh]).to_owned()).collect()
    };
    Ok(HeadProjections {
        q: split(&w.wq),
        k: split(&w.wk),
        v: split(&w.wv),
    })
}

/// Head-averaged weights of one divided sub-layer.
///
/// For time attention `within[[p, j, q]]` is the weight of `(p, j)` on
/// `(p, q)`; for space attention `within[[i, j, p]]` is the weight of
/// `(i, j)` on `(p, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SublayerAttention {
    pub kind: Sublayer,
    pub n: usize,
    pub f: usize,
    /// The class token's weights over every token.
    pub class_row: Array1<f64>,
    /// Weight each patch token puts on the class key, indexed `[p, t]`.
    pub class_key: Array2<f64>,
    pub within: Array3<f64>,
}

impl SublayerAttention {
    pub fn tokens(&self) -> usize {
        1 + self.n * self.f
    }

    /// The full `tokens x tokens` row-stochastic matrix.
    pub fn dense(&self) -> Array2<f64> {
        let t = self.tokens();
        let mut m = Array2::zeros((t, t));
        m.row_mut(0).assign(&self.class_row);
        for tt in 0..self.f {
            for p in 0..self.n {
                let i = token_index(self.n, p, tt);
                m[[i, 0]] = self.class_key[[p, tt]];
                match self.kind {
                    Sublayer::Time => {
                        for q in 0..self.f {
                            m[[i, token_index(self.n, p, q)]] = self.within[[p, tt, q]];
                        }
                    }
                    Sublayer::Space => {
                        for q in 0..self.n {
                            m[[i, token_index(self.n, q, tt)]] = self.within[[p, tt, q]];
                        }
                    }
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Concatenated per-head weighted value sums, `tokens x (heads * d_h)`.
    pub heads_out: Array2<f64>,
    pub attention: SublayerAttention,
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

fn divided(proj: &HeadProjections, n: usize, f: usize, class_key: bool, kind: Sublayer) -> Result<AttentionOutput> {
    let heads = proj.q.len();
    if heads == 0 || proj.k.len() != heads || proj.v.len() != heads {
        return Err(Error::ShapeMismatch("inconsistent head count".into()));
    }
    let tok = 1 + n * f;
    let dh = proj.q[0].ncols();
    for a in 0..heads {
        for m in [&proj.q[a], &proj.k[a], &proj.v[a]] {
            if m.dim() != (tok, dh) {
                return Err(Error::ShapeMismatch(format!("projection {:?} for {tok} tokens of head dim {dh}", m.dim())));
            }
        }
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let inv_heads = 1.0 / heads as f64;
    let group = match kind {
        Sublayer::Time => f,
        Sublayer::Space => n,
    };
    let mut heads_out = Array2::zeros((tok, heads * dh));
    let mut class_row = Array1::zeros(tok);
    let mut class_w = Array2::zeros((n, f));
    let mut within = Array3::zeros((n, f, group));
    let mut keys = Vec::with_capacity(group + 1);
    let mut w = Vec::with_capacity(tok);
    for a in 0..heads {
        let (q, k, v) = (&proj.q[a], &proj.k[a], &proj.v[a]);
        let mut out = heads_out.slice_mut(s![.., a * dh..(a + 1) * dh]);

        w.clear();
        w.extend((0..tok).map(|j| q.row(0).dot(&k.row(j)) * scale));
        softmax_in_place(&mut w);
        for (j, wj) in w.iter().enumerate() {
            class_row[j] += wj * inv_heads;
            out.row_mut(0).scaled_add(*wj, &v.row(j));
        }

        for t in 0..f {
            for p in 0..n {
                let i = token_index(n, p, t);
                keys.clear();
                if class_key {
                    keys.push(0);
                }
                match kind {
                    Sublayer::Time => keys.extend((0..f).map(|u| token_index(n, p, u))),
                    Sublayer::Space => keys.extend((0..n).map(|u| token_index(n, u, t))),
                }
                w.clear();
                w.extend(keys.iter().map(|&j| q.row(i).dot(&k.row(j)) * scale));
                softmax_in_place(&mut w);
                for (&j, wj) in keys.iter().zip(&w) {
                    out.row_mut(i).scaled_add(*wj, &v.row(j));
                }
                let off = class_key as usize;
                if class_key {
                    class_w[[p, t]] += w[0] * inv_heads;
                }
                for m in 0..group {
                    within[[p, t, m]] += w[off + m] * inv_heads;
                }
            }
        }
    }
    Ok(AttentionOutput {
        heads_out,
        attention: SublayerAttention {
            kind,
            n,
            f,
            class_row,
            class_key: class_w,
            within,
        },
    })
}

/// Each patch token attends to the class token (when `class_key`) and to
/// the tokens at its own spatial position across depth. The class token
/// attends to every token.
pub fn time_attention(proj: &HeadProjections, n: usize, f: usize, class_key: bool) -> Result<AttentionOutput> {
    divided(proj, n, f, class_key, Sublayer::Time)
}

/// Each patch token attends to the class token (when `class_key`) and to
/// every token of its own slice. The class token attends to every token.
pub fn space_attention(proj: &HeadProjections, n: usize, f: usize, class_key: bool) -> Result<AttentionOutput> {
    divided(proj, n, f, class_key, Sublayer::Space)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Pre-norm residual block: time attention, space attention, then MLP.
pub fn block_forward(z: &Array2<f64>, block: &BlockWeights, n: usize, f: usize, class_key: bool) -> Result<(Array2<f64>, LayerAttention)> {
    let pt = qkv(z, block, Sublayer::Time)?;
    let time = time_attention(&pt, n, f, class_key)?;
    let z_time = z + &time.heads_out.dot(&block.time.wo.t()) + &block.time.bo;
    let ps = qkv(&z_time, block, Sublayer::Space)?;
    let space = space_attention(&ps, n, f, class_key)?;
    let z_space = &z_time + &space.heads_out.dot(&block.space.wo.t()) + &block.space.bo;
    let hidden = (block.mlp_norm.apply_rows(&z_space).dot(&block.w1.t()) + &block.b1).mapv(gelu);
    let out = &z_space + &hidden.dot(&block.w2.t()) + &block.b2;
    Ok((
        out,
        LayerAttention {
            time: time.attention,
            space: space.attention,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub patch: usize,
    pub side: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    /// Whether patch tokens see the class key in both sub-layers.
    pub class_key: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            layers: 2,
            patch: 8,
            side: 32,
            depth: 4,
            mlp_hidden: 256,
            class_key: true,
        }
    }
}

impl EncoderConfig {
    pub fn spatial_tokens(&self) -> usize {
        (self.side / self.patch).pow(2)
    }

    pub fn tokens(&self) -> usize {
        1 + self.spatial_tokens() * self.depth
    }
}

/// Forward-only divided space-time encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeEncoder {
    pub config: EncoderConfig,
    pub embed: Array2<f64>,
    pub pos: Array2<f64>,
    pub cls: Array1<f64>,
    pub blocks: Vec<BlockWeights>,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub tokens: Array2<f64>,
    /// Layer-normalised final class token.
    pub class_embedding: Array1<f64>,
    pub stack: AttentionStack,
}

impl VolumeEncoder {
    pub fn random(config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.patch == 0 || config.side % config.patch != 0 {
            return Err(Error::InvalidArgument(format!("side {} is not a multiple of patch {}", config.side, config.patch)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = 3 * config.patch * config.patch;
        let embed = gaussian(&mut rng, config.dim, input);
        let pos = gaussian(&mut rng, config.tokens(), config.dim) * (config.dim as f64).sqrt() * 0.5;
        let cls = gaussian(&mut rng, 1, config.dim).row(0).to_owned() * (config.dim as f64).sqrt() * 0.5;
        let blocks = (0..config.layers)
            .map(|_| BlockWeights::random(config.dim, config.heads, config.mlp_hidden, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            embed,
            pos,
            cls,
            blocks,
            norm: LayerNorm::new(config.dim),
        })
    }

    pub fn tokenize(&self, patch: &VolumetricPatch) -> Result<TokenGrid> {
        if patch.depth != self.config.depth || patch.side != self.config.side {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {}x{} patches of depth {}, got {}x{} of depth {}",
                self.config.side, self.config.side, self.config.depth, patch.side, patch.side, patch.depth
            )));
        }
        tokenize(patch, &self.embed, &self.pos, &self.cls, self.config.patch)
    }

    pub fn forward(&self, grid: &TokenGrid) -> Result<EncoderOutput> {
        let mut z = grid.z.clone();
        let mut layers = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, att) = block_forward(&z, b, grid.n, grid.f, self.config.class_key)?;
            z = next;
            layers.push(att);
        }
        Ok(EncoderOutput {
            class_embedding: self.norm.apply(z.row(0)),
            tokens: z,
            stack: AttentionStack {
                n: grid.n,
                f: grid.f,
                layers,
            },
        })
    }

    pub fn encode(&self, patch: &VolumetricPatch) -> Result<EncoderOutput> {
        self.forward(&self.tokenize(patch)?)
    }
}
