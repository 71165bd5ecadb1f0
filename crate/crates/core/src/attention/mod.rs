//! Divided space-time attention, attention rollout, attention-based MIL
//! pooling and the self-distillation helpers.
//!
//! Tokens of a `(n, f)` grid are stored with the class token at row 0 and
//! patch `(p, t)` at row `1 + t * n + p`.

mod abmil;
mod checkpoint;
mod dino;
mod divided;
mod rollout;
mod tokens;

use std::fs;
use std::path::Path;

use ndarray::Array2;

pub use abmil::{abmil_backward, abmil_forward, abmil_loss, predict, toy_mil_dataset, train_abmil, AbmilModel, AbmilOutput, Adam, ToyMilSet, TrainConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, Parameters, TensorEntry};
pub use dino::{dino_loss, ema_update, update_center};
pub use divided::{
    block_forward, qkv, space_attention, time_attention, AttentionOutput, AttentionWeights, BlockWeights, EncoderConfig, EncoderOutput,
    HeadProjections, Sublayer, SublayerAttention, VolumeEncoder,
};
pub use rollout::{combine_space_time, layer_matrix, rollout, AttentionStack, LayerAttention, Rollout};
pub use tokens::{patch_vectors, token_index, tokenize, LayerNorm, TokenGrid, LN_EPS};

use crate::error::{Error, Result};
use crate::io::write_bytes;

impl Parameters for VolumeEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("embed", self.embed.shape(), self.embed.as_slice().unwrap());
        f("pos", self.pos.shape(), self.pos.as_slice().unwrap());
        f("cls", self.cls.shape(), self.cls.as_slice().unwrap());
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, s) in [("time", &b.time), ("space", &b.space)] {
                f(&format!("blocks.{i}.{tag}.norm.gain"), s.norm.gain.shape(), s.norm.gain.as_slice().unwrap());
                f(&format!("blocks.{i}.{tag}.norm.bias"), s.norm.bias.shape(), s.norm.bias.as_slice().unwrap());
                for (n, m) in [("wq", &s.wq), ("wk", &s.wk), ("wv", &s.wv), ("wo", &s.wo)] {
                    f(&format!("blocks.{i}.{tag}.{n}"), m.shape(), m.as_slice().unwrap());
                }
                f(&format!("blocks.{i}.{tag}.bo"), s.bo.shape(), s.bo.as_slice().unwrap());
            }
            f(&format!("blocks.{i}.mlp.norm.gain"), b.mlp_norm.gain.shape(), b.mlp_norm.gain.as_slice().unwrap());
            f(&format!("blocks.{i}.mlp.norm.bias"), b.mlp_norm.bias.shape(), b.mlp_norm.bias.as_slice().unwrap());
            f(&format!("blocks.{i}.mlp.w1"), b.w1.shape(), b.w1.as_slice().unwrap());
            f(&format!("blocks.{i}.mlp.b1"), b.b1.shape(), b.b1.as_slice().unwrap());
            f(&format!("blocks.{i}.mlp.w2"), b.w2.shape(), b.w2.as_slice().unwrap());
            f(&format!("blocks.{i}.mlp.b2"), b.b2.shape(), b.b2.as_slice().unwrap());
        }
        f("norm.gain", self.norm.gain.shape(), self.norm.gain.as_slice().unwrap());
        f("norm.bias", self.norm.bias.shape(), self.norm.bias.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        fn go<D: ndarray::Dimension>(f: &mut dyn FnMut(&str, &[usize], &mut [f64]), name: &str, a: &mut ndarray::Array<f64, D>) {
            let shape = a.shape().to_vec();
            f(name, &shape, a.as_slice_mut().unwrap());
        }
        go(f, "embed", &mut self.embed);
        go(f, "pos", &mut self.pos);
        go(f, "cls", &mut self.cls);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (tag, s) in [("time", &mut b.time), ("space", &mut b.space)] {
                go(f, &format!("blocks.{i}.{tag}.norm.gain"), &mut s.norm.gain);
                go(f, &format!("blocks.{i}.{tag}.norm.bias"), &mut s.norm.bias);
                go(f, &format!("blocks.{i}.{tag}.wq"), &mut s.wq);
                go(f, &format!("blocks.{i}.{tag}.wk"), &mut s.wk);
                go(f, &format!("blocks.{i}.{tag}.wv"), &mut s.wv);
                go(f, &format!("blocks.{i}.{tag}.wo"), &mut s.wo);
                go(f, &format!("blocks.{i}.{tag}.bo"), &mut s.bo);
            }
            go(f, &format!("blocks.{i}.mlp.norm.gain"), &mut b.mlp_norm.gain);
            go(f, &format!("blocks.{i}.mlp.norm.bias"), &mut b.mlp_norm.bias);
            go(f, &format!("blocks.{i}.mlp.w1"), &mut b.w1);
            go(f, &format!("blocks.{i}.mlp.b1"), &mut b.b1);
            go(f, &format!("blocks.{i}.mlp.w2"), &mut b.w2);
            go(f, &format!("blocks.{i}.mlp.b2"), &mut b.b2);
        }
        go(f, "norm.gain", &mut self.norm.gain);
        go(f, "norm.bias", &mut self.norm.bias);
    }
}

/// Feature blob: `u32` rows and `u32` columns (little endian), then
/// row-major `f32` values.
pub fn write_feature_bag(bag: &Array2<f64>, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(8 + bag.len() * 4);
    out.extend_from_slice(&(bag.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(bag.ncols() as u32).to_le_bytes());
    for v in bag.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_bytes(path, &out)
}

pub fn read_feature_bag(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + rows * cols * 4 {
        return Err(bad("size does not match header"));
    }
    let values = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| bad(&e.to_string()))
}
