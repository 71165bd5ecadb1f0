use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_bytes, write_json};

/// Named access to every trainable tensor, in a fixed order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let n = self.num_parameters();
        if values.len() != n {
            return Err(Error::ShapeMismatch(format!("{} values for {n} parameters", values.len())));
        }
        let mut off = 0;
        self.visit_mut(&mut |_, _, v| {
            v.copy_from_slice(&values[off..off + v.len()]);
            off += v.len();
        });
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the weight file, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub weights: String,
    pub tensors: Vec<TensorEntry>,
}

fn manifest_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

/// Little-endian `f32` weights at `path` plus a JSON manifest next to it.
pub fn save_checkpoint(model: &impl Parameters, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(model.num_parameters() * 4);
    let mut tensors = Vec::new();
    let mut offset = 0;
    model.visit(&mut |name, shape, v| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        offset += v.len();
        for x in v {
            bytes.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    });
    write_bytes(path, &bytes)?;
    let manifest = CheckpointManifest {
        dtype: "f32le".into(),
        weights: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        tensors,
    };
    write_json(&manifest, &manifest_path(path))
}

/// Load weights saved by [`save_checkpoint`]; names and shapes must match.
pub fn load_checkpoint(model: &mut impl Parameters, path: &Path) -> Result<()> {
    let manifest: CheckpointManifest = read_json(&manifest_path(path))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "weight file is not a whole number of f32 values".into(),
        });
    }
    let values: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let mut problem = None;
    let mut k = 0;
    model.visit_mut(&mut |name, shape, v| {
        if problem.is_some() {
            return;
        }
        match manifest.tensors.get(k) {
            Some(t) if t.name == name && t.shape == shape && t.offset + v.len() <= values.len() => {
                v.copy_from_slice(&values[t.offset..t.offset + v.len()]);
            }
            Some(t) => problem = Some(format!("tensor {k}: expected {name} {shape:?}, found {} {:?}", t.name, t.shape)),
            None => problem = Some(format!("checkpoint has no tensor {name}")),
        }
        k += 1;
    });
    if problem.is_none() && k != manifest.tensors.len() {
        problem = Some(format!("checkpoint has {} tensors, model {k}", manifest.tensors.len()));
    }
    match problem {
        Some(reason) => Err(Error::Format {
            path: path.to_path_buf(),
            reason,
        }),
        None => Ok(()),
    }
}
