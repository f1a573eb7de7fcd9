//! Named parameter storage and the named-tensor archive format.
//!
//! Archives are safetensors files: every tensor is stored as row-major
//! little-endian `float32` with a 2-D shape, and the header metadata carries
//! free-form string tags such as the training stage.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Name-keyed tensors. Names are dot-separated paths such as
/// `adapter.music.attn.wq`; the first segment is the owning component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    pub fn num_params_matching(&self, mask: &TrainMask) -> usize {
        self.iter()
            .filter(|(n, _)| mask.contains(n))
            .map(|(_, m)| m.len())
            .sum()
    }

    /// Copy every tensor of `other` into `self`, replacing same-named entries.
    pub fn merge(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn save(&self, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
        let buffers: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(name, m)| {
                let bytes = m
                    .data()
                    .iter()
                    .flat_map(|&v| (v as f32).to_le_bytes())
                    .collect();
                (name.clone(), bytes, vec![m.rows(), m.cols()])
            })
            .collect();
        let mut views = Vec::with_capacity(buffers.len());
        for (name, bytes, shape) in &buffers {
            let view = TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map_err(|e| Error::format(path, e))?;
            views.push((name.clone(), view));
        }
        let meta: HashMap<String, String> =
            metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let bytes = safetensors::tensor::serialize(views, Some(meta))
            .map_err(|e| Error::format(path, e))?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
        let bytes = std::fs::read(path)?;
        let (_, header) =
            SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default();
        let tensors = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e))?;
        let mut store = ParamStore::new();
        for (name, view) in tensors.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::format(path, format!("{name}: expected F32")));
            }
            let (rows, cols) = match view.shape() {
                [r, c] => (*r, *c),
                other => {
                    return Err(Error::format(path, format!("{name}: rank-2 expected, got {other:?}")))
                }
            };
            let data = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            store.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        Ok((store, metadata))
    }
}

/// Which parameters receive gradients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainMask {
    All,
    Nothing,
    /// Names starting with any of these prefixes.
    Prefixes(Vec<String>),
}

impl TrainMask {
    pub fn prefixes<S: Into<String>>(p: impl IntoIterator<Item = S>) -> Self {
        TrainMask::Prefixes(p.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        match self {
            TrainMask::All => true,
            TrainMask::Nothing => false,
            TrainMask::Prefixes(p) => p.iter().any(|pre| name.starts_with(pre.as_str())),
        }
    }
}

/// Xavier-style uniform init: bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::uniform(rows, cols, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn archive_round_trip_preserves_f32_values_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        let mut store = ParamStore::new();
        let mut rng = stream(1, "t");
        store.insert("a.w", xavier(3, 5, &mut rng));
        store.insert("b", Matrix::row_vector(vec![0.25, -1.5]));
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), "2".to_string());
        store.save(&path, &meta).unwrap();
        let (back, meta_back) = ParamStore::load(&path).unwrap();
        assert_eq!(meta_back.get("stage").map(String::as_str), Some("2"));
        assert_eq!(back.get("b").unwrap().data(), &[0.25, -1.5]);
        let w = store.get("a.w").unwrap();
        let wb = back.get("a.w").unwrap();
        assert_eq!(w.shape(), wb.shape());
        for (x, y) in w.data().iter().zip(wb.data()) {
            assert_eq!((*x as f32) as f64, *y);
        }
    }

    #[test]
    fn mask_prefixes() {
        let m = TrainMask::prefixes(["adapter.", "fusion."]);
        assert!(m.contains("adapter.music.attn.wq"));
        assert!(!m.contains("lm.layers.0.wq"));
        assert!(TrainMask::All.contains("x"));
        assert!(!TrainMask::Nothing.contains("x"));
    }
}
