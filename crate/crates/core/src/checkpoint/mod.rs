//! In-memory checkpoints and their on-disk container.

mod align;
mod safetensors;

pub use align::{
    align_layers, kind_counts, Alignment, AlignmentSpec, LayerKind, LayerTriple, OnMissing, PassThrough,
    PassThroughReason, RenameRule,
};
pub use safetensors::{
    deserialize_checkpoint, load_checkpoint, save_checkpoint, serialize_checkpoint,
};
pub(crate) use safetensors::{tensor_bytes, write_atomic};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Storage precision of a tensor on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    /// Rounds `v` to the nearest value representable in this dtype.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F16 => half::f16::from_f64(v).to_f64(),
            DType::BF16 => half::bf16::from_f64(v).to_f64(),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            other => Err(format!("unsupported dtype `{other}`")),
        }
    }
}

/// What dtype each tensor is written with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DTypePolicy {
    #[default]
    Preserve,
    ForceF32,
    ForceF16,
    ForceBf16,
}

impl DTypePolicy {
    pub fn resolve(self, original: DType) -> DType {
        match self {
            DTypePolicy::Preserve => original,
            DTypePolicy::ForceF32 => DType::F32,
            DTypePolicy::ForceF16 => DType::F16,
            DTypePolicy::ForceBf16 => DType::BF16,
        }
    }
}

impl FromStr for DTypePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "preserve" => Ok(DTypePolicy::Preserve),
            "force_f32" | "f32" => Ok(DTypePolicy::ForceF32),
            "force_f16" | "f16" => Ok(DTypePolicy::ForceF16),
            "force_bf16" | "bf16" => Ok(DTypePolicy::ForceBf16),
            other => Err(format!("unknown dtype policy `{other}`")),
        }
    }
}

/// A dense tensor decoded to `f64`, remembering its storage dtype.
/// Values are held as `f64`; the writer rounds them to `dtype`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Config(format!(
                "shape {shape:?} holds {numel} elements but {} values were given",
                values.len()
            )));
        }
        Ok(Self {
            dtype,
            shape,
            values,
        })
    }

    pub fn from_matrix(dtype: DType, m: Matrix) -> Self {
        let shape = vec![m.rows(), m.cols()];
        Self {
            dtype,
            shape,
            values: m.into_data(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// 2-D view as a [`Matrix`]; `None` for other ranks.
    pub fn to_matrix(&self) -> Option<Matrix> {
        match self.shape.as_slice() {
            &[r, c] => Some(Matrix::new(r, c, self.values.clone()).expect("shape checked")),
            _ => None,
        }
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub(crate) fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
            .map(|(i, &v)| (i, v))
    }
}

/// Name → tensor map, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorMap {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl NamedTensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; rejects a name that is already present.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn replace(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// 2-D tensor as a matrix, with a descriptive error otherwise.
    pub fn matrix(&self, name: &str, source_label: &str) -> Result<Matrix> {
        let t = self.get(name).ok_or_else(|| Error::MissingTensor {
            tensor: name.to_owned(),
            source_label: source_label.to_owned(),
        })?;
        t.to_matrix().ok_or_else(|| Error::ShapeMismatch {
            tensor: name.to_owned(),
            expected: vec![],
            got: t.shape.clone(),
            what: "expected a 2-D tensor".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_insert_rejected() {
        let mut m = NamedTensorMap::new();
        let t = Tensor::new(DType::F32, vec![1], vec![1.0]).unwrap();
        m.insert("w", t.clone()).unwrap();
        assert!(m.insert("w", t).is_err());
    }

    #[test]
    fn iteration_is_lexicographic() {
        let mut m = NamedTensorMap::new();
        for n in ["b", "a.2", "a.10", "C"] {
            m.insert(n, Tensor::new(DType::F32, vec![], vec![0.0]).unwrap())
                .unwrap();
        }
        let names: Vec<_> = m.names().cloned().collect();
        assert_eq!(names, ["C", "a.10", "a.2", "b"]);
    }

    #[test]
    fn quantize_widening_is_lossless() {
        let v = half::bf16::from_f32(1.234).to_f64();
        assert_eq!(DType::F32.quantize(v), v);
        assert_eq!(DType::BF16.quantize(v), v);
    }

    #[test]
    fn policy_resolution() {
        assert_eq!(DTypePolicy::Preserve.resolve(DType::BF16), DType::BF16);
        assert_eq!(DTypePolicy::ForceF16.resolve(DType::F32), DType::F16);
        assert_eq!("bf16".parse::<DTypePolicy>().unwrap(), DTypePolicy::ForceBf16);
    }
}
