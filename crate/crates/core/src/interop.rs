//! Files shared with external validators: a tensor manifest and a tiny
//! decoder whose forward pass on fixed inputs serves as a reference.
//!
//! The decoder block, applied `num_layers` times to hidden states `x`:
//!
//! ```text
//! h = rms_norm(x, input_layernorm)
//! x = x + o_proj(softmax_causal(q_proj(h) · k_proj(h)ᵀ / √d) · v_proj(h))
//! h = rms_norm(x, post_attention_layernorm)
//! x = x + down_proj(silu(gate_proj(h)) ⊙ up_proj(h))
//! ```
//!
//! Linear layers follow the `[out_features, in_features]` weight layout, so
//! `q_proj(h) = h·Wᵀ`. Attention is single-head over the full hidden width.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{DType, NamedTensorMap};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn of(map: &NamedTensorMap) -> Self {
        Self {
            format: "safetensors".into(),
            tensors: map
                .iter()
                .map(|(name, t)| ManifestEntry {
                    name: name.clone(),
                    dtype: t.dtype(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    /// Differences against `map`, one line each; empty when it conforms.
    pub fn diff(&self, map: &NamedTensorMap) -> Vec<String> {
        let mut out = Vec::new();
        for e in &self.tensors {
            match map.get(&e.name) {
                None => out.push(format!("missing `{}`", e.name)),
                Some(t) => {
                    if t.dtype() != e.dtype {
                        out.push(format!("`{}` dtype {} != {}", e.name, t.dtype(), e.dtype));
                    }
                    if t.shape() != e.shape.as_slice() {
                        out.push(format!("`{}` shape {:?} != {:?}", e.name, t.shape(), e.shape));
                    }
                }
            }
        }
        for name in map.names() {
            if !self.tensors.iter().any(|e| &e.name == name) {
                out.push(format!("unexpected `{name}`"));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyArchitecture {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_layers: usize,
    pub rms_norm_eps: f64,
    /// Tensor names are `{prefix}.{layer}.{suffix}`.
    pub prefix: String,
    pub seq_len: usize,
    pub input_seed: u64,
}

impl Default for ToyArchitecture {
    fn default() -> Self {
        Self {
            hidden_size: 16,
            intermediate_size: 32,
            num_layers: 2,
            rms_norm_eps: 1e-6,
            prefix: "model.layers".into(),
            seq_len: 4,
            input_seed: 7,
        }
    }
}

const ATTN: [&str; 4] = ["q_proj", "k_proj", "v_proj", "o_proj"];

impl ToyArchitecture {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("architecture {}: {e}", path.display())))
    }

    fn name(&self, layer: usize, suffix: &str) -> String {
        format!("{}.{layer}.{suffix}", self.prefix)
    }

    /// Every tensor the forward pass reads, with its shape.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let (h, i) = (self.hidden_size, self.intermediate_size);
        let mut out = Vec::new();
        for l in 0..self.num_layers {
            out.push((self.name(l, "input_layernorm.weight"), vec![h]));
            for p in ATTN {
                out.push((self.name(l, &format!("self_attn.{p}.weight")), vec![h, h]));
            }
            out.push((self.name(l, "post_attention_layernorm.weight"), vec![h]));
            out.push((self.name(l, "mlp.gate_proj.weight"), vec![i, h]));
            out.push((self.name(l, "mlp.up_proj.weight"), vec![i, h]));
            out.push((self.name(l, "mlp.down_proj.weight"), vec![h, i]));
        }
        out
    }

    /// Fixed standard-normal hidden states, `[seq_len, hidden_size]`.
    pub fn inputs(&self) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(self.input_seed);
        Matrix::from_fn(self.seq_len, self.hidden_size, |_, _| {
            StandardNormal.sample(&mut rng)
        })
    }

    fn weight(&self, map: &NamedTensorMap, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let t = map.get(name).ok_or_else(|| Error::MissingTensor {
            tensor: name.to_owned(),
            source_label: "checkpoint".into(),
        })?;
        if t.shape() != shape {
            return Err(Error::ShapeMismatch {
                tensor: name.to_owned(),
                expected: shape.to_vec(),
                got: t.shape().to_vec(),
                what: "tiny decoder weight".into(),
            });
        }
        Ok(t.values().to_vec())
    }

    pub fn forward(&self, map: &NamedTensorMap, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != self.hidden_size {
            return Err(Error::Config(format!(
                "inputs have width {}, architecture expects {}",
                inputs.cols(),
                self.hidden_size
            )));
        }
        let mut w = std::collections::HashMap::new();
        for (name, shape) in self.expected_tensors() {
            let v = self.weight(map, &name, &shape)?;
            w.insert(name, (shape, v));
        }
        let mat = |name: String| -> Matrix {
            let (shape, v) = &w[&name];
            Matrix::new(shape[0], shape[1], v.clone()).expect("shape checked")
        };
        let vec = |name: String| -> Vec<f64> { w[&name].1.clone() };
        let linear = |x: &Matrix, weight: Matrix| x.matmul(&weight.transpose());
        let lin = |e| Error::linalg("tiny decoder", e);

        let mut x = inputs.clone();
        for l in 0..self.num_layers {
            let h = rms_norm(&x, &vec(self.name(l, "input_layernorm.weight")), self.rms_norm_eps);
            let proj = |p: &str| linear(&h, mat(self.name(l, &format!("self_attn.{p}.weight"))));
            let q = proj("q_proj").map_err(lin)?;
            let k = proj("k_proj").map_err(lin)?;
            let v = proj("v_proj").map_err(lin)?;
            let scores = q
                .matmul(&k.transpose())
                .map_err(lin)?
                .scale(1.0 / (self.hidden_size as f64).sqrt());
            let attn = causal_softmax(&scores).matmul(&v).map_err(lin)?;
            let o = linear(&attn, mat(self.name(l, "self_attn.o_proj.weight"))).map_err(lin)?;
            x = x.add(&o).map_err(lin)?;

            let h = rms_norm(
                &x,
                &vec(self.name(l, "post_attention_layernorm.weight")),
                self.rms_norm_eps,
            );
            let gate = linear(&h, mat(self.name(l, "mlp.gate_proj.weight"))).map_err(lin)?;
            let up = linear(&h, mat(self.name(l, "mlp.up_proj.weight"))).map_err(lin)?;
            let act = gate.map(silu).zip_with(&up, |a, b| a * b).map_err(lin)?;
            let down = linear(&act, mat(self.name(l, "mlp.down_proj.weight"))).map_err(lin)?;
            x = x.add(&down).map_err(lin)?;
        }
        Ok(x)
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn rms_norm(x: &Matrix, weight: &[f64], eps: f64) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for (c, &v) in row.iter().enumerate() {
            out.set(r, c, v * inv * weight[c]);
        }
    }
    out
}

fn causal_softmax(scores: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let visible = &scores.row(r)[..=r.min(scores.cols() - 1)];
        let max = visible.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = visible.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (c, e) in exps.into_iter().enumerate() {
            out.set(r, c, e / sum);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceActivations {
    pub architecture: ToyArchitecture,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

impl ReferenceActivations {
    pub fn compute(arch: &ToyArchitecture, map: &NamedTensorMap) -> Result<Self> {
        let inputs = arch.inputs();
        let outputs = arch.forward(map, &inputs)?;
        Ok(Self {
            architecture: arch.clone(),
            inputs: rows(&inputs),
            outputs: rows(&outputs),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
