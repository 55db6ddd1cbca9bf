//! Seeded toy checkpoints: a base model, a multimodal fine-tune and donor
//! fine-tunes with planted low-rank task vectors.
//!
//! On "aligned" layers every donor shares the target's leading right-singular
//! direction, so `S₁` is close to 1; on the others the right subspaces are
//! drawn independently and `S₁` is small.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{DType, NamedTensorMap, Tensor};
use crate::error::Result;
use crate::interop::ToyArchitecture;
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub donors: usize,
    pub planted_rank: usize,
    /// Leading singular value of the target's planted delta.
    pub mllm_scale: f64,
    /// Leading singular value of each donor's planted delta.
    pub donor_scale: f64,
    /// Entry scale of the dense noise added to every delta.
    pub noise: f64,
    pub dtype: DType,
    /// Adds vision, projector, embedding and norm tensors.
    pub extras: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_size: 128,
            intermediate_size: 256,
            donors: 1,
            planted_rank: 4,
            mllm_scale: 0.05,
            donor_scale: 0.5,
            noise: 1e-4,
            dtype: DType::F32,
            extras: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Sized to match [`ToyArchitecture::default`].
    pub fn toy() -> Self {
        let a = ToyArchitecture::default();
        Self {
            num_layers: a.num_layers,
            hidden_size: a.hidden_size,
            intermediate_size: a.intermediate_size,
            planted_rank: 3,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticModels {
    pub base: NamedTensorMap,
    pub mllm: NamedTensorMap,
    pub donors: Vec<NamedTensorMap>,
    /// Matrix layer name → whether donors were planted aligned.
    pub aligned: BTreeMap<String, bool>,
}

const PROJECTIONS: [(&str, bool); 7] = [
    ("self_attn.q_proj.weight", false),
    ("self_attn.k_proj.weight", false),
    ("self_attn.v_proj.weight", false),
    ("self_attn.o_proj.weight", false),
    ("mlp.gate_proj.weight", true),
    ("mlp.up_proj.weight", true),
    ("mlp.down_proj.weight", false),
];

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `k` orthonormal vectors of length `n`, optionally starting with `first`.
fn orthonormal(rng: &mut ChaCha8Rng, n: usize, k: usize, first: Option<&[f64]>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    if let Some(f) = first {
        basis.push(f.to_vec());
    }
    while basis.len() < k {
        let mut v = gaussian(rng, n);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// `Σ_j scale·0.6^j·u_j·v_jᵀ + noise·G`.
fn planted(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    rank: usize,
    scale: f64,
    noise: f64,
    right: &[Vec<f64>],
) -> Matrix {
    let left = orthonormal(rng, rows, rank, None);
    let g = gaussian(rng, rows * cols);
    let mut m = Matrix::from_fn(rows, cols, |r, c| noise * g[r * cols + c]);
    for j in 0..rank {
        let s = scale * 0.6f64.powi(j as i32);
        for r in 0..rows {
            for c in 0..cols {
                let v = m.get(r, c) + s * left[j][r] * right[j][c];
                m.set(r, c, v);
            }
        }
    }
    m
}

fn tensor(dtype: DType, shape: Vec<usize>, values: impl IntoIterator<Item = f64>) -> Tensor {
    let values = values.into_iter().map(|v| dtype.quantize(v)).collect();
    Tensor::new(dtype, shape, values).expect("generated shape")
}

fn perturbed(rng: &mut ChaCha8Rng, t: &Tensor, scale: f64) -> Tensor {
    let dtype = t.dtype();
    let noise = gaussian(rng, t.numel());
    tensor(
        dtype,
        t.shape().to_vec(),
        t.values().iter().zip(noise).map(|(v, n)| v + scale * n),
    )
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticModels> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, i, dt) = (spec.hidden_size, spec.intermediate_size, spec.dtype);
    let rank = spec.planted_rank.max(1).min(h.min(i));

    let mut base = NamedTensorMap::new();
    let mut mllm = NamedTensorMap::new();
    let mut donors = vec![NamedTensorMap::new(); spec.donors];
    let mut aligned = BTreeMap::new();

    for l in 0..spec.num_layers {
        for norm in ["input_layernorm.weight", "post_attention_layernorm.weight"] {
            let name = format!("model.layers.{l}.{norm}");
            let w = tensor(dt, vec![h], gaussian(&mut rng, h).into_iter().map(|v| 1.0 + 0.1 * v));
            mllm.insert(&name, perturbed(&mut rng, &w, 1e-3))?;
            for d in &mut donors {
                d.insert(&name, perturbed(&mut rng, &w, 1e-3))?;
            }
            base.insert(name, w)?;
        }
        for (p, (suffix, wide)) in PROJECTIONS.iter().enumerate() {
            let name = format!("model.layers.{l}.{suffix}");
            let (rows, cols) = match (*wide, *suffix == "mlp.down_proj.weight") {
                (true, _) => (i, h),
                (false, true) => (h, i),
                _ => (h, h),
            };
            let is_aligned = (l + p) % 2 == 0;
            aligned.insert(name.clone(), is_aligned);

            let std = 1.0 / (cols as f64).sqrt();
            let w0: Vec<f64> = gaussian(&mut rng, rows * cols).into_iter().map(|v| std * v).collect();
            let w0 = tensor(dt, vec![rows, cols], w0);

            let right_mllm = orthonormal(&mut rng, cols, rank, None);
            let dm = planted(&mut rng, rows, cols, rank, spec.mllm_scale, spec.noise, &right_mllm);
            mllm.insert(
                &name,
                tensor(dt, vec![rows, cols], w0.values().iter().zip(dm.data()).map(|(a, b)| a + b)),
            )?;
            for d in &mut donors {
                let first = is_aligned.then_some(right_mllm[0].as_slice());
                let right = orthonormal(&mut rng, cols, rank, first);
                let scale = spec.donor_scale * rng.random_range(0.8..1.25);
                let dd = planted(&mut rng, rows, cols, rank, scale, spec.noise, &right);
                d.insert(
                    &name,
                    tensor(dt, vec![rows, cols], w0.values().iter().zip(dd.data()).map(|(a, b)| a + b)),
                )?;
            }
            base.insert(name, w0)?;
        }
    }

    if spec.extras {
        let vocab = 32;
        let emb = tensor(dt, vec![vocab, h], gaussian(&mut rng, vocab * h).into_iter().map(|v| 0.02 * v));
        let head = tensor(dt, vec![vocab, h], gaussian(&mut rng, vocab * h).into_iter().map(|v| 0.02 * v));
        let norm = tensor(dt, vec![h], vec![1.0; h]);
        for (name, t) in [
            ("model.embed_tokens.weight", emb),
            ("lm_head.weight", head),
            ("model.norm.weight", norm),
        ] {
            mllm.insert(name, perturbed(&mut rng, &t, 1e-3))?;
            for d in &mut donors {
                d.insert(name, perturbed(&mut rng, &t, 1e-3))?;
            }
            base.insert(name, t)?;
        }
        let patch = 8;
        mllm.insert(
            "vision_tower.patch_embed.weight",
            tensor(dt, vec![h, patch], gaussian(&mut rng, h * patch)),
        )?;
        mllm.insert(
            "multi_modal_projector.linear_1.weight",
            tensor(dt, vec![h, h], gaussian(&mut rng, h * h).into_iter().map(|v| 0.1 * v)),
        )?;
        mllm.insert(
            "multi_modal_projector.linear_1.bias",
            tensor(dt, vec![h], vec![0.0; h]),
        )?;
    }

    for (role, m) in std::iter::once(("base", &mut base))
        .chain(std::iter::once(("mllm", &mut mllm)))
        .chain(donors.iter_mut().map(|d| ("llm", d)))
    {
        m.metadata_mut().insert("role".into(), role.into());
    }

    Ok(SyntheticModels {
        base,
        mllm,
        donors,
        aligned,
    })
}
