//! Task vectors: per-layer `ΔW = W_ft − W₀`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{LayerTriple, NamedTensorMap};
use crate::error::{Error, Result};
use crate::linalg::{nuclear_norm, svd, Matrix};

/// Which fine-tuned model of a [`LayerTriple`] a task vector is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Mllm,
    Llm(usize),
}

impl Side {
    fn name_in<'a>(&self, t: &'a LayerTriple) -> &'a str {
        match self {
            Side::Mllm => &t.mllm,
            Side::Llm(i) => &t.llm[*i],
        }
    }

    pub fn label(&self) -> String {
        match self {
            Side::Mllm => "mllm".into(),
            Side::Llm(i) => format!("llm[{i}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub finetuned: String,
    pub base: String,
    /// Keyed by canonical layer name.
    pub deltas: BTreeMap<String, Matrix>,
}

impl TaskVector {
    pub fn get(&self, layer: &str) -> Option<&Matrix> {
        self.deltas.get(layer)
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

pub fn compute_task_vector(
    ft: &NamedTensorMap,
    base: &NamedTensorMap,
    triples: &[LayerTriple],
    side: Side,
) -> Result<TaskVector> {
    let label = side.label();
    let deltas = triples
        .par_iter()
        .map(|t| {
            let delta = layer_delta(ft, side.name_in(t), &label, base, &t.base)?;
            Ok((t.canonical_name.clone(), delta))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskVector {
        finetuned: label,
        base: "base".into(),
        deltas: deltas.into_iter().collect(),
    })
}

/// `ft[ft_name] − base[base_name]` for one layer.
pub fn layer_delta(
    ft: &NamedTensorMap,
    ft_name: &str,
    ft_label: &str,
    base: &NamedTensorMap,
    base_name: &str,
) -> Result<Matrix> {
    let w = ft.matrix(ft_name, ft_label)?;
    let w0 = base.matrix(base_name, "base")?;
    if w.shape() != w0.shape() {
        return Err(Error::ShapeMismatch {
            tensor: ft_name.to_owned(),
            expected: vec![w0.rows(), w0.cols()],
            got: vec![w.rows(), w.cols()],
            what: format!("{ft_label} vs base `{base_name}`"),
        });
    }
    let delta = w.sub(&w0).expect("shapes checked");
    delta.check_finite().map_err(|e| Error::linalg(ft_name, e))?;
    Ok(delta)
}

/// How the trace diagnostic of a task vector is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMetric {
    /// `tr(ΔᵀΔ) = ‖Δ‖_F² = Σσᵢ²`
    #[default]
    FrobeniusSq,
    /// `Σσᵢ`
    Nuclear,
}

impl TraceMetric {
    pub fn label(self) -> &'static str {
        match self {
            TraceMetric::FrobeniusSq => "trace(dW^T dW)",
            TraceMetric::Nuclear => "nuclear_norm(dW)",
        }
    }

    pub fn evaluate(self, delta: &Matrix) -> Result<f64, crate::linalg::LinalgError> {
        match self {
            TraceMetric::FrobeniusSq => Ok(trace_value(delta)),
            TraceMetric::Nuclear => Ok(nuclear_norm(&svd(delta, None)?.sigma)),
        }
    }
}

/// `tr(ΔᵀΔ)`, the squared Frobenius norm.
pub fn trace_value(delta: &Matrix) -> f64 {
    delta.data().iter().map(|v| v * v).sum()
}
