//! Merge engines behind one recipe-driven entry point.
//!
//! Every engine writes `W₀ + α₁·f₁(ΔW_MLLM) + α₂·f₂(ΔW_donor)` for the
//! eligible layers of an [`Alignment`] and copies everything else from the
//! MLLM checkpoint unchanged.

mod baselines;
mod ip;
mod verify;

pub use baselines::{
    emr_layer, emr_merge, task_arithmetic_layer, task_arithmetic_merge, ties_layer, ties_merge,
    trim_top_fraction,
};
pub use ip::{ip_layer, ip_merge, IpLayerOutcome};
pub use verify::{verify_merge, CheckResult, VerificationSummary, VerifyInputs};

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{
    serialize_checkpoint, Alignment, DTypePolicy, LayerKind, LayerTriple, NamedTensorMap,
    PassThrough, Tensor,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::subspace::SelectionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Ip,
    TaskArithmetic,
    Ties,
    Emr,
}

impl MergeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Ip => "ip",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::Emr => "emr",
        }
    }
}

impl std::str::FromStr for MergeMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ip" => Ok(MergeMethod::Ip),
            "ta" | "task_arithmetic" => Ok(MergeMethod::TaskArithmetic),
            "ties" => Ok(MergeMethod::Ties),
            "emr" => Ok(MergeMethod::Emr),
            other => Err(format!("unknown merge method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiDonorMode {
    /// Each donor is projected against the original target delta and the
    /// projections are summed.
    #[default]
    IndependentSum,
}

/// Declarative description of one merge run, read from / echoed to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionConfig>,
    /// Task arithmetic: one coefficient per donor (a single value is
    /// broadcast). Ties: exactly one global coefficient.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ties_retain_fraction: Option<f64>,
    #[serde(default)]
    pub multi_donor_mode: MultiDonorMode,
    #[serde(default)]
    pub dtype_policy: DTypePolicy,
}

impl MergeRecipe {
    pub fn ip(selection: SelectionConfig) -> Self {
        Self::bare(MergeMethod::Ip, Some(selection), None, None)
    }

    pub fn task_arithmetic(alpha: Vec<f64>) -> Self {
        Self::bare(MergeMethod::TaskArithmetic, None, Some(alpha), None)
    }

    pub fn ties(retain_fraction: f64, alpha: f64) -> Self {
        Self::bare(
            MergeMethod::Ties,
            None,
            Some(vec![alpha]),
            Some(retain_fraction),
        )
    }

    pub fn emr() -> Self {
        Self::bare(MergeMethod::Emr, None, None, None)
    }

    fn bare(
        method: MergeMethod,
        selection: Option<SelectionConfig>,
        alpha: Option<Vec<f64>>,
        ties_retain_fraction: Option<f64>,
    ) -> Self {
        Self {
            method,
            selection,
            alpha,
            ties_retain_fraction,
            multi_donor_mode: MultiDonorMode::default(),
            dtype_policy: DTypePolicy::default(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let recipe: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("recipe {}: {e}", path.display())))?;
        Ok(recipe)
    }

    /// Checks that exactly the parameters the method needs are present.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let method = self.method;
        match method {
            MergeMethod::Ip => match &self.selection {
                None => return bad("ip merging needs a selection config".into()),
                Some(s) => s.validate().map_err(Error::Config)?,
            },
            _ if self.selection.is_some() => {
                return bad(format!("selection config only applies to ip, not {method:?}"))
            }
            _ => {}
        }
        match (method, &self.alpha) {
            (MergeMethod::TaskArithmetic, Some(a)) if !a.is_empty() => {}
            (MergeMethod::TaskArithmetic, _) => {
                return bad("task arithmetic needs at least one alpha".into())
            }
            (MergeMethod::Ties, Some(a)) if a.len() == 1 => {}
            (MergeMethod::Ties, _) => return bad("ties needs exactly one alpha".into()),
            (_, Some(_)) => return bad(format!("alpha does not apply to {method:?}")),
            (_, None) => {}
        }
        if let Some(a) = &self.alpha {
            if a.iter().any(|v| !v.is_finite()) {
                return bad("alpha values must be finite".into());
            }
        }
        match (method, self.ties_retain_fraction) {
            (MergeMethod::Ties, Some(f)) if f > 0.0 && f <= 1.0 => {}
            (MergeMethod::Ties, Some(f)) => {
                return bad(format!("ties retain fraction must be in (0, 1], got {f}"))
            }
            (MergeMethod::Ties, None) => return bad("ties needs a retain fraction".into()),
            (_, Some(_)) => return bad(format!("retain fraction does not apply to {method:?}")),
            (_, None) => {}
        }
        Ok(())
    }

    /// Coefficients for `n` donors in task arithmetic.
    pub(crate) fn donor_alphas(&self, n: usize) -> Result<Vec<f64>> {
        let a = self.alpha.as_deref().unwrap_or(&[]);
        match a.len() {
            1 => Ok(vec![a[0]; n]),
            len if len == n => Ok(a.to_vec()),
            len => Err(Error::Config(format!(
                "{len} alpha values given for {n} donors"
            ))),
        }
    }
}

/// Per-donor statistics of one IP-merged layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorRecord {
    pub donor: usize,
    pub selected: bool,
    pub s1: f64,
    pub lambda: f64,
    pub nuclear_math: f64,
    /// `‖λ·ΔW_donor‖_*` before projection.
    pub rescaled_nuclear: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub method: MergeMethod,
    /// The layer's weights were changed (for IP: at least one donor selected).
    pub selected: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub donors: Vec<DonorRecord>,
    /// `‖ΔW_MLLM‖_*`, recorded by the IP engine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nuclear_mllm: Option<f64>,
    pub frobenius_before: f64,
    pub frobenius_after: f64,
    pub change_frobenius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTotals {
    pub eligible: usize,
    pub selected: usize,
    pub pass_through: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub tool_version: String,
    pub recipe: MergeRecipe,
    pub donors: usize,
    pub totals: MergeTotals,
    pub layers: Vec<LayerRecord>,
    pub pass_through: Vec<PassThrough>,
    /// SHA-256 of the serialized output checkpoint.
    pub output_sha256: String,
}

impl MergeReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("report {}: {e}", path.display())))
    }
}

/// Checkpoints taking part in a merge.
#[derive(Debug, Clone, Copy)]
pub struct MergeInputs<'a> {
    pub base: &'a NamedTensorMap,
    pub mllm: &'a NamedTensorMap,
    pub donors: &'a [NamedTensorMap],
    pub alignment: &'a Alignment,
}

impl MergeInputs<'_> {
    fn check(&self) -> Result<()> {
        if self.donors.is_empty() {
            return Err(Error::Config("at least one donor checkpoint is required".into()));
        }
        if let Some(t) = self
            .alignment
            .triples
            .iter()
            .find(|t| t.llm.len() != self.donors.len())
        {
            return Err(Error::Config(format!(
                "alignment of `{}` lists {} donors but {} were given",
                t.canonical_name,
                t.llm.len(),
                self.donors.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn mllm_delta(&self, t: &LayerTriple) -> Result<Matrix> {
        crate::taskvector::layer_delta(self.mllm, &t.mllm, "mllm", self.base, &t.base)
    }

    pub(crate) fn donor_deltas(&self, t: &LayerTriple) -> Result<Vec<Matrix>> {
        self.donors
            .iter()
            .zip(&t.llm)
            .enumerate()
            .map(|(i, (m, name))| {
                crate::taskvector::layer_delta(m, name, &format!("llm[{i}]"), self.base, &t.base)
            })
            .collect()
    }
}

/// Runs the engine named by `recipe`.
pub fn merge(inputs: &MergeInputs, recipe: &MergeRecipe) -> Result<(NamedTensorMap, MergeReport)> {
    recipe.validate()?;
    match recipe.method {
        MergeMethod::Ip => ip_merge(inputs, recipe),
        MergeMethod::TaskArithmetic => task_arithmetic_merge(inputs, recipe),
        MergeMethod::Ties => ties_merge(inputs, recipe),
        MergeMethod::Emr => emr_merge(inputs, recipe),
    }
}

/// Runs `f` on a dedicated pool of `threads` workers. Results do not depend
/// on the thread count: layers are independent and collected in order.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn content_hash(map: &NamedTensorMap) -> Result<String> {
    let bytes = serialize_checkpoint(map, DTypePolicy::Preserve)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) struct LayerResult {
    pub merged: Option<Matrix>,
    pub record: LayerRecord,
}

/// Computes every eligible layer in parallel, then assembles the output
/// checkpoint and report in alignment order.
pub(crate) fn assemble(
    inputs: &MergeInputs,
    recipe: &MergeRecipe,
    layer_fn: impl Fn(&LayerTriple) -> Result<LayerResult> + Sync,
) -> Result<(NamedTensorMap, MergeReport)> {
    inputs.check()?;
    let results: Vec<LayerResult> = inputs
        .alignment
        .triples
        .par_iter()
        .map(&layer_fn)
        .collect::<Result<_>>()?;

    let mut out = NamedTensorMap::new();
    *out.metadata_mut() = inputs.mllm.metadata().clone();
    for (name, t) in inputs.mllm.iter() {
        let dtype = recipe.dtype_policy.resolve(t.dtype());
        out.insert(name.clone(), t.clone().with_dtype(dtype))?;
    }

    let mut layers = Vec::with_capacity(results.len());
    for (triple, r) in inputs.alignment.triples.iter().zip(results) {
        if let Some(m) = r.merged {
            if let Err(e) = m.check_finite() {
                return Err(Error::Numerical {
                    layer: triple.canonical_name.clone(),
                    message: format!("merge produced {e}"),
                });
            }
            let dtype = out.get(&triple.mllm).expect("mllm tensor").dtype();
            out.replace(triple.mllm.clone(), Tensor::from_matrix(dtype, m));
        }
        layers.push(r.record);
    }

    let output_sha256 = content_hash(&out)?;
    let report = MergeReport {
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        recipe: recipe.clone(),
        donors: inputs.donors.len(),
        totals: MergeTotals {
            eligible: layers.len(),
            selected: layers.iter().filter(|l| l.selected).count(),
            pass_through: inputs.alignment.pass_through.len(),
        },
        layers,
        pass_through: inputs.alignment.pass_through.clone(),
        output_sha256,
    };
    Ok((out, report))
}

pub(crate) fn record(
    t: &LayerTriple,
    method: MergeMethod,
    before: &Matrix,
    after: Option<&Matrix>,
) -> LayerRecord {
    let frobenius_before = before.frobenius_norm();
    let (frobenius_after, change_frobenius) = match after {
        Some(a) => (
            a.frobenius_norm(),
            a.sub(before).expect("same shape").frobenius_norm(),
        ),
        None => (frobenius_before, 0.0),
    };
    LayerRecord {
        name: t.canonical_name.clone(),
        kind: t.kind,
        method,
        selected: after.is_some(),
        donors: Vec::new(),
        nuclear_mllm: None,
        frobenius_before,
        frobenius_after,
        change_frobenius,
    }
}
