//! Post-hoc checks on a merged checkpoint against its report and the MLLM it
//! was derived from. Failures are collected, never raised.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{content_hash, MergeMethod, MergeReport};
use crate::checkpoint::{tensor_bytes, Alignment, NamedTensorMap};
use crate::linalg::{nuclear_norm, svd};
use crate::taskvector::layer_delta;

/// Relative tolerance of the nuclear-norm transfer check.
pub const NUCLEAR_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub checks: Vec<CheckResult>,
}

impl VerificationSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Source checkpoints for recomputing nuclear norms from scratch.
#[derive(Debug, Clone, Copy)]
pub struct VerifyInputs<'a> {
    pub base: &'a NamedTensorMap,
    pub donors: &'a [NamedTensorMap],
    pub alignment: &'a Alignment,
}

struct Checks(Vec<CheckResult>);

impl Checks {
    fn push(&mut self, name: &str, failures: Vec<String>, ok_detail: impl Into<String>) {
        let passed = failures.is_empty();
        let detail = if passed {
            ok_detail.into()
        } else {
            let shown: Vec<_> = failures.iter().take(5).cloned().collect();
            let more = failures.len().saturating_sub(shown.len());
            let mut d = shown.join("; ");
            if more > 0 {
                d.push_str(&format!("; and {more} more"));
            }
            d
        };
        self.0.push(CheckResult {
            name: name.to_owned(),
            passed,
            detail,
        });
    }
}

fn same_bytes(output: &NamedTensorMap, mllm: &NamedTensorMap, name: &str) -> Result<(), String> {
    let o = output.get(name).ok_or_else(|| format!("`{name}` missing from output"))?;
    let m = mllm.get(name).ok_or_else(|| format!("`{name}` missing from mllm"))?;
    if o.shape() != m.shape() {
        return Err(format!("`{name}` shape {:?} != {:?}", o.shape(), m.shape()));
    }
    let ob = tensor_bytes(name, o, o.dtype()).map_err(|e| e.to_string())?;
    let mb = tensor_bytes(name, m, o.dtype()).map_err(|e| e.to_string())?;
    if ob != mb {
        let at = ob.iter().zip(&mb).position(|(a, b)| a != b).unwrap_or(0);
        return Err(format!("`{name}` differs from mllm at payload byte {at}"));
    }
    Ok(())
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= NUCLEAR_RTOL * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn verify_merge(
    output: &NamedTensorMap,
    report: &MergeReport,
    mllm: &NamedTensorMap,
    inputs: Option<VerifyInputs>,
) -> VerificationSummary {
    let mut checks = Checks(Vec::new());

    let hash_failures = match content_hash(output) {
        Ok(h) if h == report.output_sha256 => vec![],
        Ok(h) => vec![format!(
            "output hashes to {h}, report records {}",
            report.output_sha256
        )],
        Err(e) => vec![format!("cannot serialize output: {e}")],
    };
    checks.push("content_hash", hash_failures, "output matches report hash");

    let non_finite: Vec<String> = output
        .iter()
        .filter_map(|(n, t)| t.first_non_finite().map(|(i, v)| format!("`{n}`[{i}] = {v}")))
        .collect();
    checks.push("finite", non_finite, "all values finite");

    let mut structure = Vec::new();
    for name in mllm.names() {
        if !output.contains(name) {
            structure.push(format!("`{name}` missing from output"));
        }
    }
    for (name, t) in output.iter() {
        match mllm.get(name) {
            None => structure.push(format!("unexpected tensor `{name}`")),
            Some(m) if m.shape() != t.shape() => {
                structure.push(format!("`{name}` shape {:?} != {:?}", t.shape(), m.shape()))
            }
            _ => {}
        }
    }
    let layer_names: HashSet<&str> = report.layers.iter().map(|l| l.name.as_str()).collect();
    for l in &report.layers {
        if !output.contains(&l.name) {
            structure.push(format!("report layer `{}` not in output", l.name));
        }
    }
    checks.push(
        "structure",
        structure,
        format!("{} tensors match the mllm layout", output.len()),
    );

    let pass: Vec<String> = mllm
        .names()
        .filter(|n| !layer_names.contains(n.as_str()))
        .filter_map(|n| same_bytes(output, mllm, n).err())
        .collect();
    let pass_count = mllm.len() - layer_names.len().min(mllm.len());
    checks.push(
        "pass_through_bit_exact",
        pass,
        format!("{pass_count} pass-through tensors identical"),
    );

    let mut counts = Vec::new();
    if report.totals.eligible != report.layers.len() {
        counts.push(format!(
            "eligible {} != {} layer records",
            report.totals.eligible,
            report.layers.len()
        ));
    }
    let selected = report.layers.iter().filter(|l| l.selected).count();
    if report.totals.selected != selected {
        counts.push(format!(
            "selected {} != {selected} selected records",
            report.totals.selected
        ));
    }
    if report.layers.len() + report.pass_through.len() != mllm.len() {
        counts.push(format!(
            "{} layers + {} pass-through != {} mllm tensors",
            report.layers.len(),
            report.pass_through.len(),
            mllm.len()
        ));
    }
    checks.push("report_counts", counts, "totals consistent");

    if report.recipe.method == MergeMethod::Ip {
        let unchanged: Vec<String> = report
            .layers
            .iter()
            .filter(|l| !l.selected)
            .filter_map(|l| same_bytes(output, mllm, &l.name).err())
            .collect();
        checks.push(
            "unselected_layers_unchanged",
            unchanged,
            "unselected layers equal the mllm",
        );

        let mut transfer = Vec::new();
        for l in report.layers.iter().filter(|l| l.selected) {
            let Some(target) = l.nuclear_mllm else {
                transfer.push(format!("`{}` has no recorded target nuclear norm", l.name));
                continue;
            };
            for d in l.donors.iter().filter(|d| d.selected) {
                if !rel_close(d.rescaled_nuclear, target) {
                    transfer.push(format!(
                        "`{}` donor {}: {} vs {}",
                        l.name, d.donor, d.rescaled_nuclear, target
                    ));
                }
            }
        }
        checks.push(
            "nuclear_norm_transfer",
            transfer,
            format!("{selected} selected layers match the target nuclear norm"),
        );

        if let Some(inp) = inputs {
            checks.push(
                "nuclear_norm_recomputed",
                recompute_nuclear(report, mllm, &inp),
                "recomputed nuclear norms match",
            );
        }
    }

    VerificationSummary { checks: checks.0 }
}

fn recompute_nuclear(report: &MergeReport, mllm: &NamedTensorMap, inp: &VerifyInputs) -> Vec<String> {
    let mut failures = Vec::new();
    for l in report.layers.iter().filter(|l| l.selected) {
        let Some(t) = inp
            .alignment
            .triples
            .iter()
            .find(|t| t.canonical_name == l.name)
        else {
            failures.push(format!("`{}` not in alignment", l.name));
            continue;
        };
        let result = (|| -> Result<(), String> {
            let dv = layer_delta(mllm, &t.mllm, "mllm", inp.base, &t.base).map_err(|e| e.to_string())?;
            let target = nuclear_norm(&svd(&dv, None).map_err(|e| e.to_string())?.sigma);
            for d in l.donors.iter().filter(|d| d.selected) {
                let donor = inp
                    .donors
                    .get(d.donor)
                    .ok_or_else(|| format!("donor {} not supplied", d.donor))?;
                let dm = layer_delta(donor, &t.llm[d.donor], "llm", inp.base, &t.base)
                    .map_err(|e| e.to_string())?;
                let rescaled = nuclear_norm(&svd(&dm.scale(d.lambda), None).map_err(|e| e.to_string())?.sigma);
                if !rel_close(rescaled, target) {
                    return Err(format!(
                        "`{}` donor {}: ‖λΔ‖_* = {rescaled}, ‖ΔW_MLLM‖_* = {target}",
                        l.name, d.donor
                    ));
                }
            }
            Ok(())
        })();
        if let Err(e) = result {
            failures.push(e);
        }
    }
    failures
}
