//! Elementwise baseline engines: Task Arithmetic, Ties and EMR.
//!
//! In the checkpoint-level entry points the MLLM task vector is task 0 and
//! the donors follow in order; that order decides sign tie-breaks.

use super::{assemble, record, LayerResult, MergeInputs, MergeMethod, MergeRecipe, MergeReport};
use crate::checkpoint::NamedTensorMap;
use crate::error::{Error, Result};
use crate::linalg::{LinalgError, Matrix};

fn check_same_shape(reference: &Matrix, others: &[&Matrix]) -> Result<(), LinalgError> {
    for m in others {
        if m.shape() != reference.shape() {
            return Err(LinalgError::DimensionMismatch {
                expected: reference.data().len(),
                got: m.data().len(),
            });
        }
    }
    Ok(())
}

/// `W₀ + Σₜ αₜ·Δₜ`, accumulated in task order.
pub fn task_arithmetic_layer(
    base: &Matrix,
    deltas: &[&Matrix],
    alphas: &[f64],
) -> Result<Matrix, LinalgError> {
    if deltas.len() != alphas.len() {
        return Err(LinalgError::DimensionMismatch {
            expected: deltas.len(),
            got: alphas.len(),
        });
    }
    check_same_shape(base, deltas)?;
    let mut out = base.clone();
    for (d, &a) in deltas.iter().zip(alphas) {
        out = out.zip_with(d, |w, x| w + a * x)?;
    }
    Ok(out)
}

/// Zeroes all but the `ceil(fraction·n)` largest-magnitude entries. Equal
/// magnitudes are ranked by position.
pub fn trim_top_fraction(values: &[f64], fraction: f64) -> Vec<f64> {
    let n = values.len();
    // the epsilon keeps e.g. 3 · (2/3) from rounding up to 3
    let keep = ((n as f64 * fraction) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    if keep >= n {
        return values.to_vec();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let order = |&i: &usize, &j: &usize| {
        values[j]
            .abs()
            .total_cmp(&values[i].abs())
            .then(i.cmp(&j))
    };
    if keep > 0 {
        idx.select_nth_unstable_by(keep - 1, order);
    }
    let mut out = vec![0.0; n];
    for &i in &idx[..keep] {
        out[i] = values[i];
    }
    out
}

/// Sign of the sum; an exact cancellation takes the sign of the first
/// non-zero entry.
fn elect_sign(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let sum: f64 = values.clone().sum();
    if sum != 0.0 {
        return sum.signum();
    }
    values
        .into_iter()
        .find(|v| *v != 0.0)
        .map(f64::signum)
        .unwrap_or(0.0)
}

/// Ties: trim each delta, elect a sign per coordinate, average the entries
/// that agree with it. Returns the merged delta (before `α`).
pub fn ties_layer(deltas: &[&Matrix], retain_fraction: f64) -> Result<Matrix, LinalgError> {
    let first = deltas.first().ok_or(LinalgError::DimensionMismatch {
        expected: 1,
        got: 0,
    })?;
    check_same_shape(first, deltas)?;
    let trimmed: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| trim_top_fraction(d.data(), retain_fraction))
        .collect();
    let n = first.data().len();
    let mut merged = Vec::with_capacity(n);
    for i in 0..n {
        let column = trimmed.iter().map(|t| t[i]);
        let sign = elect_sign(column.clone());
        let (sum, count) = column
            .filter(|v| *v != 0.0 && v.signum() == sign)
            .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        merged.push(if count == 0 { 0.0 } else { sum / count as f64 });
    }
    Matrix::new(first.rows(), first.cols(), merged)
}

/// EMR: unified task vector (elected sign, largest agreeing magnitude),
/// masked to the target's sign pattern and rescaled to the target's mean
/// absolute value. Returns the delta reconstructed for `target`.
pub fn emr_layer(target: &Matrix, donors: &[&Matrix]) -> Result<Matrix, LinalgError> {
    check_same_shape(target, donors)?;
    let tasks: Vec<&[f64]> = std::iter::once(target.data())
        .chain(donors.iter().map(|d| d.data()))
        .collect();
    let n = target.data().len();

    let unified: Vec<f64> = (0..n)
        .map(|i| {
            let column = tasks.iter().map(|t| t[i]);
            let sign = elect_sign(column.clone());
            let magnitude = column
                .filter(|v| *v != 0.0 && v.signum() == sign)
                .map(f64::abs)
                .fold(0.0, f64::max);
            sign * magnitude
        })
        .collect();

    let masked: Vec<f64> = target
        .data()
        .iter()
        .zip(&unified)
        .map(|(&t, &u)| if t * u > 0.0 { u } else { 0.0 })
        .collect();
    let target_abs: f64 = target.data().iter().map(|v| v.abs()).sum();
    let masked_abs: f64 = masked.iter().map(|v| v.abs()).sum();
    let rescaler = if masked_abs == 0.0 {
        0.0
    } else {
        target_abs / masked_abs
    };
    Matrix::new(
        target.rows(),
        target.cols(),
        masked.into_iter().map(|v| rescaler * v).collect(),
    )
}

fn base_matrix(inputs: &MergeInputs, name: &str) -> Result<Matrix> {
    inputs.base.matrix(name, "base")
}

/// `W = W₀ + ΔW_MLLM + Σ αₜ·ΔW_donorₜ`.
pub fn task_arithmetic_merge(
    inputs: &MergeInputs,
    recipe: &MergeRecipe,
) -> Result<(NamedTensorMap, MergeReport)> {
    let mut alphas = vec![1.0];
    alphas.extend(recipe.donor_alphas(inputs.donors.len())?);
    assemble(inputs, recipe, |t| {
        let w0 = base_matrix(inputs, &t.base)?;
        let mut deltas = vec![inputs.mllm_delta(t)?];
        deltas.extend(inputs.donor_deltas(t)?);
        let refs: Vec<&Matrix> = deltas.iter().collect();
        let merged = task_arithmetic_layer(&w0, &refs, &alphas)
            .map_err(|e| Error::linalg(&t.canonical_name, e))?;
        let before = inputs.mllm.matrix(&t.mllm, "mllm")?;
        Ok(LayerResult {
            record: record(t, MergeMethod::TaskArithmetic, &before, Some(&merged)),
            merged: Some(merged),
        })
    })
}

/// `W = W₀ + α·ties(ΔW_MLLM, ΔW_donor…)`.
pub fn ties_merge(
    inputs: &MergeInputs,
    recipe: &MergeRecipe,
) -> Result<(NamedTensorMap, MergeReport)> {
    let retain = recipe
        .ties_retain_fraction
        .ok_or_else(|| Error::Config("ties needs a retain fraction".into()))?;
    let alpha = recipe
        .alpha
        .as_deref()
        .and_then(|a| a.first().copied())
        .ok_or_else(|| Error::Config("ties needs an alpha".into()))?;
    assemble(inputs, recipe, |t| {
        let w0 = base_matrix(inputs, &t.base)?;
        let mut deltas = vec![inputs.mllm_delta(t)?];
        deltas.extend(inputs.donor_deltas(t)?);
        let refs: Vec<&Matrix> = deltas.iter().collect();
        let merged_delta =
            ties_layer(&refs, retain).map_err(|e| Error::linalg(&t.canonical_name, e))?;
        let merged = w0.zip_with(&merged_delta, |w, d| w + alpha * d).expect("same shape");
        let before = inputs.mllm.matrix(&t.mllm, "mllm")?;
        Ok(LayerResult {
            record: record(t, MergeMethod::Ties, &before, Some(&merged)),
            merged: Some(merged),
        })
    })
}

/// `W = W₀ + emr(ΔW_MLLM; ΔW_donor…)` reconstructed for the MLLM.
pub fn emr_merge(
    inputs: &MergeInputs,
    recipe: &MergeRecipe,
) -> Result<(NamedTensorMap, MergeReport)> {
    assemble(inputs, recipe, |t| {
        let w0 = base_matrix(inputs, &t.base)?;
        let target = inputs.mllm_delta(t)?;
        let donors = inputs.donor_deltas(t)?;
        let refs: Vec<&Matrix> = donors.iter().collect();
        let merged_delta =
            emr_layer(&target, &refs).map_err(|e| Error::linalg(&t.canonical_name, e))?;
        let merged = w0.add(&merged_delta).expect("same shape");
        let before = inputs.mllm.matrix(&t.mllm, "mllm")?;
        Ok(LayerResult {
            record: record(t, MergeMethod::Emr, &before, Some(&merged)),
            merged: Some(merged),
        })
    })
}
