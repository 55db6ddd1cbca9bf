//! Subspace-projected merging.
//!
//! Per layer: decompose both task vectors, keep the donor only when its
//! leading right-singular direction is aligned with the target's
//! (`S₁ ≥ S_α`), rescale it to the target's nuclear norm and project it onto
//! the target's importance-weighted right subspace before adding it to the
//! target weights.

use super::{
    assemble, record, DonorRecord, LayerResult, MergeInputs, MergeMethod, MergeRecipe, MergeReport,
};
use crate::checkpoint::NamedTensorMap;
use crate::error::{Error, Result};
use crate::linalg::{project_onto_right_subspace, svd, LinalgError, Matrix};
use crate::subspace::{analyze_against, SelectionConfig, SimilarityProfile};

#[derive(Debug, Clone)]
pub struct IpLayerOutcome {
    /// `Σ_donors λ·ΔW_donor·P` over selected donors; zero when none is.
    pub projected: Matrix,
    pub profiles: Vec<SimilarityProfile>,
}

impl IpLayerOutcome {
    pub fn any_selected(&self) -> bool {
        self.profiles.iter().any(|p| p.selected)
    }
}

/// The update IP merging adds to one target layer.
pub fn ip_layer(
    layer: &str,
    delta_mllm: &Matrix,
    donor_deltas: &[Matrix],
    cfg: &SelectionConfig,
) -> Result<IpLayerOutcome, LinalgError> {
    let svd_mllm = svd(delta_mllm, cfg.rank_limit)?;
    let mut projected = Matrix::zeros(delta_mllm.rows(), delta_mllm.cols());
    let mut profiles = Vec::with_capacity(donor_deltas.len());
    for delta in donor_deltas {
        if delta.shape() != delta_mllm.shape() {
            return Err(LinalgError::DimensionMismatch {
                expected: delta_mllm.data().len(),
                got: delta.data().len(),
            });
        }
        let (profile, _) = analyze_against(layer, &svd_mllm, delta, cfg)?;
        if profile.selected {
            let rescaled = delta.scale(profile.lambda);
            let p = project_onto_right_subspace(
                &rescaled,
                &svd_mllm.vt,
                &profile.gamma_applied,
                cfg.gamma_exponent,
            )?;
            projected = projected.add(&p)?;
        }
        profiles.push(profile);
    }
    Ok(IpLayerOutcome {
        projected,
        profiles,
    })
}

pub fn ip_merge(
    inputs: &MergeInputs,
    recipe: &MergeRecipe,
) -> Result<(NamedTensorMap, MergeReport)> {
    let cfg = recipe
        .selection
        .as_ref()
        .ok_or_else(|| Error::Config("ip merging needs a selection config".into()))?;
    assemble(inputs, recipe, |t| {
        let w_mllm = inputs.mllm.matrix(&t.mllm, "mllm")?;
        let delta_mllm = inputs.mllm_delta(t)?;
        let donors = inputs.donor_deltas(t)?;
        let outcome = ip_layer(&t.canonical_name, &delta_mllm, &donors, cfg)
            .map_err(|e| Error::linalg(&t.canonical_name, e))?;

        let merged = outcome
            .any_selected()
            .then(|| w_mllm.add(&outcome.projected).expect("same shape"));
        let mut rec = record(t, MergeMethod::Ip, &w_mllm, merged.as_ref());
        rec.nuclear_mllm = outcome.profiles.first().map(|p| p.nuclear_mllm);
        rec.donors = outcome
            .profiles
            .iter()
            .enumerate()
            .map(|(donor, p)| DonorRecord {
                donor,
                selected: p.selected,
                s1: p.s1(),
                lambda: p.lambda,
                nuclear_math: p.nuclear_math,
                rescaled_nuclear: p.lambda * p.nuclear_math,
            })
            .collect();
        Ok(LayerResult {
            merged,
            record: rec,
        })
    })
}
