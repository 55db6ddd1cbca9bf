//! Per-layer subspace comparison between a donor task vector and the
//! target's task vector: corresponding-angle similarity, the selection test,
//! the nuclear-norm rescale factor and the importance weights used by the
//! projection.

use serde::{Deserialize, Serialize};

use crate::linalg::{nuclear_norm, svd, LinalgError, Matrix, SvdResult};

/// How the softmax importance weights are turned into projection gains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// `γ` as is (sums to one).
    SoftmaxRaw,
    /// `γ / max(γ)`, so the strongest direction has unit gain.
    #[default]
    SoftmaxMaxnorm,
    /// All ones: a plain orthogonal projection onto the target's row space.
    UniformOnes,
}

impl std::str::FromStr for GammaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "softmax_raw" => Ok(GammaMode::SoftmaxRaw),
            "softmax_maxnorm" => Ok(GammaMode::SoftmaxMaxnorm),
            "uniform_ones" => Ok(GammaMode::UniformOnes),
            other => Err(format!(
                "unknown gamma mode `{other}` (expected softmax_raw, softmax_maxnorm or uniform_ones)"
            )),
        }
    }
}

/// Similarity threshold presets that worked best per model family.
pub const THRESHOLD_LLAMA_FAMILY: f64 = 0.3;
pub const THRESHOLD_QWEN_FAMILY: f64 = 0.6;

fn default_gamma_exponent() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    /// A layer is merged when its first similarity score reaches this value.
    /// Values above 1 select nothing.
    pub threshold: f64,
    #[serde(default)]
    pub gamma_mode: GammaMode,
    #[serde(default)]
    pub rank_limit: Option<usize>,
    /// Power applied to the gains inside the projector; 2 means `Γ` acts on
    /// both factors of `V̄·V̄ᵀ`.
    #[serde(default = "default_gamma_exponent")]
    pub gamma_exponent: u32,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            threshold: THRESHOLD_LLAMA_FAMILY,
            gamma_mode: GammaMode::default(),
            rank_limit: None,
            gamma_exponent: default_gamma_exponent(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(format!(
                "threshold must be a finite non-negative number, got {}",
                self.threshold
            ));
        }
        if self.rank_limit == Some(0) {
            return Err("rank_limit must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub layer: String,
    /// `S_1..S_k` from right-singular vectors.
    pub s: Vec<f64>,
    /// Same scores from left-singular vectors; reported only.
    pub s_left: Vec<f64>,
    pub lambda: f64,
    pub gamma: Vec<f64>,
    pub gamma_applied: Vec<f64>,
    pub selected: bool,
    /// One of the two task vectors is exactly zero; never selected.
    pub degenerate: bool,
    pub nuclear_mllm: f64,
    pub nuclear_math: f64,
    pub sigma_mllm: Vec<f64>,
    pub sigma_math: Vec<f64>,
}

impl SimilarityProfile {
    pub fn s1(&self) -> f64 {
        self.s.first().copied().unwrap_or(0.0)
    }
}

fn abs_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // sqrt of the product keeps identical vectors at exactly 1
    (dot.abs() / (na * nb).sqrt()).min(1.0)
}

/// `S_i = |⟨v_{M,i}, v_{V,i}⟩| / (‖v_{M,i}‖·‖v_{V,i}‖)`, pairing right-singular
/// vectors by singular-value rank.
pub fn corresponding_angles(
    svd_math: &SvdResult,
    svd_mllm: &SvdResult,
) -> Result<Vec<f64>, LinalgError> {
    check_comparable(svd_math.vt.cols(), svd_mllm.vt.cols())?;
    check_comparable(svd_math.rank(), svd_mllm.rank())?;
    Ok((0..svd_math.rank())
        .map(|i| abs_cosine(svd_math.right_vector(i), svd_mllm.right_vector(i)))
        .collect())
}

/// Left-singular-vector counterpart of [`corresponding_angles`].
pub fn corresponding_angles_left(
    svd_math: &SvdResult,
    svd_mllm: &SvdResult,
) -> Result<Vec<f64>, LinalgError> {
    check_comparable(svd_math.u.rows(), svd_mllm.u.rows())?;
    check_comparable(svd_math.rank(), svd_mllm.rank())?;
    Ok((0..svd_math.rank())
        .map(|i| abs_cosine(&svd_math.left_vector(i), &svd_mllm.left_vector(i)))
        .collect())
}

fn check_comparable(expected: usize, got: usize) -> Result<(), LinalgError> {
    if expected != got {
        return Err(LinalgError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Selection mask: layer `n` is kept iff `S₁ⁿ ≥ threshold` and neither task
/// vector is zero.
pub fn select_layers(profiles: &[SimilarityProfile], threshold: f64) -> Vec<bool> {
    profiles
        .iter()
        .map(|p| !p.degenerate && p.s1() >= threshold)
        .collect()
}

/// `λ = Σσ_V / Σσ_M`; 0 when the donor's nuclear norm is zero.
pub fn rescale_factor(sigma_mllm: &[f64], sigma_math: &[f64]) -> f64 {
    let math = nuclear_norm(sigma_math);
    if math == 0.0 {
        return 0.0;
    }
    nuclear_norm(sigma_mllm) / math
}

/// Softmax weights over the similarity scores and the gains derived from
/// them according to `mode`.
pub fn importance_scores(s: &[f64], mode: GammaMode) -> (Vec<f64>, Vec<f64>) {
    if s.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let gamma: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let applied = match mode {
        GammaMode::SoftmaxRaw => gamma.clone(),
        GammaMode::SoftmaxMaxnorm => {
            let gmax = gamma.iter().copied().fold(0.0, f64::max);
            gamma.iter().map(|g| (g / gmax).min(1.0)).collect()
        }
        GammaMode::UniformOnes => vec![1.0; gamma.len()],
    };
    (gamma, applied)
}

/// Builds the profile of one donor layer against an already decomposed
/// target delta.
pub fn analyze_against(
    layer: &str,
    svd_mllm: &SvdResult,
    delta_math: &Matrix,
    cfg: &SelectionConfig,
) -> Result<(SimilarityProfile, SvdResult), LinalgError> {
    let svd_math = svd(delta_math, cfg.rank_limit)?;
    let s = corresponding_angles(&svd_math, svd_mllm)?;
    let s_left = corresponding_angles_left(&svd_math, svd_mllm)?;
    let nuclear_mllm = nuclear_norm(&svd_mllm.sigma);
    let nuclear_math = nuclear_norm(&svd_math.sigma);
    let degenerate = nuclear_math == 0.0 || nuclear_mllm == 0.0;
    if nuclear_math == 0.0 {
        log::warn!("layer `{layer}`: donor task vector is zero; layer left unmerged");
    } else if nuclear_mllm == 0.0 {
        log::warn!("layer `{layer}`: target task vector is zero; layer left unmerged");
    }
    let lambda = rescale_factor(&svd_mllm.sigma, &svd_math.sigma);
    let (gamma, gamma_applied) = importance_scores(&s, cfg.gamma_mode);
    let s1 = s.first().copied().unwrap_or(0.0);
    let profile = SimilarityProfile {
        layer: layer.to_owned(),
        selected: !degenerate && s1 >= cfg.threshold,
        s,
        s_left,
        lambda,
        gamma,
        gamma_applied,
        degenerate,
        nuclear_mllm,
        nuclear_math,
        sigma_mllm: svd_mllm.sigma.clone(),
        sigma_math: svd_math.sigma.clone(),
    };
    Ok((profile, svd_math))
}

/// Full per-layer analysis of a donor/target pair.
pub fn analyze_pair(
    delta_math: &Matrix,
    delta_mllm: &Matrix,
    cfg: &SelectionConfig,
) -> Result<SimilarityProfile, LinalgError> {
    if delta_math.shape() != delta_mllm.shape() {
        return Err(LinalgError::DimensionMismatch {
            expected: delta_mllm.data().len(),
            got: delta_math.data().len(),
        });
    }
    let svd_mllm = svd(delta_mllm, cfg.rank_limit)?;
    analyze_against("", &svd_mllm, delta_math, cfg).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_svd(v: Vec<f64>) -> SvdResult {
        let n = v.len();
        SvdResult {
            u: Matrix::new(1, 1, vec![1.0]).unwrap(),
            sigma: vec![1.0],
            vt: Matrix::new(1, n, v).unwrap(),
        }
    }

    #[test]
    fn identical_matrices_score_one() {
        let a = Matrix::from_fn(5, 4, |r, c| ((r * 4 + c) as f64 * 0.77).sin());
        let s = svd(&a, None).unwrap();
        for v in corresponding_angles(&s, &s).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_vectors_score_zero() {
        let s = corresponding_angles(&unit_svd(vec![1.0, 0.0]), &unit_svd(vec![0.0, 1.0])).unwrap();
        assert_eq!(s, vec![0.0]);
    }

    #[test]
    fn diagonal_vector_scores_inv_sqrt2() {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let s = corresponding_angles(&unit_svd(vec![r, r]), &unit_svd(vec![1.0, 0.0])).unwrap();
        assert!((s[0] - 0.707_106_781_186_547_5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(corresponding_angles(&unit_svd(vec![1.0, 0.0]), &unit_svd(vec![1.0])).is_err());
    }

    #[test]
    fn selection_threshold() {
        let mk = |s1: f64| SimilarityProfile {
            layer: String::new(),
            s: vec![s1],
            s_left: vec![],
            lambda: 1.0,
            gamma: vec![1.0],
            gamma_applied: vec![1.0],
            selected: false,
            degenerate: false,
            nuclear_mllm: 1.0,
            nuclear_math: 1.0,
            sigma_mllm: vec![1.0],
            sigma_math: vec![1.0],
        };
        assert_eq!(select_layers(&[mk(0.9), mk(0.1)], 0.3), vec![true, false]);
        let mut degenerate = mk(1.0);
        degenerate.degenerate = true;
        assert_eq!(select_layers(&[degenerate], 0.0), vec![false]);
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_factor(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert_eq!(rescale_factor(&[2.0, 2.0], &[1.0, 1.0]), 2.0);
        assert_eq!(rescale_factor(&[3.0, 1.0], &[2.0, 2.0]), 1.0);
        assert_eq!(rescale_factor(&[3.0, 1.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn importance_examples() {
        let (g, _) = importance_scores(&[0.4; 4], GammaMode::SoftmaxRaw);
        for v in g {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let (g, raw) = importance_scores(&[2f64.ln(), 0.0], GammaMode::SoftmaxRaw);
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(g, raw);
        let (_, applied) = importance_scores(&[0.9, 0.2, 0.5], GammaMode::SoftmaxMaxnorm);
        assert_eq!(applied.iter().copied().fold(0.0, f64::max), 1.0);
        let (_, ones) = importance_scores(&[0.9, 0.2], GammaMode::UniformOnes);
        assert_eq!(ones, vec![1.0, 1.0]);
    }

    #[test]
    fn analyze_identical_deltas() {
        let d = Matrix::from_fn(6, 5, |r, c| ((r * 5 + c) as f64 * 0.31).cos());
        let p = analyze_pair(&d, &d, &SelectionConfig { threshold: 0.999, ..Default::default() })
            .unwrap();
        assert!((p.s1() - 1.0).abs() < 1e-12);
        assert!((p.lambda - 1.0).abs() < 1e-12);
        assert!(p.selected);
    }

    #[test]
    fn analyze_orthogonal_row_spaces() {
        // target lives on columns 0..2, donor on columns 2..4
        let mllm = Matrix::from_fn(4, 4, |r, c| if c < 2 { (r + c + 1) as f64 } else { 0.0 });
        let math = Matrix::from_fn(4, 4, |r, c| if c >= 2 { (r * c + 1) as f64 } else { 0.0 });
        let p = analyze_pair(&math, &mllm, &SelectionConfig::default()).unwrap();
        assert!(p.s1() < 1e-12);
        assert!(!p.selected);
    }

    #[test]
    fn analyze_zero_donor() {
        let mllm = Matrix::from_fn(3, 3, |r, c| (r + 2 * c) as f64);
        let p = analyze_pair(&Matrix::zeros(3, 3), &mllm, &SelectionConfig::default()).unwrap();
        assert!(!p.selected);
        assert!(p.degenerate);
        assert_eq!(p.lambda, 0.0);
        let all = p.s.iter().chain(&p.gamma).chain(&p.gamma_applied);
        assert!(all.into_iter().all(|v| v.is_finite()));
    }

    #[test]
    fn config_json_defaults() {
        let cfg: SelectionConfig = serde_json::from_str(r#"{"threshold":0.6}"#).unwrap();
        assert_eq!(cfg.gamma_mode, GammaMode::SoftmaxMaxnorm);
        assert_eq!(cfg.gamma_exponent, 2);
        assert!(SelectionConfig { threshold: -0.1, ..cfg }.validate().is_err());
    }
}
