//! Matching tensors across the base model, the multimodal target and the
//! donor LLMs.
//!
//! Canonical names are the target (MLLM) names. Rename rules rewrite
//! base/donor names into that namespace before lookup.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use globset::{Glob, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Serialize};

use super::NamedTensorMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Attention,
    Mlp,
    Other,
}

impl LayerKind {
    pub fn classify(name: &str) -> Self {
        let lower = name.to_ascii_lowercase();
        if lower.contains("attn") || lower.contains("attention") {
            LayerKind::Attention
        } else if lower.contains("mlp") || lower.contains("feed_forward") || lower.contains("ffn")
        {
            LayerKind::Mlp
        } else {
            LayerKind::Other
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Attention => "attention",
            LayerKind::Mlp => "mlp",
            LayerKind::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnMissing {
    #[default]
    Error,
    Skip,
}

/// Prefix rewrite from a base/donor tensor name to the canonical name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenameRule {
    pub from: String,
    pub to: String,
}

/// Which tensors take part in merging and how names line up.
///
/// JSON form:
/// ```json
/// {
///   "include": ["*self_attn.*_proj.weight", "*mlp.*_proj.weight"],
///   "exclude": ["*vision_tower*"],
///   "rename": [{"from": "model.", "to": "language_model.model."}],
///   "on_missing": "error"
/// }
/// ```
/// Missing fields take the defaults of [`AlignmentSpec::default`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentSpec {
    pub include: Vec<String>,
    pub exclude: Vec<String>,
    pub rename: Vec<RenameRule>,
    pub on_missing: OnMissing,
}

const DEFAULT_INCLUDE: &[&str] = &[
    "*self_attn.*_proj.weight",
    "*mlp.*_proj.weight",
    "*attention.w*.weight",
    "*feed_forward.w*.weight",
];

const DEFAULT_EXCLUDE: &[&str] = &[
    "*vision_tower*",
    "*vision_model*",
    "visual.*",
    "*.visual.*",
    "*mm_projector*",
    "*multi_modal_projector*",
    "mlp1.*",
    "*embed_tokens*",
    "*lm_head*",
];

impl Default for AlignmentSpec {
    fn default() -> Self {
        Self {
            include: DEFAULT_INCLUDE.iter().map(|s| s.to_string()).collect(),
            exclude: DEFAULT_EXCLUDE.iter().map(|s| s.to_string()).collect(),
            rename: Vec::new(),
            on_missing: OnMissing::Error,
        }
    }
}

impl AlignmentSpec {
    /// Named presets: `default`, and `llava-hf` for MLLMs that nest the
    /// language model under `language_model.` (LLaVA, InternVL).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "llava-hf" => Ok(Self {
                rename: vec![
                    RenameRule {
                        from: "model.".into(),
                        to: "language_model.model.".into(),
                    },
                    RenameRule {
                        from: "lm_head.".into(),
                        to: "language_model.lm_head.".into(),
                    },
                ],
                ..Self::default()
            }),
            other => Err(Error::Config(format!("unknown alignment preset `{other}`"))),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("alignment spec {}: {e}", path.display())))
    }

    /// Canonical name for a base/donor tensor name.
    pub fn canonical_name(&self, name: &str) -> String {
        for rule in &self.rename {
            if let Some(rest) = name.strip_prefix(rule.from.as_str()) {
                return format!("{}{}", rule.to, rest);
            }
        }
        name.to_owned()
    }

    fn compile(patterns: &[String]) -> Result<GlobSet> {
        let mut b = GlobSetBuilder::new();
        for p in patterns {
            b.add(Glob::new(p).map_err(|e| Error::Config(format!("bad pattern `{p}`: {e}")))?);
        }
        b.build()
            .map_err(|e| Error::Config(format!("pattern set: {e}")))
    }
}

/// Names of one merge-eligible matrix in every source model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTriple {
    pub canonical_name: String,
    pub base: String,
    pub mllm: String,
    /// One name per donor LLM, in donor order.
    pub llm: Vec<String>,
    pub kind: LayerKind,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassThroughReason {
    Excluded,
    NotIncluded,
    NotMatrix,
    NotAttentionOrMlp,
    MissingInSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassThrough {
    pub name: String,
    pub reason: PassThroughReason,
}

/// Result of [`align_layers`]: merge-eligible triples plus every tensor that
/// is copied from the MLLM untouched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub triples: Vec<LayerTriple>,
    pub pass_through: Vec<PassThrough>,
}

impl Alignment {
    pub fn eligible_count(&self) -> usize {
        self.triples.len()
    }

    pub fn skipped_missing(&self) -> impl Iterator<Item = &str> {
        self.pass_through
            .iter()
            .filter(|p| p.reason == PassThroughReason::MissingInSource)
            .map(|p| p.name.as_str())
    }
}

fn canonical_index(
    map: &NamedTensorMap,
    spec: &AlignmentSpec,
    label: &str,
) -> Result<HashMap<String, String>> {
    let mut out = HashMap::with_capacity(map.len());
    for name in map.names() {
        let canon = spec.canonical_name(name);
        if let Some(prev) = out.insert(canon.clone(), name.clone()) {
            return Err(Error::Config(format!(
                "rename rules map both `{prev}` and `{name}` in {label} to `{canon}`"
            )));
        }
    }
    Ok(out)
}

pub fn align_layers(
    base: &NamedTensorMap,
    mllm: &NamedTensorMap,
    llms: &[&NamedTensorMap],
    spec: &AlignmentSpec,
) -> Result<Alignment> {
    let include = AlignmentSpec::compile(&spec.include)?;
    let exclude = AlignmentSpec::compile(&spec.exclude)?;
    let base_idx = canonical_index(base, spec, "base")?;
    let llm_idx = llms
        .iter()
        .enumerate()
        .map(|(i, m)| canonical_index(m, spec, &format!("llm[{i}]")))
        .collect::<Result<Vec<_>>>()?;

    let mut triples = Vec::new();
    let mut pass_through = Vec::new();
    let mut pass = |name: &str, reason| {
        pass_through.push(PassThrough {
            name: name.to_owned(),
            reason,
        })
    };

    'tensors: for (name, tensor) in mllm.iter() {
        if exclude.is_match(name) {
            pass(name, PassThroughReason::Excluded);
            continue;
        }
        if !include.is_match(name) {
            pass(name, PassThroughReason::NotIncluded);
            continue;
        }
        let shape = match tensor.shape() {
            &[r, c] => [r, c],
            _ => {
                pass(name, PassThroughReason::NotMatrix);
                continue;
            }
        };
        let kind = LayerKind::classify(name);
        if kind == LayerKind::Other {
            pass(name, PassThroughReason::NotAttentionOrMlp);
            continue;
        }

        let mut sources: Vec<(String, &NamedTensorMap, &HashMap<String, String>)> =
            vec![("base".into(), base, &base_idx)];
        for (i, (m, idx)) in llms.iter().zip(&llm_idx).enumerate() {
            sources.push((format!("llm[{i}]"), m, idx));
        }

        let mut resolved = Vec::with_capacity(sources.len());
        for (label, map, idx) in &sources {
            let Some(src_name) = idx.get(name) else {
                match spec.on_missing {
                    OnMissing::Error => {
                        return Err(Error::MissingTensor {
                            tensor: name.clone(),
                            source_label: label.clone(),
                        })
                    }
                    OnMissing::Skip => {
                        log::warn!("`{name}` missing from {label}; copying it from the MLLM");
                        pass(name, PassThroughReason::MissingInSource);
                        continue 'tensors;
                    }
                }
            };
            let got = map.get(src_name).expect("indexed name exists").shape();
            if got != shape {
                return Err(Error::ShapeMismatch {
                    tensor: name.clone(),
                    expected: shape.to_vec(),
                    got: got.to_vec(),
                    what: format!("{label} `{src_name}` vs mllm"),
                });
            }
            resolved.push(src_name.clone());
        }

        let mut it = resolved.into_iter();
        let base_name = it.next().expect("base resolved");
        triples.push(LayerTriple {
            canonical_name: name.clone(),
            base: base_name,
            mllm: name.clone(),
            llm: it.collect(),
            kind,
            shape,
        });
    }

    Ok(Alignment {
        triples,
        pass_through,
    })
}

/// Per-kind counts of eligible layers.
pub fn kind_counts(alignment: &Alignment) -> BTreeMap<LayerKind, usize> {
    let mut out = BTreeMap::new();
    for t in &alignment.triples {
        *out.entry(t.kind).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{DType, Tensor};

    fn map_with(names: &[(&str, &[usize])]) -> NamedTensorMap {
        let mut m = NamedTensorMap::new();
        for (n, shape) in names {
            let numel = shape.iter().product();
            m.insert(*n, Tensor::new(DType::F32, shape.to_vec(), vec![0.0; numel]).unwrap())
                .unwrap();
        }
        m
    }

    const LLM_NAMES: &[(&str, &[usize])] = &[
        ("model.layers.0.self_attn.q_proj.weight", &[4, 4]),
        ("model.layers.0.mlp.up_proj.weight", &[8, 4]),
        ("model.layers.0.input_layernorm.weight", &[4]),
        ("model.embed_tokens.weight", &[10, 4]),
    ];

    #[test]
    fn identical_names_default_spec() {
        let m = map_with(LLM_NAMES);
        let a = align_layers(&m, &m, &[&m], &AlignmentSpec::default()).unwrap();
        let names: Vec<_> = a.triples.iter().map(|t| t.canonical_name.as_str()).collect();
        assert_eq!(
            names,
            [
                "model.layers.0.mlp.up_proj.weight",
                "model.layers.0.self_attn.q_proj.weight"
            ]
        );
        assert_eq!(a.triples[0].kind, LayerKind::Mlp);
        assert_eq!(a.triples[1].kind, LayerKind::Attention);
        assert_eq!(a.pass_through.len(), 2);
    }

    #[test]
    fn vision_tower_passes_through() {
        let base = map_with(LLM_NAMES);
        let mut names = LLM_NAMES.to_vec();
        names.push(("vision_tower.blocks.0.attn.qkv.weight", &[12, 4]));
        let mllm = map_with(&names);
        let a = align_layers(&base, &mllm, &[&base], &AlignmentSpec::default()).unwrap();
        assert!(a.triples.iter().all(|t| !t.mllm.starts_with("vision_tower")));
        assert!(a.pass_through.contains(&PassThrough {
            name: "vision_tower.blocks.0.attn.qkv.weight".into(),
            reason: PassThroughReason::Excluded
        }));
    }

    #[test]
    fn missing_layer_error_or_skip() {
        let full = map_with(LLM_NAMES);
        let partial = map_with(&LLM_NAMES[1..]);
        let err = align_layers(&full, &full, &[&partial], &AlignmentSpec::default()).unwrap_err();
        assert!(matches!(err, Error::MissingTensor { .. }));

        let spec = AlignmentSpec {
            on_missing: OnMissing::Skip,
            ..AlignmentSpec::default()
        };
        let a = align_layers(&full, &full, &[&partial], &spec).unwrap();
        assert_eq!(a.eligible_count(), 1);
        assert_eq!(
            a.skipped_missing().collect::<Vec<_>>(),
            ["model.layers.0.self_attn.q_proj.weight"]
        );
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = map_with(LLM_NAMES);
        let b = map_with(&[("model.layers.0.self_attn.q_proj.weight", &[4, 5])]);
        let spec = AlignmentSpec {
            on_missing: OnMissing::Skip,
            ..AlignmentSpec::default()
        };
        assert!(matches!(
            align_layers(&a, &a, &[&b], &spec),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rename_preset_aligns_prefixed_mllm() {
        let llm = map_with(LLM_NAMES);
        let prefixed: Vec<(String, &[usize])> = LLM_NAMES
            .iter()
            .map(|(n, s)| (format!("language_model.{n}"), *s))
            .collect();
        let refs: Vec<(&str, &[usize])> = prefixed.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        let mllm = map_with(&refs);
        let spec = AlignmentSpec::preset("llava-hf").unwrap();
        let a = align_layers(&llm, &mllm, &[&llm], &spec).unwrap();
        assert_eq!(a.eligible_count(), 2);
        assert_eq!(a.triples[1].base, "model.layers.0.self_attn.q_proj.weight");
        assert_eq!(
            a.triples[1].mllm,
            "language_model.model.layers.0.self_attn.q_proj.weight"
        );
    }

    #[test]
    fn non_injective_rename_rejected() {
        let m = map_with(&[("a.x", &[1, 1]), ("b.x", &[1, 1])]);
        let spec = AlignmentSpec {
            rename: vec![
                RenameRule {
                    from: "a.".into(),
                    to: "c.".into(),
                },
                RenameRule {
                    from: "b.".into(),
                    to: "c.".into(),
                },
            ],
            ..AlignmentSpec::default()
        };
        assert!(matches!(
            align_layers(&m, &m, &[&m], &spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_pattern_rejected() {
        let m = map_with(LLM_NAMES);
        let spec = AlignmentSpec {
            include: vec!["[".into()],
            ..AlignmentSpec::default()
        };
        assert!(matches!(align_layers(&m, &m, &[], &spec), Err(Error::Config(_))));
    }

    #[test]
    fn json_defaults_fill_in() {
        let spec: AlignmentSpec = serde_json::from_str(r#"{"on_missing":"skip"}"#).unwrap();
        assert_eq!(spec.include, AlignmentSpec::default().include);
        assert_eq!(spec.on_missing, OnMissing::Skip);
    }
}
