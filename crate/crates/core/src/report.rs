//! Per-layer similarity analysis, written as CSV plus a JSON mirror.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::LayerKind;
use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::merge::MergeInputs;
use crate::subspace::{analyze_against, SelectionConfig};
use crate::taskvector::TraceMetric;

pub const DEFAULT_TOP_K: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub selection: SelectionConfig,
    pub top_k: usize,
    pub trace_metric: TraceMetric,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            selection: SelectionConfig::default(),
            top_k: DEFAULT_TOP_K,
            trace_metric: TraceMetric::default(),
        }
    }
}

/// One (layer, donor) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub layer: String,
    pub layer_index: Option<usize>,
    pub kind: LayerKind,
    pub donor: usize,
    pub trace_mllm: f64,
    pub trace_donor: f64,
    pub s1: f64,
    pub s1_left: f64,
    pub lambda: f64,
    pub selected: bool,
    pub sigma_mllm: Vec<f64>,
    pub sigma_donor: Vec<f64>,
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub tool_version: String,
    pub config: AnalysisConfig,
    pub donors: usize,
    pub eligible: usize,
    pub rows: Vec<AnalysisRow>,
    /// Layer name with its index replaced by `*` → layer index → selected by
    /// any donor.
    pub selection_map: BTreeMap<String, BTreeMap<usize, bool>>,
}

/// First dotted path segment that parses as an integer.
pub fn layer_index(name: &str) -> Option<usize> {
    name.split('.').find_map(|s| s.parse().ok())
}

fn index_pattern(name: &str) -> String {
    let mut replaced = false;
    name.split('.')
        .map(|s| {
            if !replaced && s.parse::<usize>().is_ok() {
                replaced = true;
                "*"
            } else {
                s
            }
        })
        .collect::<Vec<_>>()
        .join(".")
}

pub fn analyze(inputs: &MergeInputs, cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    cfg.selection.validate().map_err(Error::Config)?;
    if cfg.top_k == 0 {
        return Err(Error::Config("top-k must be at least 1".into()));
    }
    if inputs.donors.is_empty() {
        return Err(Error::Config("at least one donor checkpoint is required".into()));
    }
    let k = cfg.top_k;
    let per_layer: Vec<Vec<AnalysisRow>> = inputs
        .alignment
        .triples
        .par_iter()
        .map(|t| -> Result<Vec<AnalysisRow>> {
            let name = &t.canonical_name;
            let dv = inputs.mllm_delta(t)?;
            let svd_mllm = svd(&dv, cfg.selection.rank_limit).map_err(|e| Error::linalg(name, e))?;
            let trace_mllm = cfg
                .trace_metric
                .evaluate(&dv)
                .map_err(|e| Error::linalg(name, e))?;
            let mut rows = Vec::new();
            for (donor, dm) in inputs.donor_deltas(t)?.iter().enumerate() {
                let (p, _) = analyze_against(name, &svd_mllm, dm, &cfg.selection)
                    .map_err(|e| Error::linalg(name, e))?;
                let trace_donor = cfg
                    .trace_metric
                    .evaluate(dm)
                    .map_err(|e| Error::linalg(name, e))?;
                rows.push(AnalysisRow {
                    layer: name.clone(),
                    layer_index: layer_index(name),
                    kind: t.kind,
                    donor,
                    trace_mllm,
                    trace_donor,
                    s1: p.s1(),
                    s1_left: p.s_left.first().copied().unwrap_or(0.0),
                    lambda: p.lambda,
                    selected: p.selected,
                    sigma_mllm: p.sigma_mllm.iter().take(k).copied().collect(),
                    sigma_donor: p.sigma_math.iter().take(k).copied().collect(),
                    s: p.s.iter().take(k).copied().collect(),
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<AnalysisRow> = per_layer.into_iter().flatten().collect();

    let mut selection_map: BTreeMap<String, BTreeMap<usize, bool>> = BTreeMap::new();
    for r in &rows {
        if let Some(i) = r.layer_index {
            let slot = selection_map
                .entry(index_pattern(&r.layer))
                .or_default()
                .entry(i)
                .or_insert(false);
            *slot |= r.selected;
        }
    }

    Ok(AnalysisReport {
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        config: cfg.clone(),
        donors: inputs.donors.len(),
        eligible: inputs.alignment.triples.len(),
        rows,
        selection_map,
    })
}

impl AnalysisReport {
    pub fn selected_count(&self) -> usize {
        self.rows.iter().filter(|r| r.selected).count()
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "layer",
            "layer_index",
            "kind",
            "donor",
            "trace_mllm",
            "trace_donor",
            "s1",
            "s1_left",
            "lambda",
            "selected",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let k = self.config.top_k;
        h.extend((1..=k).map(|i| format!("sigma_mllm_{i}")));
        h.extend((1..=k).map(|i| format!("sigma_donor_{i}")));
        h.extend((1..=k).map(|i| format!("s_{i}")));
        h
    }

    /// Writes the CSV table. Spectra shorter than `top_k` leave empty cells.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        out.write_record(self.csv_header()).map_err(csv_err)?;
        let k = self.config.top_k;
        let padded = |v: &[f64]| -> Vec<String> {
            (0..k)
                .map(|i| v.get(i).map(|x| x.to_string()).unwrap_or_default())
                .collect()
        };
        for r in &self.rows {
            let mut rec = vec![
                r.layer.clone(),
                r.layer_index.map(|i| i.to_string()).unwrap_or_default(),
                r.kind.as_str().to_owned(),
                r.donor.to_string(),
                r.trace_mllm.to_string(),
                r.trace_donor.to_string(),
                r.s1.to_string(),
                r.s1_left.to_string(),
                r.lambda.to_string(),
                r.selected.to_string(),
            ];
            rec.extend(padded(&r.sigma_mllm));
            rec.extend(padded(&r.sigma_donor));
            rec.extend(padded(&r.s));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
