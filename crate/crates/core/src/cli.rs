//! `ipmerge` command-line front end.
//!
//! Exit codes: 0 success, 1 verification or numerical failure, 2 usage or
//! configuration error, 3 I/O or format error. Failures print one line on
//! stderr: `error[<kind>]: <message>`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{
    align_layers, load_checkpoint, save_checkpoint, write_atomic, AlignmentSpec, DType,
    DTypePolicy, NamedTensorMap,
};
use crate::error::{Error, Result};
use crate::interop::{Manifest, ReferenceActivations, ToyArchitecture};
use crate::merge::{merge, verify_merge, with_threads, MergeInputs, MergeMethod, MergeRecipe, MergeReport, VerifyInputs};
use crate::report::{analyze, AnalysisConfig};
use crate::subspace::{GammaMode, SelectionConfig};
use crate::synthetic::{generate, SyntheticSpec};
use crate::taskvector::TraceMetric;

pub const THREADS_ENV: &str = "IPMERGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ipmerge", version, about = "Merge reasoning fine-tunes into multimodal checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge donor fine-tunes into the MLLM checkpoint.
    Merge(MergeArgs),
    /// Write per-layer similarity diagnostics as CSV and JSON.
    Analyze(AnalyzeArgs),
    /// Check a merged checkpoint against its report.
    Verify(VerifyArgs),
    /// Write a name/dtype/shape manifest of a checkpoint.
    Manifest(ManifestArgs),
    /// Evaluate the tiny reference decoder on a checkpoint.
    Reference(ReferenceArgs),
    /// Generate seeded synthetic base, MLLM and donor checkpoints.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct SourceArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    mllm: PathBuf,
    /// Donor checkpoint; repeat for several donors.
    #[arg(long = "llm", required = true)]
    llms: Vec<PathBuf>,
    /// Alignment spec JSON; overrides --align-preset.
    #[arg(long)]
    align_spec: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    align_preset: String,
    #[arg(long)]
    threads: Option<usize>,
    /// Accepted for scripts; merges are always order-deterministic.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args)]
struct MergeArgs {
    #[command(flatten)]
    src: SourceArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    method: Option<MergeMethod>,
    /// Recipe JSON; individual flags override its fields.
    #[arg(long)]
    recipe: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    gamma_mode: Option<GammaMode>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Vec<f64>,
    #[arg(long)]
    retain: Option<f64>,
    #[arg(long)]
    dtype: Option<DTypePolicy>,
    /// Defaults to `<out>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    src: SourceArgs,
    /// Output prefix; writes `<out>.csv` and `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = crate::report::DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = crate::subspace::THRESHOLD_LLAMA_FAMILY)]
    threshold: f64,
    #[arg(long, default_value = "softmax_maxnorm")]
    gamma_mode: GammaMode,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value = "frobenius_sq")]
    trace_metric: String,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    merged: PathBuf,
    #[arg(long)]
    mllm: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// With --llm, recomputes nuclear norms from the source checkpoints.
    #[arg(long, requires = "llms")]
    base: Option<PathBuf>,
    #[arg(long = "llm", requires = "base")]
    llms: Vec<PathBuf>,
    #[arg(long)]
    align_spec: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    align_preset: String,
}

#[derive(Debug, Args)]
struct ManifestArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReferenceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Architecture JSON; the built-in tiny decoder when omitted.
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// `toy` matches the tiny reference decoder; `oracle` is 4 layers of width 128.
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long, default_value_t = 1)]
    donors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "F32")]
    dtype: DType,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let line: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(|l| l.trim().trim_start_matches("error: "))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("error[usage]: {}", line.join(" "));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let one_line = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {one_line}", e.kind());
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Merge(a) => cmd_merge(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Manifest(a) => cmd_manifest(a),
        Command::Reference(a) => cmd_reference(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn thread_count(flag: Option<usize>) -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        return v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")));
    }
    match flag {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn alignment_spec(path: Option<&Path>, preset: &str) -> Result<AlignmentSpec> {
    match path {
        Some(p) => AlignmentSpec::from_json_file(p),
        None => AlignmentSpec::preset(preset),
    }
}

struct Sources {
    base: NamedTensorMap,
    mllm: NamedTensorMap,
    donors: Vec<NamedTensorMap>,
    spec: AlignmentSpec,
}

fn load_sources(src: &SourceArgs) -> Result<Sources> {
    let spec = alignment_spec(src.align_spec.as_deref(), &src.align_preset)?;
    Ok(Sources {
        base: load_checkpoint(&src.base)?,
        mllm: load_checkpoint(&src.mllm)?,
        donors: src.llms.iter().map(load_checkpoint).collect::<Result<_>>()?,
        spec,
    })
}

fn build_recipe(a: &MergeArgs) -> Result<MergeRecipe> {
    let mut recipe = match (&a.recipe, a.method) {
        (Some(p), _) => MergeRecipe::from_json_file(p)?,
        (None, Some(MergeMethod::Ip)) => MergeRecipe::ip(SelectionConfig::default()),
        (None, Some(MergeMethod::TaskArithmetic)) => MergeRecipe::task_arithmetic(vec![]),
        (None, Some(MergeMethod::Ties)) => MergeRecipe::ties(0.2, 1.0),
        (None, Some(MergeMethod::Emr)) => MergeRecipe::emr(),
        (None, None) => return Err(Error::Config("either --method or --recipe is required".into())),
    };
    if let (Some(m), Some(_)) = (a.method, &a.recipe) {
        if m != recipe.method {
            return Err(Error::Config(format!(
                "--method {} conflicts with recipe method {}",
                m.as_str(),
                recipe.method.as_str()
            )));
        }
    }
    let sel_flags = a.threshold.is_some() || a.gamma_mode.is_some() || a.rank.is_some();
    if sel_flags {
        if recipe.method != MergeMethod::Ip {
            return Err(Error::Config(
                "--threshold, --gamma-mode and --rank apply to the ip method only".into(),
            ));
        }
        let sel = recipe.selection.get_or_insert_with(SelectionConfig::default);
        if let Some(t) = a.threshold {
            sel.threshold = t;
        }
        if let Some(g) = a.gamma_mode {
            sel.gamma_mode = g;
        }
        if a.rank.is_some() {
            sel.rank_limit = a.rank;
        }
    }
    if !a.alpha.is_empty() {
        recipe.alpha = Some(a.alpha.clone());
    }
    if let Some(r) = a.retain {
        recipe.ties_retain_fraction = Some(r);
    }
    if let Some(d) = a.dtype {
        recipe.dtype_policy = d;
    }
    recipe.validate()?;
    Ok(recipe)
}

fn default_report_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

fn cmd_merge(a: MergeArgs) -> Result<i32> {
    let recipe = build_recipe(&a)?;
    let threads = thread_count(a.src.threads)?;
    let src = load_sources(&a.src)?;
    let donor_refs: Vec<&NamedTensorMap> = src.donors.iter().collect();
    let alignment = align_layers(&src.base, &src.mllm, &donor_refs, &src.spec)?;
    let inputs = MergeInputs {
        base: &src.base,
        mllm: &src.mllm,
        donors: &src.donors,
        alignment: &alignment,
    };
    let (merged, report) = with_threads(threads, || merge(&inputs, &recipe))??;

    let report_path = a.report.clone().unwrap_or_else(|| default_report_path(&a.out));
    save_checkpoint(&merged, &a.out, DTypePolicy::Preserve)?;
    if let Err(e) = report
        .to_json()
        .and_then(|json| write_atomic(&report_path, format!("{json}\n").as_bytes()))
    {
        let _ = fs::remove_file(&a.out);
        return Err(e);
    }
    println!(
        "merged method={} eligible={} selected={} pass_through={} sha256={}",
        recipe.method.as_str(),
        report.totals.eligible,
        report.totals.selected,
        report.totals.pass_through,
        report.output_sha256
    );
    Ok(0)
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<i32> {
    let trace_metric = match a.trace_metric.as_str() {
        "frobenius_sq" => TraceMetric::FrobeniusSq,
        "nuclear" => TraceMetric::Nuclear,
        other => return Err(Error::Config(format!("unknown trace metric `{other}`"))),
    };
    let cfg = AnalysisConfig {
        selection: SelectionConfig {
            threshold: a.threshold,
            gamma_mode: a.gamma_mode,
            rank_limit: a.rank,
            ..SelectionConfig::default()
        },
        top_k: a.top_k,
        trace_metric,
    };
    let threads = thread_count(a.src.threads)?;
    let src = load_sources(&a.src)?;
    let donor_refs: Vec<&NamedTensorMap> = src.donors.iter().collect();
    let alignment = align_layers(&src.base, &src.mllm, &donor_refs, &src.spec)?;
    let inputs = MergeInputs {
        base: &src.base,
        mllm: &src.mllm,
        donors: &src.donors,
        alignment: &alignment,
    };
    let report = with_threads(threads, || analyze(&inputs, &cfg))??;

    let with_ext = |ext: &str| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    let (csv_path, json_path) = (with_ext(".csv"), with_ext(".json"));
    write_atomic(&csv_path, report.to_csv_string()?.as_bytes())?;
    if let Err(e) = report
        .to_json()
        .and_then(|json| write_atomic(&json_path, format!("{json}\n").as_bytes()))
    {
        let _ = fs::remove_file(&csv_path);
        return Err(e);
    }
    println!(
        "analyzed rows={} selected={} csv={} json={}",
        report.rows.len(),
        report.selected_count(),
        csv_path.display(),
        json_path.display()
    );
    Ok(0)
}

fn cmd_verify(a: VerifyArgs) -> Result<i32> {
    let merged = load_checkpoint(&a.merged)?;
    let mllm = load_checkpoint(&a.mllm)?;
    let report = MergeReport::from_json_file(&a.report)?;

    let sources = match &a.base {
        Some(base) => {
            let base = load_checkpoint(base)?;
            let donors: Vec<NamedTensorMap> =
                a.llms.iter().map(load_checkpoint).collect::<Result<_>>()?;
            let spec = alignment_spec(a.align_spec.as_deref(), &a.align_preset)?;
            let refs: Vec<&NamedTensorMap> = donors.iter().collect();
            let alignment = align_layers(&base, &mllm, &refs, &spec)?;
            Some((base, donors, alignment))
        }
        None => None,
    };
    let inputs = sources.as_ref().map(|(base, donors, alignment)| VerifyInputs {
        base,
        donors,
        alignment,
    });
    let summary = verify_merge(&merged, &report, &mllm, inputs);

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for c in &summary.checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{tag} {}: {}", c.name, c.detail);
    }
    if summary.passed() {
        Ok(0)
    } else {
        let failed: Vec<&str> = summary.failures().map(|c| c.name.as_str()).collect();
        eprintln!("error[verify]: failed checks: {}", failed.join(","));
        Ok(1)
    }
}

fn cmd_manifest(a: ManifestArgs) -> Result<i32> {
    let map = load_checkpoint(&a.checkpoint)?;
    let json = Manifest::of(&map).to_json()?;
    write_atomic(&a.out, format!("{json}\n").as_bytes())?;
    println!("manifest tensors={} out={}", map.len(), a.out.display());
    Ok(0)
}

fn cmd_reference(a: ReferenceArgs) -> Result<i32> {
    let arch = match &a.arch {
        Some(p) => ToyArchitecture::from_json_file(p)?,
        None => ToyArchitecture::default(),
    };
    let map = load_checkpoint(&a.checkpoint)?;
    let refs = ReferenceActivations::compute(&arch, &map)?;
    write_atomic(&a.out, format!("{}\n", refs.to_json()?).as_bytes())?;
    println!("reference rows={} out={}", refs.outputs.len(), a.out.display());
    Ok(0)
}

fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let mut spec = match a.preset.as_str() {
        "toy" => SyntheticSpec::toy(),
        "oracle" => SyntheticSpec::default(),
        other => return Err(Error::Config(format!("unknown synth preset `{other}`"))),
    };
    spec.donors = a.donors;
    spec.seed = a.seed;
    spec.dtype = a.dtype;
    let models = generate(&spec)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    save_checkpoint(&models.base, a.out_dir.join("base.safetensors"), DTypePolicy::Preserve)?;
    save_checkpoint(&models.mllm, a.out_dir.join("mllm.safetensors"), DTypePolicy::Preserve)?;
    for (i, d) in models.donors.iter().enumerate() {
        save_checkpoint(
            d,
            a.out_dir.join(format!("llm{i}.safetensors")),
            DTypePolicy::Preserve,
        )?;
    }
    println!("synth donors={} out_dir={}", models.donors.len(), a.out_dir.display());
    Ok(0)
}
