//! Checkpoint merging by importance-weighted subspace projection, with
//! Task Arithmetic, Ties and EMR baselines.
//!
//! ```no_run
//! use ipmerge::checkpoint::{align_layers, load_checkpoint, AlignmentSpec};
//! use ipmerge::merge::{merge, MergeInputs, MergeRecipe};
//! use ipmerge::subspace::SelectionConfig;
//!
//! # fn main() -> ipmerge::Result<()> {
//! let base = load_checkpoint("base.safetensors")?;
//! let mllm = load_checkpoint("mllm.safetensors")?;
//! let donors = vec![load_checkpoint("math.safetensors")?];
//! let alignment = align_layers(&base, &mllm, &[&donors[0]], &AlignmentSpec::default())?;
//! let inputs = MergeInputs { base: &base, mllm: &mllm, donors: &donors, alignment: &alignment };
//! let (merged, report) = merge(&inputs, &MergeRecipe::ip(SelectionConfig::default()))?;
//! # let _ = (merged, report);
//! # Ok(())
//! # }
//! ```

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod interop;
pub mod linalg;
pub mod merge;
pub mod report;
pub mod subspace;
pub mod synthetic;
pub mod taskvector;

pub use error::{Error, Result};
