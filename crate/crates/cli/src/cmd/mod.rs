//! One module per subcommand, plus the plumbing they share.

pub mod ablate;
pub mod build_graph;
pub mod eval;
pub mod gradcheck;
pub mod synth;
pub mod train;

use crate::config::{CliError, RunConfig};
use gatiaa_core::graph::FeatureGraph;
use gatiaa_core::io::{afg_read, manifest_read, Split};
use std::path::{Path, PathBuf};

/// Commands that write files refuse to guess a location.
fn require_out(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.out
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command writes files; pass --out PATH".into()))
}

fn create_out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = require_out(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::File {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(out.to_path_buf())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::File {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Loads every graph a manifest assigns to `split`, resolving relative
/// paths against the manifest's own directory.
fn load_split(manifest: &Path, split: Split) -> Result<Vec<FeatureGraph>, CliError> {
    let entries = manifest_read(manifest)?;
    let mut graphs = Vec::new();
    for e in entries.iter().filter(|e| e.split == split) {
        graphs.push(afg_read(&e.resolved_path(manifest))?);
    }
    Ok(graphs)
}

/// Worker count for evaluation: serial when `--deterministic`, otherwise
/// the machine's parallelism (the `GATIAA_THREADS` env var caps it further
/// inside the evaluator).
fn workers(cfg: &RunConfig) -> usize {
    if cfg.deterministic {
        1
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}
