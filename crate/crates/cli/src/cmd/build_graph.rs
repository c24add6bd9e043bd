//! `gatiaa build-graph` — assemble raw feature-map dumps into one graph.
//!
//! Each input is a raw little-endian float32 file with a `<file>.json`
//! sidecar giving `{d, w, h}`. Maps are resized to the last map's grid and
//! concatenated along the feature axis, so the node width is the sum of the
//! input depths.

use super::{require_out, CliError, RunConfig};
use gatiaa_core::graph::build_feature_graph;
use gatiaa_core::io::{afg_write, raw_map_read};
use std::path::{Path, PathBuf};

fn out_file(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("graph.afg")
    } else {
        out.to_path_buf()
    }
}

pub fn run(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<(), CliError> {
    let out = out_file(require_out(cfg)?);
    let joined = inputs
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(",");
    print!("{}", cfg.echo("build-graph", &[("inputs", joined)]));

    let maps = inputs
        .iter()
        .map(|p| raw_map_read(p))
        .collect::<Result<Vec<_>, _>>()?;
    let id = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("graph")
        .to_string();
    let graph = build_feature_graph(&maps, None, &id)?;
    afg_write(&graph, &out)?;
    println!(
        "wrote {}: {} nodes ({}x{} grid), {} features per node",
        out.display(),
        graph.node_count(),
        graph.grid_w,
        graph.grid_h,
        graph.feature_dim(),
    );
    Ok(())
}
