//! `gatiaa synth` — generate planted-signal graphs and a split manifest.

use super::{create_out_dir, CliError, RunConfig};
use gatiaa_core::io::{afg_write, manifest_write, split_for_id, ManifestEntry, Split};
use gatiaa_core::synth::generate;
use std::path::PathBuf;

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let out = create_out_dir(cfg)?;
    print!("{}", cfg.echo("synth", &[]));

    let graphs = generate(cfg.seed, cfg.synth_count, &cfg.synth)?;
    let mut entries = Vec::with_capacity(graphs.len());
    for g in &graphs {
        let file = format!("{}.afg", g.id);
        afg_write(g, &out.join(&file))?;
        entries.push(ManifestEntry {
            id: g.id.clone(),
            path: PathBuf::from(file),
            split: split_for_id(&g.id),
        });
    }
    manifest_write(&out.join("manifest.csv"), &entries)?;

    let count = |s: Split| entries.iter().filter(|e| e.split == s).count();
    println!(
        "wrote {} graphs to {} (train {} / val {} / test {})",
        entries.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
    );
    Ok(())
}
