//! `gatiaa train` — train a model from a manifest's train/val splits.
//!
//! `--out` turns on per-epoch checkpoints, `best.ckpt`, and
//! `train_log.csv`. `--resume CKPT` continues a checkpointed run: the model
//! weights, the epoch numbering, and the decay schedule all pick up where
//! the checkpoint stopped, against the same total `train.epochs` budget.

use super::{fmt_opt, load_split, CliError, RunConfig};
use gatiaa_core::io::Split;
use gatiaa_core::model::{checkpoint_load, Model};
use gatiaa_core::train::train;
use std::path::Path;

pub fn run(cfg: &RunConfig, manifest: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let mut tcfg = cfg.train.clone();
    if let Some(dir) = &cfg.out {
        tcfg.checkpoint_dir = Some(dir.clone());
    }

    let mut model: Model<f32> = match resume {
        Some(ckpt) => {
            let (model, trained) = checkpoint_load(ckpt)?;
            tcfg.start_epoch = trained.unwrap_or(0) as usize;
            model
        }
        None => Model::build(cfg.model.clone(), tcfg.seed)?,
    };

    // Echo the spec actually in play: on resume it comes from the checkpoint.
    let mut effective = cfg.clone();
    effective.model = model.spec().clone();
    effective.train = tcfg.clone();
    let resume_arg = match resume {
        Some(p) => p.display().to_string(),
        None => "none".into(),
    };
    print!(
        "{}",
        effective.echo(
            "train",
            &[
                ("manifest", manifest.display().to_string()),
                ("resume", resume_arg),
            ],
        )
    );

    let train_set = load_split(manifest, Split::Train)?;
    let val_set = load_split(manifest, Split::Val)?;
    if train_set.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no train rows",
            manifest.display()
        )));
    }
    if tcfg.start_epoch >= tcfg.epochs {
        println!(
            "checkpoint already covers {} of {} epochs; nothing to train",
            tcfg.start_epoch, tcfg.epochs
        );
        return Ok(());
    }

    let outcome = train(&mut model, &train_set, &val_set, &tcfg)?;
    for r in &outcome.records {
        println!(
            "epoch {} lr {} train_loss {} val_plcc {} val_srcc {}",
            r.epoch,
            r.lr,
            r.train_loss,
            fmt_opt(r.val_plcc),
            fmt_opt(r.val_srcc),
        );
    }
    match (outcome.best_epoch, outcome.best_val_plcc) {
        (Some(e), Some(p)) => println!("best epoch {e}: val_plcc {p}"),
        _ => println!("no validation scores (empty val split)"),
    }
    Ok(())
}
