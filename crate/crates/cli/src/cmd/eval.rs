//! `gatiaa eval` — score a checkpoint on one manifest split.
//!
//! Writes `metrics.csv` (correlations, accuracy, confusion counts) and
//! `distributions.csv` (mean predicted vs mean labeled histogram) under
//! `--out`. With `eval.oracle_replay=true` the labels themselves stand in
//! for the predictions — a pipeline check whose correlations must come out
//! exactly 1.

use super::{create_out_dir, load_split, workers, write_file, CliError, RunConfig};
use gatiaa_core::graph::{FeatureGraph, BINS};
use gatiaa_core::metrics::{
    evaluate, mean_score, plcc, srcc, threshold_metrics, EvalReport, MetricsError,
};
use gatiaa_core::model::checkpoint_load;
use std::path::Path;

/// Builds the report predictions-equal-labels instead of running a model.
fn oracle_report(graphs: &[FeatureGraph]) -> Result<EvalReport, CliError> {
    let label_means: Vec<f64> = graphs
        .iter()
        .map(|g| match &g.label {
            Some(h) => Ok(mean_score(h)),
            None => Err(MetricsError::MissingLabel { id: g.id.clone() }),
        })
        .collect::<Result<_, _>>()?;
    let mut warnings = Vec::new();
    let mut soft = |r: Result<f64, MetricsError>, what: &str| match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ (MetricsError::ZeroVariance | MetricsError::TooFew { .. })) => {
            warnings.push(format!("{what} undefined: {e}"));
            Ok(None)
        }
        Err(e) => Err(e),
    };
    let plcc_v = soft(plcc(&label_means, &label_means), "linear correlation")?;
    let srcc_v = soft(srcc(&label_means, &label_means), "rank correlation")?;
    let th = threshold_metrics(&label_means, &label_means, 5.0)?;
    let inv = 1.0 / graphs.len() as f64;
    let mut mean_label_bins = [0.0f64; BINS];
    for g in graphs {
        let label = g.label.as_ref().expect("labels were checked above");
        for (m, &p) in mean_label_bins.iter_mut().zip(label.bins().iter()) {
            *m += p as f64 * inv;
        }
    }
    Ok(EvalReport {
        count: graphs.len(),
        plcc: plcc_v,
        srcc: srcc_v,
        accuracy: th.accuracy,
        balanced_accuracy: th.balanced_accuracy,
        confusion: th.confusion,
        class_absent: th.class_absent,
        pred_means: label_means.clone(),
        label_means,
        mean_pred_bins: mean_label_bins,
        mean_label_bins,
        warnings,
    })
}

pub fn run(cfg: &RunConfig, checkpoint: &Path, manifest: &Path) -> Result<(), CliError> {
    let out = create_out_dir(cfg)?;
    print!(
        "{}",
        cfg.echo(
            "eval",
            &[
                ("checkpoint", checkpoint.display().to_string()),
                ("manifest", manifest.display().to_string()),
            ],
        )
    );

    let graphs = load_split(manifest, cfg.eval_split)?;
    if graphs.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no rows in the '{}' split",
            manifest.display(),
            cfg.eval_split.as_str()
        )));
    }

    let report = if cfg.oracle_replay {
        oracle_report(&graphs)?
    } else {
        let (model, _) = checkpoint_load(checkpoint)?;
        evaluate(&model, &graphs, cfg.eval_batch_size, workers(cfg))?
    };

    write_file(&out.join("metrics.csv"), &report.to_csv())?;
    write_file(&out.join("distributions.csv"), &report.distributions_csv())?;
    for w in &report.warnings {
        println!("warning: {w}");
    }
    println!(
        "evaluated {} graphs: plcc {} srcc {} accuracy {} balanced_accuracy {}",
        report.count,
        super::fmt_opt(report.plcc),
        super::fmt_opt(report.srcc),
        report.accuracy,
        report.balanced_accuracy,
    );
    Ok(())
}
