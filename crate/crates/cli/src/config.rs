//! Run configuration: defaults, flat `key=value` config files, dotted-key
//! overrides, and the effective-configuration echo.
//!
//! Every model, training, and data knob is addressable as a dotted key
//! (`model.d_enc`, `train.lr0`, `synth.grid_w`, …) from a config file or a
//! `--set` flag, with flags applied after the file. Unknown keys are
//! rejected rather than ignored so a typo cannot silently fall back to a
//! default.

use gatiaa_core::graph::GraphError;
use gatiaa_core::io::{IoError, Split};
use gatiaa_core::metrics::MetricsError;
use gatiaa_core::model::{CheckpointError, ModelError, ModelSpec, Variant};
use gatiaa_core::synth::{SynthConfig, SynthError};
use gatiaa_core::tape::TapeError;
use gatiaa_core::train::{LossKind, TrainConfig, TrainError};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

/// Anything a command can fail with. Every variant maps to exit code 2
/// (usage or input error); gradient-check failures use exit code 1 and are
/// reported through the command's return value instead.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// The full effective configuration of one command invocation.
#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Seed for data generation; the `--seed` flag also overrides
    /// `train.seed` so one flag pins a whole run.
    pub seed: u64,
    /// Serial execution: evaluation runs on one worker.
    pub deterministic: bool,
    /// Output directory (output file path for `build-graph`).
    pub out: Option<PathBuf>,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Graphs generated by `synth`.
    pub synth_count: usize,
    /// Evaluation batch width.
    pub eval_batch_size: usize,
    /// Manifest split scored by `eval`.
    pub eval_split: Split,
    /// Replay labels as predictions instead of running a model, as a
    /// pipeline oracle: correlations must come out exactly 1.
    pub oracle_replay: bool,
    /// Graphs generated for the ablation table.
    pub ablate_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            out: None,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            synth_count: 100,
            eval_batch_size: 64,
            eval_split: Split::Test,
            oracle_replay: false,
            ablate_count: 400,
        }
    }
}

fn parse_as<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("key '{key}': '{value}' is not {what}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::Usage(format!(
            "key '{key}': expected 'true' or 'false', got '{value}'"
        ))),
    }
}

/// Inclusive range written `lo..hi`.
fn parse_range(key: &str, value: &str) -> Result<(usize, usize), CliError> {
    let bad = || {
        CliError::Usage(format!(
            "key '{key}': expected an inclusive range like '2..8', got '{value}'"
        ))
    };
    let (lo, hi) = value.split_once("..").ok_or_else(bad)?;
    let lo = lo.trim().parse().map_err(|_| bad())?;
    let hi = hi.trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

/// `none` clears an optional value.
fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>, CliError> {
    if value == "none" {
        Ok(None)
    } else {
        parse_as(key, value, "a number").map(Some)
    }
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    if value == "none" {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

impl RunConfig {
    /// Applies one dotted-key assignment. Unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "seed" => self.seed = parse_as(key, value, "an integer")?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "out" => self.out = parse_opt_path(value),

            "model.variant" => {
                self.model.variant = Variant::parse(value).ok_or_else(|| {
                    let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                    CliError::Usage(format!(
                        "key '{key}': unknown variant '{value}' (expected one of {})",
                        names.join(", ")
                    ))
                })?
            }
            "model.d_in" => self.model.d_in = parse_as(key, value, "an integer")?,
            "model.d_enc" => self.model.d_enc = parse_as(key, value, "an integer")?,
            "model.d_att" => self.model.d_att = parse_as(key, value, "an integer")?,
            "model.heads" => self.model.heads = parse_as(key, value, "an integer")?,
            "model.d_dec" => self.model.d_dec = parse_as(key, value, "an integer")?,
            "model.bins" => self.model.bins = parse_as(key, value, "an integer")?,
            "model.drop_p" => self.model.drop_p = parse_as(key, value, "a number")?,
            "model.final_softmax" => self.model.final_softmax = parse_bool(key, value)?,
            "model.self_loops" => self.model.self_loops = parse_bool(key, value)?,

            "train.lr0" => self.train.lr0 = parse_as(key, value, "a number")?,
            "train.lambda" => self.train.lambda = parse_as(key, value, "a number")?,
            "train.epochs" => self.train.epochs = parse_as(key, value, "an integer")?,
            "train.batch_size" => self.train.batch_size = parse_as(key, value, "an integer")?,
            "train.beta1" => self.train.beta1 = parse_as(key, value, "a number")?,
            "train.beta2" => self.train.beta2 = parse_as(key, value, "a number")?,
            "train.adam_eps" => self.train.adam_eps = parse_as(key, value, "a number")?,
            "train.loss" => {
                self.train.loss = LossKind::parse(value).ok_or_else(|| {
                    CliError::Usage(format!(
                        "key '{key}': unknown loss '{value}' (expected mse_histogram or bce_binary)"
                    ))
                })?
            }
            "train.seed" => self.train.seed = parse_as(key, value, "an integer")?,
            "train.start_epoch" => self.train.start_epoch = parse_as(key, value, "an integer")?,
            "train.augment" => self.train.augment = parse_bool(key, value)?,
            "train.eval_augment" => self.train.eval_augment = parse_bool(key, value)?,
            "train.stop_at_val_plcc" => {
                self.train.stop_at_val_plcc = parse_opt_f64(key, value)?
            }
            "train.checkpoint_dir" => self.train.checkpoint_dir = parse_opt_path(value),

            "synth.feature_dim" => self.synth.feature_dim = parse_as(key, value, "an integer")?,
            "synth.grid_w" => self.synth.grid_w = parse_range(key, value)?,
            "synth.grid_h" => self.synth.grid_h = parse_range(key, value)?,
            "synth.noise" => self.synth.noise = parse_as(key, value, "a number")?,
            "synth.label_std" => self.synth.label_std = parse_as(key, value, "a number")?,
            "synth.count" => self.synth_count = parse_as(key, value, "an integer")?,

            "eval.batch_size" => self.eval_batch_size = parse_as(key, value, "an integer")?,
            "eval.split" => {
                self.eval_split = Split::parse(value).ok_or_else(|| {
                    CliError::Usage(format!(
                        "key '{key}': unknown split '{value}' (expected train, val, or test)"
                    ))
                })?
            }
            "eval.oracle_replay" => self.oracle_replay = parse_bool(key, value)?,

            "ablate.count" => self.ablate_count = parse_as(key, value, "an integer")?,

            _ => return Err(CliError::Usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Loads a flat config file: one `key = value` per line, blank lines
    /// skipped, text after `#` ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::File {
            path: path.to_path_buf(),
            source: e,
        })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "{} line {}: expected key=value, got '{raw}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies one `--set KEY=VALUE` override.
    pub fn apply_set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects KEY=VALUE, got '{assignment}'"))
        })?;
        self.apply(key.trim(), value.trim())
    }

    /// The `--seed` flag pins both the data seed and the training seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    /// Renders the full effective configuration, prefixed by the command
    /// name and its own arguments, for the run log.
    pub fn echo(&self, command: &str, args: &[(&str, String)]) -> String {
        let opt_path = |p: &Option<PathBuf>| match p {
            Some(p) => p.display().to_string(),
            None => "none".into(),
        };
        let opt_f64 = |v: Option<f64>| match v {
            Some(v) => v.to_string(),
            None => "none".into(),
        };
        let mut lines: Vec<(String, String)> = vec![("command".into(), command.into())];
        for (k, v) in args {
            lines.push(((*k).into(), v.clone()));
        }
        let m = &self.model;
        let t = &self.train;
        let s = &self.synth;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("out", opt_path(&self.out)),
            ("model.variant", m.variant.name().into()),
            ("model.d_in", m.d_in.to_string()),
            ("model.d_enc", m.d_enc.to_string()),
            ("model.d_att", m.d_att.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.d_dec", m.d_dec.to_string()),
            ("model.bins", m.bins.to_string()),
            ("model.drop_p", m.drop_p.to_string()),
            ("model.final_softmax", m.final_softmax.to_string()),
            ("model.self_loops", m.self_loops.to_string()),
            ("train.lr0", t.lr0.to_string()),
            ("train.lambda", t.lambda.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.loss", t.loss.name().into()),
            ("train.seed", t.seed.to_string()),
            ("train.start_epoch", t.start_epoch.to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.eval_augment", t.eval_augment.to_string()),
            ("train.stop_at_val_plcc", opt_f64(t.stop_at_val_plcc)),
            ("train.checkpoint_dir", opt_path(&t.checkpoint_dir)),
            ("synth.feature_dim", s.feature_dim.to_string()),
            ("synth.grid_w", format!("{}..{}", s.grid_w.0, s.grid_w.1)),
            ("synth.grid_h", format!("{}..{}", s.grid_h.0, s.grid_h.1)),
            ("synth.noise", s.noise.to_string()),
            ("synth.label_std", s.label_std.to_string()),
            ("synth.count", self.synth_count.to_string()),
            ("eval.batch_size", self.eval_batch_size.to_string()),
            ("eval.split", self.eval_split.as_str().into()),
            ("eval.oracle_replay", self.oracle_replay.to_string()),
            ("ablate.count", self.ablate_count.to_string()),
        ];
        for (k, v) in pairs {
            lines.push((k.into(), v));
        }
        let mut out = String::from("effective configuration:\n");
        for (k, v) in lines {
            out.push_str(&format!("  {k}={v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply("model.d_encc", "64").unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        assert!(err.to_string().contains("model.d_encc"));
    }

    #[test]
    fn every_documented_key_round_trips() {
        let mut cfg = RunConfig::default();
        let assignments = [
            ("seed", "9"),
            ("deterministic", "true"),
            ("out", "runs/a"),
            ("model.variant", "gat1_gatp"),
            ("model.d_in", "6"),
            ("model.d_enc", "8"),
            ("model.d_att", "4"),
            ("model.heads", "2"),
            ("model.d_dec", "8"),
            ("model.bins", "10"),
            ("model.drop_p", "0.25"),
            ("model.final_softmax", "false"),
            ("model.self_loops", "true"),
            ("train.lr0", "0.001"),
            ("train.lambda", "2"),
            ("train.epochs", "3"),
            ("train.batch_size", "4"),
            ("train.beta1", "0.8"),
            ("train.beta2", "0.99"),
            ("train.adam_eps", "0.0000001"),
            ("train.loss", "bce_binary"),
            ("train.seed", "5"),
            ("train.start_epoch", "1"),
            ("train.augment", "false"),
            ("train.eval_augment", "true"),
            ("train.stop_at_val_plcc", "0.9"),
            ("train.checkpoint_dir", "ckpts"),
            ("synth.feature_dim", "4"),
            ("synth.grid_w", "1..3"),
            ("synth.grid_h", "2..2"),
            ("synth.noise", "0.1"),
            ("synth.label_std", "1"),
            ("synth.count", "12"),
            ("eval.batch_size", "8"),
            ("eval.split", "val"),
            ("eval.oracle_replay", "true"),
            ("ablate.count", "60"),
        ];
        for (k, v) in assignments {
            cfg.apply(k, v).unwrap();
        }
        assert_eq!(cfg.seed, 9);
        assert!(cfg.deterministic);
        assert_eq!(cfg.model.variant, Variant::Gat1Gatp);
        assert_eq!(cfg.model.d_enc, 8);
        assert!(!cfg.model.final_softmax);
        assert_eq!(cfg.train.loss, LossKind::BceBinary);
        assert_eq!(cfg.train.stop_at_val_plcc, Some(0.9));
        assert_eq!(cfg.synth.grid_w, (1, 3));
        assert_eq!(cfg.eval_split, Split::Val);
        assert!(cfg.oracle_replay);
        assert_eq!(cfg.ablate_count, 60);
        // The echo must mention every assigned key with its new value.
        let echo = cfg.echo("test", &[]);
        for (k, v) in assignments {
            let k = if k == "synth.count" { "synth.count" } else { k };
            assert!(
                echo.contains(&format!("{k}={v}")),
                "echo is missing {k}={v}:\n{echo}"
            );
        }
    }

    #[test]
    fn config_file_skips_comments_and_rejects_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# a comment\n\nmodel.d_enc = 16  # trailing\ntrain.epochs=2\n")
            .unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.model.d_enc, 16);
        assert_eq!(cfg.train.epochs, 2);

        std::fs::write(&path, "model.d_enc\n").unwrap();
        let err = cfg.apply_file(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn optional_values_accept_none() {
        let mut cfg = RunConfig::default();
        cfg.apply("train.stop_at_val_plcc", "0.5").unwrap();
        cfg.apply("train.stop_at_val_plcc", "none").unwrap();
        assert_eq!(cfg.train.stop_at_val_plcc, None);
        cfg.apply("train.checkpoint_dir", "x").unwrap();
        cfg.apply("train.checkpoint_dir", "none").unwrap();
        assert_eq!(cfg.train.checkpoint_dir, None);
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("model.d_in", "six"),
            ("model.variant", "resnet"),
            ("train.loss", "hinge"),
            ("train.augment", "yes"),
            ("synth.grid_w", "3"),
            ("eval.split", "holdout"),
        ] {
            let err = cfg.apply(k, v).unwrap_err();
            assert!(err.to_string().contains(k), "{k}: {err}");
        }
    }

    #[test]
    fn seed_flag_pins_both_seeds() {
        let mut cfg = RunConfig::default();
        cfg.apply("train.seed", "3").unwrap();
        cfg.set_seed(11);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.train.seed, 11);
    }
}
